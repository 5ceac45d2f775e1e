// Command-line front end: simulate phase-space series, train factorizer
// networks, evaluate them against SVD baselines, benchmark wall times, and
// export artifacts to CSV. Every command reads an optional structured-text
// config file; explicit flags win over config values. Seeds default to 0 and
// are always printed. Artifacts are written atomically (temp file + rename),
// so a failing command never leaves a truncated file behind.

#include <CLI11.hpp>

#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "lrmf/config_text.hpp"
#include "lrmf/convmf.hpp"
#include "lrmf/evalbench.hpp"
#include "lrmf/format_error.hpp"
#include "lrmf/series_io.hpp"
#include "lrmf/split.hpp"
#include "lrmf/version.hpp"
#include "lrmf/vlasov.hpp"

namespace fs = std::filesystem;
using namespace lrmf;

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string::npos) {
      if (start < text.size()) items.push_back(text.substr(start));
      break;
    }
    if (end > start) items.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return items;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_list(text)) {
    if (item.empty() || item.size() > 19 ||
        item.find_first_not_of("0123456789") != std::string::npos)
      throw std::runtime_error(what + ": '" + item + "' is not a count");
    out.push_back(static_cast<std::size_t>(std::strtoull(item.c_str(), nullptr, 10)));
  }
  if (out.empty()) throw std::runtime_error(what + ": empty list");
  return out;
}

std::vector<EvalMethod> parse_methods(const std::string& text) {
  std::vector<EvalMethod> out;
  for (const std::string& item : split_list(text)) out.push_back(method_from_name(item));
  if (out.empty()) throw std::runtime_error("methods: empty list");
  return out;
}

// Atomic write: the destination either keeps its old content or gets the new
// content in full.
void write_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out << content;
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw std::runtime_error("write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot move " + tmp + " into place");
  }
}

// Runs writer(tmp_path) then renames the result over path.
void write_via_temp(const std::string& path,
                    const std::function<void(const std::string&)>& writer) {
  const std::string tmp = path + ".tmp";
  try {
    writer(tmp);
  } catch (...) {
    std::remove(tmp.c_str());
    throw;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot move " + tmp + " into place");
  }
}

std::size_t env_thread_cap() {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("LRMF_THREADS")) {
    char* end = nullptr;
    errno = 0;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && errno == 0 && v >= 1) n = std::min<std::size_t>(n, v);
  }
  return n;
}

// Fixed-size task list on a small worker pool. Tasks fill pre-allocated
// result slots, so output order never depends on scheduling. The first
// exception wins and is rethrown after all workers drain.
void run_pool(const std::vector<std::function<void()>>& tasks, std::size_t threads) {
  if (threads <= 1 || tasks.size() <= 1) {
    for (const auto& task : tasks) task();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> workers;
  const std::size_t count = std::min(threads, tasks.size());
  workers.reserve(count);
  for (std::size_t i = 0; i < count; ++i) workers.emplace_back(worker);
  for (std::thread& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

// Config file + flags, flags winning. Each merge_* call resolves one option:
// the CLI value stays when the flag was passed, otherwise the config value
// is used when present.
class ConfigSource {
 public:
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    cfg_ = ConfigText::parse(text);
    loaded_ = true;
  }

  bool loaded() const { return loaded_; }
  const ConfigText& config() const { return cfg_; }

  bool merge_string(const CLI::Option* opt, const std::string& section, const std::string& key,
                    std::string& target) const {
    if (opt->count() > 0) return true;
    if (const std::string* v = find(section, key)) {
      target = *v;
      return true;
    }
    return false;
  }

  bool merge_u64(const CLI::Option* opt, const std::string& section, const std::string& key,
                 std::size_t& target) const {
    if (opt->count() > 0) return true;
    if (find(section, key)) {
      target = static_cast<std::size_t>(cfg_.get_u64(section, key));
      return true;
    }
    return false;
  }

  bool merge_double(const CLI::Option* opt, const std::string& section, const std::string& key,
                    double& target) const {
    if (opt->count() > 0) return true;
    if (find(section, key)) {
      target = cfg_.get_double(section, key);
      return true;
    }
    return false;
  }

  bool merge_bool(const CLI::Option* opt, const std::string& section, const std::string& key,
                  bool& target) const {
    if (opt->count() > 0) return true;
    if (find(section, key)) {
      target = cfg_.get_bool(section, key);
      return true;
    }
    return false;
  }

 private:
  const std::string* find(const std::string& section, const std::string& key) const {
    return loaded_ ? cfg_.find(section, key) : nullptr;
  }

  ConfigText cfg_;
  bool loaded_ = false;
};

SplitSpec make_split_spec(const std::string& name, std::uint64_t seed, bool augment) {
  SplitSpec spec;
  if (name == "random70")
    spec.mode = SplitMode::Random;
  else if (name == "sequential70")
    spec.mode = SplitMode::Sequential;
  else
    throw std::runtime_error("unknown split '" + name + "'; choose random70 or sequential70");
  spec.train_fraction = 0.7;
  spec.seed = seed;
  spec.augment_random_ic = augment;
  return spec;
}

std::string checkpoint_name(std::size_t rank) {
  return "checkpoint_rank" + std::to_string(rank) + ".cmf";
}

// Ranks with a checkpoint file present in dir, for error messages.
std::vector<std::size_t> available_checkpoint_ranks(const std::string& dir) {
  std::vector<std::size_t> ranks;
  if (!fs::is_directory(dir)) return ranks;
  for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("checkpoint_rank", 0) != 0) continue;
    const std::size_t dot = name.find(".cmf");
    if (dot == std::string::npos || dot <= 15) continue;
    const std::string digits = name.substr(15, dot - 15);
    if (digits.find_first_not_of("0123456789") != std::string::npos) continue;
    ranks.push_back(static_cast<std::size_t>(std::strtoull(digits.c_str(), nullptr, 10)));
  }
  std::sort(ranks.begin(), ranks.end());
  return ranks;
}

std::string join_counts(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t v : values) {
    if (!out.empty()) out += ", ";
    out += std::to_string(v);
  }
  return out.empty() ? "none" : out;
}

ConvMFModel load_rank_checkpoint(const std::string& dir, std::size_t rank) {
  const std::string path = (fs::path(dir) / checkpoint_name(rank)).string();
  if (!fs::exists(path))
    throw std::runtime_error("no checkpoint for rank " + std::to_string(rank) + " in " + dir +
                             "; available ranks: " + join_counts(available_checkpoint_ranks(dir)));
  return load_checkpoint(path);
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir);
}

// --- simulate ---------------------------------------------------------------

struct SimulateArgs {
  std::string config_path;
  std::string ic;
  std::size_t nx = 64;
  std::size_t nv = 128;
  double dt = 0.05;
  std::size_t steps = 100;
  std::size_t record_every = 1;
  double alpha = -1.0;  // resolved per ic when unset
  double wavenumber = 0.5;
  double v0 = 2.4;
  std::size_t seed = 0;
  double smooth_scale = 4.0;
  std::string out;
};

int cmd_simulate(const SimulateArgs& args, bool have_alpha) {
  static const char* kNames[] = {"landau-strong", "two-stream", "random-smooth"};
  const bool known = args.ic == kNames[0] || args.ic == kNames[1] || args.ic == kNames[2];
  if (!known)
    throw std::runtime_error("unknown initial condition '" + args.ic +
                             "'; choose one of {landau-strong, two-stream, random-smooth}");
  if (args.out.empty()) throw std::runtime_error("simulate: --out is required");

  PhaseSpaceGrid grid = make_default_grid(args.nx, args.nv);
  Matrix ic;
  if (args.ic == "landau-strong")
    ic = init_landau_strong(grid, have_alpha ? args.alpha : 0.5, args.wavenumber);
  else if (args.ic == "two-stream")
    ic = init_two_stream(grid, have_alpha ? args.alpha : 0.05, args.wavenumber, args.v0);
  else
    ic = init_random_smooth(grid, args.seed, args.smooth_scale);

  TimeSeries series = run(ic, grid, args.dt, args.steps, args.record_every, args.ic);
  write_via_temp(args.out, [&](const std::string& tmp) { write_series(tmp, series); });

  const double m0 = total_mass(series.frames.front(), grid);
  const double m1 = total_mass(series.frames.back(), grid);
  const double drift = std::abs(m1 - m0) / std::abs(m0);

  ConfigText manifest = make_manifest();
  manifest.set("config", "command", "simulate");
  manifest.set("config", "ic", args.ic);
  manifest.set_u64("config", "nx", args.nx);
  manifest.set_u64("config", "nv", args.nv);
  manifest.set_double("config", "dt", args.dt);
  manifest.set_u64("config", "steps", args.steps);
  manifest.set_u64("config", "record_every", args.record_every);
  if (args.ic != "random-smooth") {
    manifest.set_double("config", "alpha", have_alpha ? args.alpha
                                                      : (args.ic == "two-stream" ? 0.05 : 0.5));
    manifest.set_double("config", "wavenumber", args.wavenumber);
  }
  if (args.ic == "two-stream") manifest.set_double("config", "v0", args.v0);
  if (args.ic == "random-smooth") manifest.set_double("config", "smooth_scale", args.smooth_scale);
  manifest.set("config", "out", args.out);
  manifest.set_u64("seeds", "seed", args.seed);
  manifest.set("files", "series", args.out);
  write_file(args.out + ".manifest", manifest.serialize());

  std::printf("seed = %zu\n", args.seed);
  std::printf("frames = %zu\n", series.frames.size());
  std::printf("mass_drift = %s\n", fmt17(drift).c_str());
  std::printf("final_field_energy = %s\n", fmt17(series.field_energy.back()).c_str());
  std::printf("wrote %s\n", args.out.c_str());
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string data;
  std::string out_dir = ".";
  std::string ranks = "12";
  std::string split = "random70";
  std::size_t seed = 0;
  bool augment = false;
  // hyperparameter overrides; empty string means "library default"
  std::string activation;
  std::string optimizer;
  std::string conv_layers;
  std::string stem_dims;
  std::string fork_dims;
  double learning_rate = -1.0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  bool extension = false;
};

Hyperparameters resolve_hyper(const TrainArgs& args, const ConfigSource& src, bool have_lr,
                              bool have_epochs, bool have_batch) {
  ConfigText merged;
  hyper_to_config(Hyperparameters{}, merged);
  // config file section first, explicit flags on top
  if (src.loaded()) {
    if (const ConfigText::Section* section = src.config().find_section("hyperparameters"))
      for (const ConfigText::Entry& entry : section->entries)
        merged.set("hyperparameters", entry.key, entry.value);
  }
  if (!args.activation.empty()) merged.set("hyperparameters", "activation", args.activation);
  if (!args.optimizer.empty()) merged.set("hyperparameters", "optimizer", args.optimizer);
  if (!args.conv_layers.empty()) merged.set("hyperparameters", "conv_layers", args.conv_layers);
  if (!args.stem_dims.empty()) merged.set("hyperparameters", "stem_dims", args.stem_dims);
  if (!args.fork_dims.empty()) merged.set("hyperparameters", "fork_dims", args.fork_dims);
  if (have_lr) merged.set_double("hyperparameters", "learning_rate", args.learning_rate);
  if (have_epochs) merged.set_u64("hyperparameters", "epochs", args.epochs);
  if (have_batch) merged.set_u64("hyperparameters", "batch_size", args.batch_size);
  if (args.extension) merged.set_bool("hyperparameters", "extension", true);
  Hyperparameters hyper = hyper_from_config(merged);
  hyper.seed = args.seed;
  return hyper;
}

std::string train_report_csv(const TrainReport& report) {
  std::string out = "# epoch 0 row is the pre-training validation measurement; "
                    "epoch_seconds is a wall-time column\n";
  out += "epoch,train_loss,validation_loss,epoch_seconds\n";
  out += "0,nan," + fmt17(report.validation_loss.front()) + ",nan\n";
  for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
    out += std::to_string(e + 1);
    out += ',';
    out += fmt17(report.train_loss[e]);
    out += ',';
    out += fmt17(report.validation_loss[e + 1]);
    out += ',';
    out += fmt17(report.epoch_seconds[e]);
    out += '\n';
  }
  return out;
}

int cmd_train(const TrainArgs& args, const ConfigSource& src, bool have_lr, bool have_epochs,
              bool have_batch) {
  if (args.data.empty()) throw std::runtime_error("train: --data is required");
  const std::vector<std::size_t> ranks = parse_size_list(args.ranks, "ranks");
  Hyperparameters base = resolve_hyper(args, src, have_lr, have_epochs, have_batch);
  SplitSpec split = make_split_spec(args.split, args.seed, args.augment);
  TimeSeries series = read_series(args.data);
  ensure_out_dir(args.out_dir);

  std::printf("seed = %zu\n", args.seed);
  std::printf("data = %s (%zu frames of %zux%zu)\n", args.data.c_str(), series.frames.size(),
              series.grid.nx, series.grid.nv);

  struct RankResult {
    TrainReport report;
    std::string checkpoint_path;
    std::string report_path;
  };
  std::vector<RankResult> results(ranks.size());

  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    tasks.push_back([&, i] {
      const std::size_t rank = ranks[i];
      Hyperparameters hyper = base;
      hyper.rank = rank;
      ConvMFModel model = build_convmf(series.grid.nx, series.grid.nv, hyper);
      try {
        results[i].report = train(model, series, split, hyper);
      } catch (const std::exception& e) {
        throw std::runtime_error("rank " + std::to_string(rank) + ": " + e.what());
      }
      const std::string ckpt = (fs::path(args.out_dir) / checkpoint_name(rank)).string();
      write_via_temp(ckpt, [&](const std::string& tmp) { save_checkpoint(tmp, model); });
      const std::string report_path =
          (fs::path(args.out_dir) / ("train_report_rank" + std::to_string(rank) + ".csv"))
              .string();
      write_file(report_path, train_report_csv(results[i].report));
      results[i].checkpoint_path = ckpt;
      results[i].report_path = report_path;
    });
  }
  run_pool(tasks, env_thread_cap());

  ConfigText manifest = make_manifest();
  manifest.set("config", "command", "train");
  manifest.set("config", "data", args.data);
  manifest.set("config", "ranks", args.ranks);
  manifest.set("config", "split", args.split);
  manifest.set_bool("config", "augment_random_ic", args.augment);
  manifest.set("config", "out_dir", args.out_dir);
  hyper_to_config(base, manifest);
  manifest.set_u64("seeds", "seed", args.seed);
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const RankResult& r = results[i];
    manifest.set("files", "checkpoint_rank" + std::to_string(ranks[i]), r.checkpoint_path);
    manifest.set("files", "report_rank" + std::to_string(ranks[i]), r.report_path);
    std::printf("rank %zu: best epoch %zu, validation loss %s -> %s\n", ranks[i],
                r.report.best_epoch, fmt17(r.report.validation_loss.front()).c_str(),
                fmt17(r.report.validation_loss[r.report.best_epoch]).c_str());
    std::printf("wrote %s\n", r.checkpoint_path.c_str());
    std::printf("wrote %s\n", r.report_path.c_str());
  }
  write_file((fs::path(args.out_dir) / "train_manifest.txt").string(), manifest.serialize());
  return 0;
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::string config_path;
  std::string data;
  std::string ranks = "12";
  std::string methods = "convmf,svd_basic,svd_faster,calc_u,calc_v,calc_sigma";
  std::string checkpoint_dir = ".";
  std::string split = "random70";
  std::size_t seed = 0;
  std::size_t bins = 50;
  std::string out_dir = "eval";
};

std::string averages_csv(const std::vector<EvalRecord>& records,
                         const std::vector<std::size_t>& ranks,
                         const std::vector<EvalMethod>& methods) {
  std::string out = "# mean scaled loss per (rank, method); scaled_loss is the squared "
                    "Frobenius ratio\n";
  out += "rank,method,mean_scaled_loss,frame_count\n";
  for (std::size_t rank : ranks)
    for (EvalMethod m : methods) {
      std::size_t count = 0;
      for (const EvalRecord& r : records)
        if (r.rank == rank && r.method == m) ++count;
      out += std::to_string(rank);
      out += ',';
      out += method_name(m);
      out += ',';
      out += fmt17(mean_loss(records, rank, m));
      out += ',';
      out += std::to_string(count);
      out += '\n';
    }
  return out;
}

int cmd_evaluate(const EvaluateArgs& args) {
  if (args.data.empty()) throw std::runtime_error("evaluate: --data is required");
  const std::vector<std::size_t> ranks = parse_size_list(args.ranks, "ranks");
  const std::vector<EvalMethod> methods = parse_methods(args.methods);
  const bool needs_models =
      std::any_of(methods.begin(), methods.end(), [](EvalMethod m) {
        return m != EvalMethod::SvdBasic && m != EvalMethod::SvdFaster;
      });
  SplitSpec split = make_split_spec(args.split, args.seed, false);
  TimeSeries series = read_series(args.data);
  ensure_out_dir(args.out_dir);

  std::printf("seed = %zu\n", args.seed);

  // one rank at a time keeps at most one loaded model in memory per worker
  std::vector<std::vector<EvalRecord>> per_rank(ranks.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    tasks.push_back([&, i] {
      if (needs_models) {
        ConvMFModel model = load_rank_checkpoint(args.checkpoint_dir, ranks[i]);
        per_rank[i] = rank_sweep(series, split, {ranks[i]}, methods, {&model});
      } else {
        per_rank[i] = rank_sweep(series, split, {ranks[i]}, methods, {});
      }
    });
  }
  run_pool(tasks, env_thread_cap());

  std::vector<EvalRecord> records;
  for (const std::vector<EvalRecord>& chunk : per_rank)
    records.insert(records.end(), chunk.begin(), chunk.end());
  std::sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
    return std::make_tuple(a.rank, static_cast<int>(a.method), a.frame_index) <
           std::make_tuple(b.rank, static_cast<int>(b.method), b.frame_index);
  });

  ConfigText manifest = make_manifest();
  manifest.set("config", "command", "evaluate");
  manifest.set("config", "data", args.data);
  manifest.set("config", "ranks", args.ranks);
  manifest.set("config", "methods", args.methods);
  manifest.set("config", "checkpoint_dir", args.checkpoint_dir);
  manifest.set("config", "split", args.split);
  manifest.set_u64("config", "bins", args.bins);
  manifest.set("config", "out_dir", args.out_dir);
  manifest.set_u64("seeds", "seed", args.seed);

  auto emit = [&](const std::string& name, const std::string& content, const char* key) {
    const std::string path = (fs::path(args.out_dir) / name).string();
    write_file(path, content);
    manifest.set("files", key, path);
    std::printf("wrote %s\n", path.c_str());
  };

  emit("per_frame.csv", records_to_csv(records), "per_frame");
  emit("averages.csv", averages_csv(records, ranks, methods), "averages");

  // error decomposition: the least-squares refits next to their bounds
  std::vector<EvalRecord> decomposition;
  for (const EvalRecord& r : records)
    if (r.method != EvalMethod::SvdFaster) decomposition.push_back(r);
  if (!decomposition.empty())
    emit("decomposition.csv", records_to_csv(decomposition), "decomposition");

  for (std::size_t rank : ranks)
    for (EvalMethod m : methods) {
      std::vector<EvalRecord> selected;
      for (const EvalRecord& r : records)
        if (r.rank == rank && r.method == m) selected.push_back(r);
      if (selected.empty()) continue;
      const std::string name =
          "histogram_rank" + std::to_string(rank) + "_" + method_name(m) + ".csv";
      emit(name, histogram_to_csv(loss_histogram(selected, rank, args.bins)),
           ("histogram_rank" + std::to_string(rank) + "_" + method_name(m)).c_str());
    }

  for (std::size_t rank : ranks)
    for (EvalMethod m : methods)
      std::printf("rank %zu %-10s mean loss %s\n", rank, method_name(m),
                  fmt17(mean_loss(records, rank, m)).c_str());

  write_file((fs::path(args.out_dir) / "manifest.txt").string(), manifest.serialize());
  return 0;
}

// --- benchmark ---------------------------------------------------------------

struct BenchmarkArgs {
  std::string config_path;
  std::vector<std::string> data;
  std::vector<std::string> checkpoint_dirs;
  std::string ranks = "5,10,15,20,25,30";
  std::string methods = "convmf,svd_basic,svd_faster";
  std::size_t warmup_runs = 3;
  std::size_t measured_runs = 11;
  std::string out_dir = "bench";
};

int cmd_benchmark(const BenchmarkArgs& args) {
  if (args.data.empty()) throw std::runtime_error("benchmark: --data is required");
  const std::vector<std::size_t> ranks = parse_size_list(args.ranks, "ranks");
  const std::vector<EvalMethod> methods = parse_methods(args.methods);
  const bool needs_models =
      std::any_of(methods.begin(), methods.end(), [](EvalMethod m) {
        return m != EvalMethod::SvdBasic && m != EvalMethod::SvdFaster;
      });
  if (needs_models && args.checkpoint_dirs.size() != args.data.size())
    throw std::runtime_error("benchmark: need one --checkpoint-dirs entry per --data entry");
  TimingConfig cfg;
  cfg.warmup_runs = args.warmup_runs;
  cfg.measured_runs = args.measured_runs;
  ensure_out_dir(args.out_dir);

  std::fprintf(stderr,
               "note: benchmark runs single-threaded and assumes a quiescent machine\n");

  ConfigText manifest = make_manifest();
  manifest.set("config", "command", "benchmark");
  manifest.set("config", "ranks", args.ranks);
  manifest.set("config", "methods", args.methods);
  manifest.set_u64("config", "warmup_runs", args.warmup_runs);
  manifest.set_u64("config", "measured_runs", args.measured_runs);
  manifest.set("config", "out_dir", args.out_dir);
  manifest.set_u64("seeds", "seed", 0);
  std::printf("seed = 0\n");

  for (std::size_t d = 0; d < args.data.size(); ++d) {
    TimeSeries series = read_series(args.data[d]);
    manifest.set("config", "data_" + std::to_string(d), args.data[d]);
    std::vector<EvalRecord> records;
    // one rank at a time so at most one checkpoint is resident
    for (std::size_t rank : ranks) {
      std::vector<EvalRecord> timed;
      if (needs_models) {
        ConvMFModel model = load_rank_checkpoint(args.checkpoint_dirs[d], rank);
        timed = timing_benchmark(series, {rank}, methods, {&model}, cfg);
      } else {
        timed = timing_benchmark(series, {rank}, methods, {}, cfg);
      }
      for (const EvalRecord& r : timed)
        if (r.timing_batch > 1)
          std::fprintf(stderr, "note: %s rank %zu ran %zu ops per timed interval "
                               "(timer resolution)\n",
                       method_name(r.method), r.rank, r.timing_batch);
      records.insert(records.end(), timed.begin(), timed.end());
    }
    const std::string name = "timing_" + std::to_string(series.grid.nx) + "x" +
                             std::to_string(series.grid.nv) + ".csv";
    const std::string path = (fs::path(args.out_dir) / name).string();
    write_file(path, records_to_csv(records));
    manifest.set("files", name, path);
    std::printf("wrote %s\n", path.c_str());
    for (const EvalRecord& r : records)
      std::printf("%zux%zu rank %zu %-10s median %s ns\n", series.grid.nx, series.grid.nv,
                  r.rank, method_name(r.method), fmt17(r.wall_time_ns).c_str());
  }
  write_file((fs::path(args.out_dir) / "manifest.txt").string(), manifest.serialize());
  return 0;
}

// --- export ------------------------------------------------------------------

struct ExportArgs {
  std::string config_path;
  std::string data;
  std::string out_dir = "export";
  std::string frames;  // comma list; empty = none
  bool all_frames = false;
};

std::string frame_csv(const Matrix& f) {
  std::string out;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j < f.cols(); ++j) {
      if (j) out += ',';
      out += fmt17(f(i, j));
    }
    out += '\n';
  }
  return out;
}

int cmd_export(const ExportArgs& args) {
  if (args.data.empty()) throw std::runtime_error("export: --data is required");
  TimeSeries series = read_series(args.data);
  ensure_out_dir(args.out_dir);
  std::printf("seed = 0\n");

  std::vector<std::size_t> frames;
  if (args.all_frames)
    for (std::size_t i = 0; i < series.frames.size(); ++i) frames.push_back(i);
  else if (!args.frames.empty())
    frames = parse_size_list(args.frames, "frames");
  for (std::size_t f : frames)
    if (f >= series.frames.size())
      throw std::runtime_error("export: frame " + std::to_string(f) + " out of range (series has " +
                               std::to_string(series.frames.size()) + " frames)");

  ConfigText manifest = make_manifest();
  manifest.set("config", "command", "export");
  manifest.set("config", "data", args.data);
  manifest.set("config", "out_dir", args.out_dir);
  manifest.set("series", "ic", series.ic_name);
  manifest.set_u64("series", "nx", series.grid.nx);
  manifest.set_u64("series", "nv", series.grid.nv);
  manifest.set_u64("series", "frame_count", series.frames.size());
  manifest.set_double("series", "dt", series.dt);
  manifest.set_u64("seeds", "seed", 0);

  std::string energy = "# time = frame_index * dt\n";
  energy += "frame_index,time,field_energy\n";
  for (std::size_t i = 0; i < series.field_energy.size(); ++i) {
    energy += std::to_string(i);
    energy += ',';
    energy += fmt17(static_cast<double>(i) * series.dt);
    energy += ',';
    energy += fmt17(series.field_energy[i]);
    energy += '\n';
  }
  const std::string energy_path = (fs::path(args.out_dir) / "field_energy.csv").string();
  write_file(energy_path, energy);
  manifest.set("files", "field_energy", energy_path);
  std::printf("wrote %s\n", energy_path.c_str());

  for (std::size_t f : frames) {
    const std::string name = "frame_" + std::to_string(f) + ".csv";
    const std::string path = (fs::path(args.out_dir) / name).string();
    write_file(path, frame_csv(series.frames[f]));
    manifest.set("files", name, path);
    std::printf("wrote %s\n", path.c_str());
  }
  write_file((fs::path(args.out_dir) / "manifest.txt").string(), manifest.serialize());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Low-rank factorization toolkit for phase-space time series.\n"
      "Config files use [section] key = value syntax; flags win over config\n"
      "values. LRMF_THREADS caps the worker pool (benchmark always runs\n"
      "single-threaded). Seeds default to 0 and are printed by every command."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersionString));
  app.set_help_all_flag("--help-all", "Print help for every subcommand and flag");

  SimulateArgs sim;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "Integrate the kinetic solver and write a VPTS series file");
  simulate->add_option("--config", sim.config_path,
                       "Structured-text config file ([simulation] section)");
  simulate->add_option("--ic", sim.ic,
                       "Initial condition: landau-strong, two-stream, or random-smooth");
  simulate->add_option("--nx", sim.nx, "Spatial grid points")->capture_default_str();
  simulate->add_option("--nv", sim.nv, "Velocity grid points")->capture_default_str();
  simulate->add_option("--dt", sim.dt, "Time step")->capture_default_str();
  simulate->add_option("--steps", sim.steps, "Number of steps")->capture_default_str();
  simulate->add_option("--record-every", sim.record_every, "Record every k-th step")
      ->capture_default_str();
  CLI::Option* alpha_opt =
      simulate->add_option("--alpha", sim.alpha,
                           "Perturbation amplitude (default 0.5 landau, 0.05 two-stream)");
  simulate->add_option("--wavenumber", sim.wavenumber, "Perturbation wavenumber")
      ->capture_default_str();
  simulate->add_option("--v0", sim.v0, "Two-stream beam speed")->capture_default_str();
  simulate->add_option("--seed", sim.seed, "Seed for random-smooth")->capture_default_str();
  simulate->add_option("--smooth-scale", sim.smooth_scale,
                       "Gaussian blur width for random-smooth")
      ->capture_default_str();
  simulate->add_option("--out", sim.out, "Output VPTS path");

  TrainArgs tr;
  bool dummy_aug = false;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "Train one factorizer network per rank and write checkpoints");
  train_cmd->add_option("--config", tr.config_path,
                        "Config file ([training] and [hyperparameters] sections)");
  train_cmd->add_option("--data", tr.data, "Input VPTS series");
  train_cmd->add_option("--out-dir", tr.out_dir, "Checkpoint directory")->capture_default_str();
  train_cmd->add_option("--ranks", tr.ranks, "Comma list of ranks")->capture_default_str();
  train_cmd->add_option("--split", tr.split, "random70 or sequential70")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Seed for init, shuffling, and the split")
      ->capture_default_str();
  CLI::Option* aug_opt = train_cmd->add_flag("--augment-random-ic", dummy_aug,
                                             "Append random-IC frames to the training pool");
  train_cmd->add_option("--activation", tr.activation, "relu, tanh, leakyrelu, or sigmoid");
  train_cmd->add_option("--optimizer", tr.optimizer, "adam, sgd, or adagrad");
  CLI::Option* lr_opt = train_cmd->add_option("--lr", tr.learning_rate, "Learning rate");
  CLI::Option* epochs_opt = train_cmd->add_option("--epochs", tr.epochs, "Training epochs");
  CLI::Option* batch_opt = train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  train_cmd->add_option("--conv", tr.conv_layers,
                        "Conv layers as kernel:stride:padding:dilation:channels, comma joined");
  train_cmd->add_option("--stem-dims", tr.stem_dims, "Comma list of stem widths");
  train_cmd->add_option("--fork-dims", tr.fork_dims, "Comma list of fork widths");
  train_cmd->add_flag("--extension", tr.extension,
                      "Allow hyperparameters outside the studied grid");

  EvaluateArgs ev;
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "Score methods on held-out frames and write CSV artifacts");
  evaluate->add_option("--config", ev.config_path, "Config file ([evaluation] section)");
  evaluate->add_option("--data", ev.data, "Input VPTS series");
  evaluate->add_option("--ranks", ev.ranks, "Comma list of ranks")->capture_default_str();
  evaluate->add_option("--methods", ev.methods, "Comma list of methods")->capture_default_str();
  evaluate->add_option("--checkpoint-dir", ev.checkpoint_dir, "Directory with checkpoints")
      ->capture_default_str();
  evaluate->add_option("--split", ev.split, "random70 or sequential70")->capture_default_str();
  evaluate->add_option("--seed", ev.seed, "Split seed (must match training)")
      ->capture_default_str();
  evaluate->add_option("--bins", ev.bins, "Histogram bin count")->capture_default_str();
  evaluate->add_option("--out-dir", ev.out_dir, "Output directory")->capture_default_str();

  BenchmarkArgs bm;
  CLI::App* benchmark = app.add_subcommand(
      "benchmark", "Measure median wall times per (size, rank, method)");
  benchmark->add_option("--config", bm.config_path, "Config file ([benchmark] section)");
  benchmark->add_option("--data", bm.data, "VPTS series files, one per input size")
      ->delimiter(',');
  benchmark->add_option("--checkpoint-dirs", bm.checkpoint_dirs,
                        "Checkpoint directory per --data entry")
      ->delimiter(',');
  benchmark->add_option("--ranks", bm.ranks, "Comma list of ranks")->capture_default_str();
  benchmark->add_option("--methods", bm.methods, "Comma list of methods")->capture_default_str();
  benchmark->add_option("--warmup-runs", bm.warmup_runs, "Untimed runs before measuring")
      ->capture_default_str();
  benchmark->add_option("--measured-runs", bm.measured_runs, "Timed runs (median reported)")
      ->capture_default_str();
  benchmark->add_option("--out-dir", bm.out_dir, "Output directory")->capture_default_str();

  ExportArgs ex;
  CLI::App* export_cmd = app.add_subcommand(
      "export", "Convert a VPTS series to CSV artifacts");
  export_cmd->add_option("--config", ex.config_path, "Config file ([export] section)");
  export_cmd->add_option("--data", ex.data, "Input VPTS series");
  export_cmd->add_option("--out-dir", ex.out_dir, "Output directory")->capture_default_str();
  export_cmd->add_option("--frames", ex.frames, "Comma list of frame indices to dump");
  export_cmd->add_flag("--all-frames", ex.all_frames, "Dump every frame");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(simulate)) {
      ConfigSource src;
      if (!sim.config_path.empty()) src.load(sim.config_path);
      src.merge_string(simulate->get_option("--ic"), "simulation", "ic", sim.ic);
      src.merge_u64(simulate->get_option("--nx"), "simulation", "nx", sim.nx);
      src.merge_u64(simulate->get_option("--nv"), "simulation", "nv", sim.nv);
      src.merge_double(simulate->get_option("--dt"), "simulation", "dt", sim.dt);
      src.merge_u64(simulate->get_option("--steps"), "simulation", "steps", sim.steps);
      src.merge_u64(simulate->get_option("--record-every"), "simulation", "record_every",
                    sim.record_every);
      const bool have_alpha = src.merge_double(alpha_opt, "simulation", "alpha", sim.alpha);
      src.merge_double(simulate->get_option("--wavenumber"), "simulation", "wavenumber",
                       sim.wavenumber);
      src.merge_double(simulate->get_option("--v0"), "simulation", "v0", sim.v0);
      src.merge_u64(simulate->get_option("--seed"), "simulation", "seed", sim.seed);
      src.merge_double(simulate->get_option("--smooth-scale"), "simulation", "smooth_scale",
                       sim.smooth_scale);
      src.merge_string(simulate->get_option("--out"), "simulation", "out", sim.out);
      return cmd_simulate(sim, have_alpha);
    }
    if (app.got_subcommand(train_cmd)) {
      ConfigSource src;
      if (!tr.config_path.empty()) src.load(tr.config_path);
      src.merge_string(train_cmd->get_option("--data"), "training", "data", tr.data);
      src.merge_string(train_cmd->get_option("--out-dir"), "training", "out_dir", tr.out_dir);
      src.merge_string(train_cmd->get_option("--ranks"), "training", "ranks", tr.ranks);
      src.merge_string(train_cmd->get_option("--split"), "training", "split", tr.split);
      src.merge_u64(train_cmd->get_option("--seed"), "training", "seed", tr.seed);
      tr.augment = aug_opt->count() > 0;
      src.merge_bool(aug_opt, "training", "augment_random_ic", tr.augment);
      const bool have_lr = lr_opt->count() > 0;
      const bool have_epochs = epochs_opt->count() > 0;
      const bool have_batch = batch_opt->count() > 0;
      return cmd_train(tr, src, have_lr, have_epochs, have_batch);
    }
    if (app.got_subcommand(evaluate)) {
      ConfigSource src;
      if (!ev.config_path.empty()) src.load(ev.config_path);
      src.merge_string(evaluate->get_option("--data"), "evaluation", "data", ev.data);
      src.merge_string(evaluate->get_option("--ranks"), "evaluation", "ranks", ev.ranks);
      src.merge_string(evaluate->get_option("--methods"), "evaluation", "methods", ev.methods);
      src.merge_string(evaluate->get_option("--checkpoint-dir"), "evaluation", "checkpoint_dir",
                       ev.checkpoint_dir);
      src.merge_string(evaluate->get_option("--split"), "evaluation", "split", ev.split);
      src.merge_u64(evaluate->get_option("--seed"), "evaluation", "seed", ev.seed);
      src.merge_u64(evaluate->get_option("--bins"), "evaluation", "bins", ev.bins);
      src.merge_string(evaluate->get_option("--out-dir"), "evaluation", "out_dir", ev.out_dir);
      return cmd_evaluate(ev);
    }
    if (app.got_subcommand(benchmark)) {
      ConfigSource src;
      if (!bm.config_path.empty()) src.load(bm.config_path);
      if (bm.data.empty() && src.loaded())
        if (const std::string* v = src.config().find("benchmark", "data"))
          bm.data = split_list(*v);
      if (bm.checkpoint_dirs.empty() && src.loaded())
        if (const std::string* v = src.config().find("benchmark", "checkpoint_dirs"))
          bm.checkpoint_dirs = split_list(*v);
      src.merge_string(benchmark->get_option("--ranks"), "benchmark", "ranks", bm.ranks);
      src.merge_string(benchmark->get_option("--methods"), "benchmark", "methods", bm.methods);
      src.merge_u64(benchmark->get_option("--warmup-runs"), "benchmark", "warmup_runs",
                    bm.warmup_runs);
      src.merge_u64(benchmark->get_option("--measured-runs"), "benchmark", "measured_runs",
                    bm.measured_runs);
      src.merge_string(benchmark->get_option("--out-dir"), "benchmark", "out_dir", bm.out_dir);
      return cmd_benchmark(bm);
    }
    if (app.got_subcommand(export_cmd)) {
      ConfigSource src;
      if (!ex.config_path.empty()) src.load(ex.config_path);
      src.merge_string(export_cmd->get_option("--data"), "export", "data", ex.data);
      src.merge_string(export_cmd->get_option("--out-dir"), "export", "out_dir", ex.out_dir);
      src.merge_string(export_cmd->get_option("--frames"), "export", "frames", ex.frames);
      src.merge_bool(export_cmd->get_option("--all-frames"), "export", "all_frames",
                     ex.all_frames);
      return cmd_export(ex);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
