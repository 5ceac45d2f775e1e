#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lrmf/config_text.hpp"
#include "lrmf/convmf.hpp"
#include "lrmf/evalbench.hpp"
#include "lrmf/series_io.hpp"
#include "lrmf/version.hpp"

// Exercises the installed binary end to end: each case shells out to the
// executable named by LRMF_CLI_PATH and inspects exit codes, stdout/stderr,
// and the artifacts left on disk.

namespace fs = std::filesystem;
using namespace lrmf;

namespace {

const std::string& scratch() {
  static const std::string dir = [] {
    fs::path p = fs::temp_directory_path() /
                 ("lrmf_cli_test_" + std::to_string(static_cast<long>(::getpid())));
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
  }();
  return dir;
}

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
};

// Runs the binary from inside the scratch directory so relative artifact
// paths in the command line land there.
CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const std::string err_path = scratch() + "/stderr_" + std::to_string(counter++) + ".txt";
  std::string cmd = "cd " + scratch() + " && " + env_prefix +
                    (env_prefix.empty() ? "" : " ") + LRMF_CLI_PATH + " " + args + " 2>" +
                    err_path;
  CliResult result;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t got = 0;
  while ((got = std::fread(buf, 1, sizeof buf, pipe)) > 0) result.out.append(buf, got);
  const int rc = pclose(pipe);
  result.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream err(err_path, std::ios::binary);
  result.err.assign(std::istreambuf_iterator<char>(err), std::istreambuf_iterator<char>());
  return result;
}

std::string slurp(const std::string& rel) {
  std::ifstream in(scratch() + "/" + rel, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool same_bytes(const std::string& rel_a, const std::string& rel_b) {
  return slurp(rel_a) == slurp(rel_b);
}

bool cli_contains(const std::string& text, const std::string& needle) {
  return text.find(needle) != std::string::npos;
}

const std::string kTinyArch =
    "--extension --conv 3:1:1:1:3,3:1:0:1:2 --stem-dims 40,20 --fork-dims 30,20 "
    "--lr 1e-3 --epochs 6 --batch-size 8";

// One simulated series plus trained rank-2/3 checkpoints, built on first use
// and shared by the cases below.
struct World {
  World() {
    CliResult sim = run_cli(
        "simulate --ic landau-strong --nx 16 --nv 32 --dt 0.05 --steps 28 --out series.vpts");
    REQUIRE(sim.status == 0);
    CliResult small = run_cli(
        "simulate --ic two-stream --nx 12 --nv 16 --dt 0.05 --steps 16 --out small.vpts");
    REQUIRE(small.status == 0);
    CliResult tr = run_cli("train --data series.vpts --out-dir ckpt --ranks 2,3 " + kTinyArch);
    REQUIRE(tr.status == 0);
    train_stdout = tr.out;
  }
  std::string train_stdout;
};

const World& world() {
  static World w;
  return w;
}

}  // namespace

TEST_CASE("help enumerates every subcommand and flag") {
  CliResult all = run_cli("--help-all");
  CHECK(all.status == 0);
  for (const char* sub : {"simulate", "train", "evaluate", "benchmark", "export"})
    CHECK_MESSAGE(cli_contains(all.out, sub), "missing subcommand ", sub);
  for (const char* flag :
       {"--ic", "--nx", "--nv", "--dt", "--steps", "--record-every", "--alpha", "--wavenumber",
        "--v0", "--smooth-scale", "--out", "--data", "--out-dir", "--ranks", "--split",
        "--seed", "--augment-random-ic", "--activation", "--optimizer", "--lr", "--epochs",
        "--batch-size", "--conv", "--stem-dims", "--fork-dims", "--extension", "--methods",
        "--checkpoint-dir", "--bins", "--checkpoint-dirs", "--warmup-runs", "--measured-runs",
        "--frames", "--all-frames", "--config"})
    CHECK_MESSAGE(cli_contains(all.out, flag), "missing flag ", flag);

  CliResult version = run_cli("--version");
  CHECK(version.status == 0);
  CHECK(cli_contains(version.out, kVersionString));
}

TEST_CASE("simulate writes a readable series and reports the run") {
  world();
  TimeSeries series = read_series(scratch() + "/series.vpts");
  CHECK(series.grid.nx == 16);
  CHECK(series.grid.nv == 32);
  CHECK(series.frames.size() == 29);

  CliResult again = run_cli(
      "simulate --ic landau-strong --nx 16 --nv 32 --dt 0.05 --steps 28 --out series_b.vpts");
  CHECK(again.status == 0);
  CHECK(cli_contains(again.out, "seed = 0"));
  CHECK(cli_contains(again.out, "frames = 29"));
  CHECK(cli_contains(again.out, "mass_drift"));
  CHECK(cli_contains(again.out, "final_field_energy"));
  CHECK(same_bytes("series.vpts", "series_b.vpts"));

  ConfigText manifest = ConfigText::parse(slurp("series.vpts.manifest"));
  CHECK(manifest.require("config", "ic") == "landau-strong");
  CHECK(manifest.get_u64("config", "steps") == 28);
  CHECK(manifest.get_u64("seeds", "seed") == 0);
  CHECK(manifest.require("manifest", "version") == kVersionString);
}

TEST_CASE("simulate rejects unknown initial conditions with the full menu") {
  CliResult bad = run_cli("simulate --ic bogus --out nope.vpts");
  CHECK(bad.status != 0);
  CHECK(cli_contains(bad.err, "landau-strong"));
  CHECK(cli_contains(bad.err, "two-stream"));
  CHECK(cli_contains(bad.err, "random-smooth"));
  CHECK_FALSE(fs::exists(scratch() + "/nope.vpts"));
}

TEST_CASE("config file values merge under explicit flags") {
  {
    std::ofstream cfg(scratch() + "/sim.cfg", std::ios::binary);
    cfg << "[simulation]\nic = two-stream\nnx = 12\nnv = 16\nsteps = 10\nout = cfg.vpts\n";
  }
  CliResult r = run_cli("simulate --config sim.cfg --steps 6");
  CHECK(r.status == 0);
  TimeSeries series = read_series(scratch() + "/cfg.vpts");
  CHECK(series.grid.nx == 12);       // from config
  CHECK(series.grid.nv == 16);       // from config
  CHECK(series.frames.size() == 7);  // flag overrode steps = 10
  ConfigText manifest = ConfigText::parse(slurp("cfg.vpts.manifest"));
  CHECK(manifest.require("config", "ic") == "two-stream");
}

TEST_CASE("train writes per-rank checkpoints and reports deterministically") {
  const World& w = world();
  CHECK(cli_contains(w.train_stdout, "seed = 0"));
  CHECK(cli_contains(w.train_stdout, "rank 2"));
  CHECK(cli_contains(w.train_stdout, "rank 3"));

  ConvMFModel two = load_checkpoint(scratch() + "/ckpt/checkpoint_rank2.cmf");
  ConvMFModel three = load_checkpoint(scratch() + "/ckpt/checkpoint_rank3.cmf");
  CHECK(two.hyper.rank == 2);
  CHECK(three.hyper.rank == 3);

  const std::string report = slurp("ckpt/train_report_rank2.csv");
  CHECK(cli_contains(report, "epoch,train_loss,validation_loss,epoch_seconds"));
  CHECK(cli_contains(report, "\n0,nan,"));  // pre-training validation row

  ConfigText manifest = ConfigText::parse(slurp("ckpt/train_manifest.txt"));
  CHECK(manifest.require("config", "ranks") == "2,3");
  CHECK(manifest.require("hyperparameters", "stem_dims") == "40,20");

  // same seed, fresh process
  CliResult again = run_cli("train --data series.vpts --out-dir ckpt_b --ranks 2,3 " + kTinyArch);
  REQUIRE(again.status == 0);
  CHECK(same_bytes("ckpt/checkpoint_rank2.cmf", "ckpt_b/checkpoint_rank2.cmf"));
  CHECK(same_bytes("ckpt/checkpoint_rank3.cmf", "ckpt_b/checkpoint_rank3.cmf"));

  // a capped worker pool must not change the result
  CliResult pooled = run_cli("train --data series.vpts --out-dir ckpt_p --ranks 2,3 " + kTinyArch,
                             "LRMF_THREADS=2");
  REQUIRE(pooled.status == 0);
  CHECK(same_bytes("ckpt/checkpoint_rank2.cmf", "ckpt_p/checkpoint_rank2.cmf"));
  CHECK(same_bytes("ckpt/checkpoint_rank3.cmf", "ckpt_p/checkpoint_rank3.cmf"));
}

TEST_CASE("train reports divergence with the rank and epoch") {
  world();
  CliResult r = run_cli("train --data small.vpts --out-dir diverged --ranks 2 --extension "
                        "--conv 3:1:1:1:2 --stem-dims 20,10 --fork-dims 10,10 "
                        "--optimizer sgd --lr 1e18 --epochs 5 --batch-size 4");
  CHECK(r.status != 0);
  CHECK(cli_contains(r.err, "rank 2"));
  CHECK(cli_contains(r.err, "epoch"));
  CHECK(cli_contains(r.err, "diverged"));
  CHECK_FALSE(fs::exists(scratch() + "/diverged/checkpoint_rank2.cmf"));
}

TEST_CASE("evaluate writes averages, per-frame records, and histograms") {
  world();
  CliResult r = run_cli("evaluate --data series.vpts --ranks 2,3 --checkpoint-dir ckpt "
                        "--out-dir eval");
  REQUIRE(r.status == 0);
  CHECK(cli_contains(r.out, "seed = 0"));

  std::vector<EvalRecord> records = records_from_csv(slurp("eval/per_frame.csv"));
  REQUIRE_FALSE(records.empty());
  // 2 ranks x 6 methods x 8 held-out frames of the 29-frame series
  CHECK(records.size() == 2 * 6 * 8);
  for (const EvalRecord& rec : records) {
    CHECK(rec.scaled_loss >= 0.0);
    CHECK((rec.rank == 2 || rec.rank == 3));
  }

  // least-squares refits sit between the SVD optimum and the raw network loss
  for (std::size_t rank : {std::size_t{2}, std::size_t{3}}) {
    for (const EvalRecord& rec : records) {
      if (rec.rank != rank || rec.method != EvalMethod::SvdBasic) continue;
      auto loss_of = [&](EvalMethod m) {
        for (const EvalRecord& other : records)
          if (other.rank == rank && other.frame_index == rec.frame_index && other.method == m)
            return other.scaled_loss;
        REQUIRE(false);
        return 0.0;
      };
      const double svd = rec.scaled_loss;
      const double net = loss_of(EvalMethod::ConvMF);
      for (EvalMethod m : {EvalMethod::CalcU, EvalMethod::CalcV, EvalMethod::CalcSigma}) {
        const double refit = loss_of(m);
        CHECK(svd <= refit + 1e-12);
        CHECK(refit <= net + 1e-12);
      }
    }
  }

  const std::string averages = slurp("eval/averages.csv");
  CHECK(cli_contains(averages, "rank,method,mean_scaled_loss,frame_count"));
  CHECK(cli_contains(averages, "2,svd_basic,"));
  CHECK(cli_contains(averages, "3,calc_sigma,"));

  LossHistogram hist = histogram_from_csv(slurp("eval/histogram_rank2_convmf.csv"));
  std::size_t total = 0;
  for (std::size_t c : hist.counts) total += c;
  CHECK(total == 8);

  std::vector<EvalRecord> decomposition = records_from_csv(slurp("eval/decomposition.csv"));
  for (const EvalRecord& rec : decomposition) CHECK(rec.method != EvalMethod::SvdFaster);

  ConfigText manifest = ConfigText::parse(slurp("eval/manifest.txt"));
  CHECK(manifest.require("config", "ranks") == "2,3");
  CHECK(manifest.find("files", "per_frame") != nullptr);

  // byte-stable rerun
  CliResult again = run_cli("evaluate --data series.vpts --ranks 2,3 --checkpoint-dir ckpt "
                            "--out-dir eval_b");
  REQUIRE(again.status == 0);
  CHECK(same_bytes("eval/per_frame.csv", "eval_b/per_frame.csv"));
  CHECK(same_bytes("eval/averages.csv", "eval_b/averages.csv"));
}

TEST_CASE("evaluate with svd methods alone needs no checkpoints") {
  world();
  CliResult r = run_cli("evaluate --data series.vpts --ranks 4 "
                        "--methods svd_basic,svd_faster --checkpoint-dir does_not_exist "
                        "--out-dir eval_svd");
  CHECK(r.status == 0);
  std::vector<EvalRecord> records = records_from_csv(slurp("eval_svd/per_frame.csv"));
  CHECK(records.size() == 2 * 8);
}

TEST_CASE("evaluate names the available ranks when a checkpoint is missing") {
  world();
  CliResult r = run_cli("evaluate --data series.vpts --ranks 7 --checkpoint-dir ckpt "
                        "--out-dir eval_missing");
  CHECK(r.status != 0);
  CHECK(cli_contains(r.err, "rank 7"));
  CHECK(cli_contains(r.err, "available ranks: 2, 3"));
}

TEST_CASE("benchmark covers each input size in its own output file") {
  world();
  CliResult r = run_cli("benchmark --data series.vpts,small.vpts --ranks 2,3 "
                        "--methods svd_basic,svd_faster --measured-runs 5 --out-dir bench");
  REQUIRE(r.status == 0);
  CHECK(cli_contains(r.err, "single-threaded"));

  for (const char* name : {"timing_16x32.csv", "timing_12x16.csv"}) {
    std::vector<EvalRecord> records = records_from_csv(slurp(std::string("bench/") + name));
    CHECK(records.size() == 4);  // 2 ranks x 2 methods
    for (const EvalRecord& rec : records) CHECK(rec.wall_time_ns > 0.0);
  }

  ConfigText manifest = ConfigText::parse(slurp("bench/manifest.txt"));
  CHECK(manifest.find("files", "timing_16x32.csv") != nullptr);
  CHECK(manifest.find("files", "timing_12x16.csv") != nullptr);

  // reruns agree on everything except the wall-time column
  CliResult again = run_cli("benchmark --data series.vpts,small.vpts --ranks 2,3 "
                            "--methods svd_basic,svd_faster --measured-runs 5 --out-dir bench_b");
  REQUIRE(again.status == 0);
  std::vector<EvalRecord> a = records_from_csv(slurp("bench/timing_16x32.csv"));
  std::vector<EvalRecord> b = records_from_csv(slurp("bench_b/timing_16x32.csv"));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frame_index == b[i].frame_index);
    CHECK(a[i].rank == b[i].rank);
    CHECK(a[i].method == b[i].method);
    CHECK(a[i].scaled_loss == b[i].scaled_loss);
  }
}

TEST_CASE("benchmark refuses model methods without matching checkpoint dirs") {
  world();
  CliResult r = run_cli("benchmark --data series.vpts,small.vpts --checkpoint-dirs ckpt "
                        "--ranks 2 --methods convmf --measured-runs 5 --out-dir bench_bad");
  CHECK(r.status != 0);
  CHECK(cli_contains(r.err, "checkpoint-dirs"));
}

TEST_CASE("export dumps field energy and requested frames") {
  world();
  CliResult r = run_cli("export --data small.vpts --frames 0,3 --out-dir exp");
  REQUIRE(r.status == 0);

  TimeSeries series = read_series(scratch() + "/small.vpts");
  const std::string energy = slurp("exp/field_energy.csv");
  CHECK(cli_contains(energy, "frame_index,time,field_energy"));
  std::size_t rows = 0;
  for (char c : energy)
    if (c == '\n') ++rows;
  CHECK(rows == series.frames.size() + 2);  // note + header + one row per frame

  // frame dump round-trips bit-exactly through %.17g
  const std::string frame_text = slurp("exp/frame_3.csv");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < series.grid.nx; ++i)
    for (std::size_t j = 0; j < series.grid.nv; ++j) {
      const std::size_t end = frame_text.find_first_of(",\n", pos);
      REQUIRE(end != std::string::npos);
      CHECK(std::strtod(frame_text.substr(pos, end - pos).c_str(), nullptr) ==
            series.frames[3](i, j));
      pos = end + 1;
    }

  CliResult bad = run_cli("export --data small.vpts --frames 99 --out-dir exp_bad");
  CHECK(bad.status != 0);
  CHECK(cli_contains(bad.err, "out of range"));
}
