#include "lrmf/evalbench.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <tuple>

#include "lrmf/format_error.hpp"
#include "lrmf/linalg.hpp"
#include "lrmf/version.hpp"

namespace lrmf {

namespace {

using Clock = std::chrono::steady_clock;

// Defeats dead-code elimination of benchmarked work.
volatile double g_sink = 0.0;

constexpr const char* kRecordHeader = "frame_index,rank,method,scaled_loss,wall_time_ns";
constexpr const char* kHistogramHeader = "bin_left,bin_right,count";
constexpr const char* kLossNote =
    "# scaled_loss = ||x - u v||_F^2 / ||x||_F^2 (squared Frobenius ratio)";

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool needs_model(EvalMethod m) {
  return m != EvalMethod::SvdBasic && m != EvalMethod::SvdFaster;
}

bool contains(const std::vector<EvalMethod>& methods, EvalMethod m) {
  return std::find(methods.begin(), methods.end(), m) != methods.end();
}

// One trained model per rank whenever any model-dependent method runs; the
// model's dimensions and rank must match. Returns whether models are needed.
bool validate_models(const std::vector<std::size_t>& ranks,
                     const std::vector<EvalMethod>& methods,
                     const std::vector<const ConvMFModel*>& models, const Matrix& frame,
                     const char* who) {
  const std::string prefix = std::string(who) + ": ";
  bool model_needed = std::any_of(methods.begin(), methods.end(), needs_model);
  if (!models.empty() && models.size() != ranks.size())
    throw std::invalid_argument(prefix + "got " + std::to_string(models.size()) +
                                " models for " + std::to_string(ranks.size()) + " ranks");
  if (!model_needed) return false;
  if (models.size() != ranks.size())
    throw std::invalid_argument(prefix + "requested methods need one trained model per rank");
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const ConvMFModel* model = models[i];
    if (!model)
      throw std::invalid_argument(prefix + "no model for rank " + std::to_string(ranks[i]));
    if (model->rank != ranks[i])
      throw std::invalid_argument(prefix + "model of rank " + std::to_string(model->rank) +
                                  " paired with requested rank " + std::to_string(ranks[i]));
    if (model->m != frame.rows() || model->n != frame.cols())
      throw std::invalid_argument(prefix + "model expects " + std::to_string(model->m) + "x" +
                                  std::to_string(model->n) + " frames, series has " +
                                  shape_string(frame));
  }
  return true;
}

struct FrameEval {
  double loss = 0.0;
  bool min_norm = false;
};

// dense must be set for SvdBasic, fp for the model-dependent methods.
FrameEval eval_method(const Matrix& x, std::size_t rank, EvalMethod method,
                      const SvdResult* dense, const FactorPair* fp) {
  switch (method) {
    case EvalMethod::SvdBasic: {
      FactorPair p = dense->truncated(rank).factor_pair();
      return {normalized_loss(x, p.u, p.v), false};
    }
    case EvalMethod::SvdFaster: {
      FactorPair p = svd_truncated(x, rank).factor_pair();
      return {normalized_loss(x, p.u, p.v), false};
    }
    case EvalMethod::ConvMF:
      return {normalized_loss(x, fp->u, fp->v), false};
    case EvalMethod::CalcU: {
      CalculatedFactor c = calculated_u(x, fp->v);
      return {c.scaled_loss, c.min_norm};
    }
    case EvalMethod::CalcV: {
      CalculatedFactor c = calculated_v(x, fp->u);
      return {c.scaled_loss, c.min_norm};
    }
    case EvalMethod::CalcSigma: {
      CalculatedFactor c = calculated_sigma(x, fp->u, fp->v);
      return {c.scaled_loss, c.min_norm};
    }
  }
  throw std::invalid_argument("eval_method: unknown method");
}

std::vector<std::size_t> held_out_frames(std::size_t frame_count, const SplitSpec& split) {
  SplitIndices idx = make_split(frame_count, split);
  std::vector<std::size_t> held;
  held.reserve(idx.validation.size() + idx.test.size());
  std::merge(idx.validation.begin(), idx.validation.end(), idx.test.begin(), idx.test.end(),
             std::back_inserter(held));
  return held;
}

double elapsed_ns(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::nano>(t1 - t0).count();
}

// Smallest positive step observable between consecutive clock samples.
double clock_granularity_ns() {
  double best = 1e12;
  Clock::time_point prev = Clock::now();
  for (int i = 0; i < 2000; ++i) {
    Clock::time_point cur = Clock::now();
    double d = elapsed_ns(prev, cur);
    if (d > 0.0 && d < best) best = d;
    prev = cur;
  }
  return best == 1e12 ? 1.0 : best;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t end = line.find(',', start);
    if (end == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, end - start));
    start = end + 1;
  }
}

std::size_t parse_count_field(const std::string& s, std::size_t line_no, const char* column) {
  if (s.empty() || s.size() > 19 ||
      s.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError("csv line " + std::to_string(line_no) + ": bad " + column + " '" + s +
                      "'");
  return static_cast<std::size_t>(std::strtoull(s.c_str(), nullptr, 10));
}

double parse_real_field(const std::string& s, std::size_t line_no, const char* column) {
  if (s.empty())
    throw FormatError("csv line " + std::to_string(line_no) + ": empty " + column);
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE)
    throw FormatError("csv line " + std::to_string(line_no) + ": bad " + column + " '" + s +
                      "'");
  return v;
}

// Comment and blank lines are skipped; the first content line must match the
// expected header. Returns (line_no, field) pairs for the data rows.
std::vector<std::pair<std::size_t, std::vector<std::string>>> parse_csv_rows(
    const std::string& text, const char* header, std::size_t field_count) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  bool seen_header = false;
  std::vector<std::string> lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    const std::size_t line_no = i + 1;
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      if (line != header)
        throw FormatError("csv line " + std::to_string(line_no) + ": expected header '" +
                          header + "', got '" + line + "'");
      seen_header = true;
      continue;
    }
    std::vector<std::string> fields = split_fields(line);
    if (fields.size() != field_count)
      throw FormatError("csv line " + std::to_string(line_no) + ": expected " +
                        std::to_string(field_count) + " fields, got " +
                        std::to_string(fields.size()));
    rows.emplace_back(line_no, std::move(fields));
  }
  if (!seen_header) throw FormatError("csv: missing header line");
  return rows;
}

}  // namespace

const char* method_name(EvalMethod method) {
  switch (method) {
    case EvalMethod::ConvMF: return "convmf";
    case EvalMethod::SvdBasic: return "svd_basic";
    case EvalMethod::SvdFaster: return "svd_faster";
    case EvalMethod::CalcU: return "calc_u";
    case EvalMethod::CalcV: return "calc_v";
    case EvalMethod::CalcSigma: return "calc_sigma";
  }
  throw std::invalid_argument("method_name: unknown method");
}

EvalMethod method_from_name(const std::string& name) {
  static constexpr EvalMethod kAll[] = {EvalMethod::ConvMF,  EvalMethod::SvdBasic,
                                        EvalMethod::SvdFaster, EvalMethod::CalcU,
                                        EvalMethod::CalcV,   EvalMethod::CalcSigma};
  for (EvalMethod m : kAll)
    if (name == method_name(m)) return m;
  throw std::invalid_argument("unknown method name '" + name + "'");
}

double normalized_loss(const Matrix& x, const Matrix& u, const Matrix& v) {
  if (u.rows() != x.rows() || v.cols() != x.cols() || u.cols() != v.rows())
    throw std::invalid_argument("normalized_loss: shapes x=" + shape_string(x) +
                                " u=" + shape_string(u) + " v=" + shape_string(v));
  const double denom = x.squared_frobenius_norm();
  if (denom == 0.0)
    throw std::invalid_argument("normalized_loss: zero-norm input frame");
  Matrix recon = matmul(u, v);
  const double* xp = x.data();
  const double* rp = recon.data();
  double num = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = xp[i] - rp[i];
    num += d * d;
  }
  return num / denom;
}

CalculatedFactor calculated_u(const Matrix& x, const Matrix& v) {
  if (v.cols() != x.cols())
    throw std::invalid_argument("calculated_u: v=" + shape_string(v) +
                                " does not match x=" + shape_string(x));
  CalculatedFactor out;
  // min ||x - U v|| == min ||x^T - v^T U^T|| column-wise.
  Matrix ut = lstsq(v.transposed(), x.transposed(), &out.min_norm);
  out.optimizer = ut.transposed();
  out.scaled_loss = normalized_loss(x, out.optimizer, v);
  return out;
}

CalculatedFactor calculated_v(const Matrix& x, const Matrix& u) {
  if (u.rows() != x.rows())
    throw std::invalid_argument("calculated_v: u=" + shape_string(u) +
                                " does not match x=" + shape_string(x));
  CalculatedFactor out;
  out.optimizer = lstsq(u, x, &out.min_norm);
  out.scaled_loss = normalized_loss(x, u, out.optimizer);
  return out;
}

CalculatedFactor calculated_sigma(const Matrix& x, const Matrix& u, const Matrix& v) {
  if (u.rows() != x.rows() || v.cols() != x.cols() || u.cols() != v.rows())
    throw std::invalid_argument("calculated_sigma: shapes x=" + shape_string(x) +
                                " u=" + shape_string(u) + " v=" + shape_string(v));
  // The minimizer of ||x - u S v||_F over S is pinv(u) x pinv(v): u S v then
  // equals the orthogonal projection of x onto span(u) (x) rowspan(v).
  bool left_deficient = false;
  bool right_deficient = false;
  Matrix w = lstsq(u, x, &left_deficient);                            // pinv(u) x
  Matrix st = lstsq(v.transposed(), w.transposed(), &right_deficient);  // (w pinv(v))^T
  CalculatedFactor out;
  out.optimizer = st.transposed();
  out.min_norm = left_deficient || right_deficient;
  out.scaled_loss = normalized_loss(x, matmul(u, out.optimizer), v);
  return out;
}

std::vector<EvalRecord> rank_sweep(const TimeSeries& series, const SplitSpec& split,
                                   const std::vector<std::size_t>& ranks,
                                   const std::vector<EvalMethod>& methods,
                                   const std::vector<const ConvMFModel*>& models) {
  if (series.frames.empty()) throw std::invalid_argument("rank_sweep: empty series");
  const bool model_needed =
      validate_models(ranks, methods, models, series.frames.front(), "rank_sweep");
  const bool want_basic = contains(methods, EvalMethod::SvdBasic);

  std::vector<EvalRecord> out;
  const std::vector<std::size_t> held = held_out_frames(series.frames.size(), split);
  out.reserve(held.size() * ranks.size() * methods.size());
  for (std::size_t fi : held) {
    const Matrix& x = series.frames[fi];
    SvdResult dense;
    if (want_basic) dense = svd_dense(x);
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      FactorPair fp;
      if (model_needed) fp = forward(*models[i], x);
      for (EvalMethod m : methods) {
        FrameEval ev = eval_method(x, ranks[i], m, &dense, &fp);
        EvalRecord rec;
        rec.frame_index = fi;
        rec.rank = ranks[i];
        rec.method = m;
        rec.scaled_loss = ev.loss;
        rec.min_norm = ev.min_norm;
        out.push_back(rec);
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const EvalRecord& a, const EvalRecord& b) {
    return std::make_tuple(a.rank, static_cast<int>(a.method), a.frame_index) <
           std::make_tuple(b.rank, static_cast<int>(b.method), b.frame_index);
  });
  return out;
}

double mean_loss(const std::vector<EvalRecord>& records, std::size_t rank,
                 EvalMethod method) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const EvalRecord& r : records) {
    if (r.rank != rank || r.method != method) continue;
    sum += r.scaled_loss;
    ++count;
  }
  if (count == 0)
    throw std::invalid_argument("mean_loss: no records for rank " + std::to_string(rank) +
                                " method " + method_name(method));
  return sum / static_cast<double>(count);
}

LossHistogram loss_histogram(const std::vector<EvalRecord>& records, std::size_t rank,
                             std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("loss_histogram: bins must be positive");
  std::vector<double> losses;
  for (const EvalRecord& r : records)
    if (r.rank == rank) losses.push_back(r.scaled_loss);
  if (losses.empty())
    throw std::invalid_argument("loss_histogram: no records at rank " + std::to_string(rank));

  const auto [lo_it, hi_it] = std::minmax_element(losses.begin(), losses.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(bins);

  LossHistogram hist;
  hist.bin_left.resize(bins);
  hist.bin_right.resize(bins);
  hist.counts.assign(bins, 0);
  for (std::size_t i = 0; i < bins; ++i) {
    hist.bin_left[i] = lo + width * static_cast<double>(i);
    hist.bin_right[i] = i + 1 == bins ? hi : lo + width * static_cast<double>(i + 1);
  }
  for (double loss : losses) {
    std::size_t idx = 0;
    if (width > 0.0) idx = std::min(static_cast<std::size_t>((loss - lo) / width), bins - 1);
    ++hist.counts[idx];
  }
  return hist;
}

std::vector<EvalRecord> timing_benchmark(const TimeSeries& series,
                                         const std::vector<std::size_t>& ranks,
                                         const std::vector<EvalMethod>& methods,
                                         const std::vector<const ConvMFModel*>& models,
                                         const TimingConfig& cfg) {
  if (series.frames.empty()) throw std::invalid_argument("timing_benchmark: empty series");
  if (cfg.measured_runs < 5)
    throw std::invalid_argument("timing_benchmark: measured_runs must be at least 5, got " +
                                std::to_string(cfg.measured_runs));
  const Matrix& x = series.frames.back();
  const std::size_t frame_index = series.frames.size() - 1;
  const bool model_needed = validate_models(ranks, methods, models, x, "timing_benchmark");
  (void)model_needed;

  const double granularity = clock_granularity_ns();
  const double min_interval = 100.0 * granularity;

  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const std::size_t rank = ranks[i];
    const ConvMFModel* model = models.empty() ? nullptr : models[i];
    FactorPair fp;
    if (model) fp = forward(*model, x);
    SvdResult dense;
    if (contains(methods, EvalMethod::SvdBasic)) dense = svd_dense(x);

    for (EvalMethod m : methods) {
      auto op = [&]() {
        switch (m) {
          case EvalMethod::ConvMF: {
            FactorPair p = forward(*model, x);
            g_sink = g_sink + p.u(0, 0);
            break;
          }
          case EvalMethod::SvdBasic: {
            FactorPair p = svd_dense(x).truncated(rank).factor_pair();
            g_sink = g_sink + p.u(0, 0);
            break;
          }
          case EvalMethod::SvdFaster: {
            FactorPair p = svd_truncated(x, rank).factor_pair();
            g_sink = g_sink + p.u(0, 0);
            break;
          }
          case EvalMethod::CalcU:
            g_sink = g_sink + calculated_u(x, fp.v).optimizer(0, 0);
            break;
          case EvalMethod::CalcV:
            g_sink = g_sink + calculated_v(x, fp.u).optimizer(0, 0);
            break;
          case EvalMethod::CalcSigma:
            g_sink = g_sink + calculated_sigma(x, fp.u, fp.v).optimizer(0, 0);
            break;
        }
      };

      // Size the inner loop off one probe run so each timed interval spans
      // at least 100 clock ticks.
      Clock::time_point p0 = Clock::now();
      op();
      Clock::time_point p1 = Clock::now();
      const double probe = elapsed_ns(p0, p1);
      std::size_t batch = 1;
      if (probe < min_interval)
        batch = std::min<std::size_t>(
            1 + static_cast<std::size_t>(min_interval / std::max(probe, 1.0)), 1u << 20);

      for (std::size_t w = 0; w < cfg.warmup_runs; ++w) op();

      std::vector<double> samples;
      samples.reserve(cfg.measured_runs);
      for (std::size_t run = 0; run < cfg.measured_runs; ++run) {
        Clock::time_point t0 = Clock::now();
        for (std::size_t b = 0; b < batch; ++b) op();
        Clock::time_point t1 = Clock::now();
        samples.push_back(elapsed_ns(t0, t1) / static_cast<double>(batch));
      }

      FrameEval ev = eval_method(x, rank, m, &dense, &fp);
      EvalRecord rec;
      rec.frame_index = frame_index;
      rec.rank = rank;
      rec.method = m;
      rec.scaled_loss = ev.loss;
      rec.wall_time_ns = median_of(samples);
      rec.min_norm = ev.min_norm;
      rec.timing_batch = batch;
      out.push_back(rec);
    }
  }
  return out;
}

ExtrapolationResult extrapolation_experiment(const TimeSeries& series,
                                             const Hyperparameters& hyper,
                                             bool with_random_augment) {
  if (series.frames.empty())
    throw std::invalid_argument("extrapolation_experiment: empty series");
  SplitSpec split;
  split.mode = SplitMode::Sequential;
  split.train_fraction = 0.7;
  split.seed = hyper.seed;
  split.augment_random_ic = with_random_augment;

  ExtrapolationResult out;
  out.model =
      build_convmf(series.frames.front().rows(), series.frames.front().cols(), hyper);
  out.report = train(out.model, series, split, hyper);

  SplitIndices idx = make_split(series.frames.size(), split);
  out.boundary_index = idx.train.size();
  for (std::size_t fi : held_out_frames(series.frames.size(), split)) {
    const Matrix& x = series.frames[fi];
    FactorPair fp = forward(out.model, x);
    EvalRecord rec;
    rec.frame_index = fi;
    rec.rank = hyper.rank;
    rec.method = EvalMethod::ConvMF;
    rec.scaled_loss = normalized_loss(x, fp.u, fp.v);
    out.records.push_back(rec);
  }
  return out;
}

std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::string out = std::string(kLossNote) + "\n" + kRecordHeader + "\n";
  for (const EvalRecord& r : records) {
    out += std::to_string(r.frame_index);
    out += ',';
    out += std::to_string(r.rank);
    out += ',';
    out += method_name(r.method);
    out += ',';
    out += fmt17(r.scaled_loss);
    out += ',';
    out += fmt17(r.wall_time_ns);
    out += '\n';
  }
  return out;
}

std::vector<EvalRecord> records_from_csv(const std::string& text) {
  std::vector<EvalRecord> out;
  for (const auto& [line_no, fields] : parse_csv_rows(text, kRecordHeader, 5)) {
    EvalRecord rec;
    rec.frame_index = parse_count_field(fields[0], line_no, "frame_index");
    rec.rank = parse_count_field(fields[1], line_no, "rank");
    try {
      rec.method = method_from_name(fields[2]);
    } catch (const std::invalid_argument& e) {
      throw FormatError("csv line " + std::to_string(line_no) + ": " + e.what());
    }
    rec.scaled_loss = parse_real_field(fields[3], line_no, "scaled_loss");
    rec.wall_time_ns = parse_real_field(fields[4], line_no, "wall_time_ns");
    out.push_back(rec);
  }
  return out;
}

std::string histogram_to_csv(const LossHistogram& hist) {
  std::string out = std::string(kLossNote) + "\n" + kHistogramHeader + "\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    out += fmt17(hist.bin_left[i]);
    out += ',';
    out += fmt17(hist.bin_right[i]);
    out += ',';
    out += std::to_string(hist.counts[i]);
    out += '\n';
  }
  return out;
}

LossHistogram histogram_from_csv(const std::string& text) {
  LossHistogram hist;
  for (const auto& [line_no, fields] : parse_csv_rows(text, kHistogramHeader, 3)) {
    hist.bin_left.push_back(parse_real_field(fields[0], line_no, "bin_left"));
    hist.bin_right.push_back(parse_real_field(fields[1], line_no, "bin_right"));
    hist.counts.push_back(parse_count_field(fields[2], line_no, "count"));
  }
  return hist;
}

ConfigText make_manifest() {
  ConfigText cfg;
  cfg.set("manifest", "version", kVersionString);
  cfg.set("manifest", "loss_convention",
          "squared Frobenius ratio ||x - u v||_F^2 / ||x||_F^2");
  return cfg;
}

}  // namespace lrmf
