#ifndef LRMF_EVALBENCH_HPP
#define LRMF_EVALBENCH_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "lrmf/config_text.hpp"
#include "lrmf/convmf.hpp"
#include "lrmf/matrix.hpp"
#include "lrmf/split.hpp"
#include "lrmf/vlasov.hpp"

namespace lrmf {

// Evaluation and benchmarking across factorization methods. Losses are the
// squared Frobenius ratio throughout (see normalized_loss); every exported
// header notes that convention.

enum class EvalMethod {
  ConvMF,     // network inference, loss of the emitted (U, V)
  SvdBasic,   // full dense decomposition, truncated to rank
  SvdFaster,  // Krylov truncated decomposition at rank
  CalcU,      // least-squares refit of U with the network's V held fixed
  CalcV,      // least-squares refit of V with the network's U held fixed
  CalcSigma,  // best rank x rank mixer between the network's U and V
};

const char* method_name(EvalMethod method);
/// Inverse of method_name. Throws std::invalid_argument on unknown names.
EvalMethod method_from_name(const std::string& name);

struct EvalRecord {
  std::size_t frame_index = 0;
  std::size_t rank = 0;
  EvalMethod method = EvalMethod::SvdBasic;
  double scaled_loss = 0.0;
  /// Per-operation wall time; 0 for records produced by untimed evaluation.
  double wall_time_ns = 0.0;
  /// True when a least-squares refit hit a rank-deficient fixed factor and
  /// fell back to the minimum-norm solution.
  bool min_norm = false;
  /// Operations folded into each timed interval when the timer would
  /// otherwise be too coarse; wall_time_ns is already divided by it.
  std::size_t timing_batch = 1;
};

struct TimingConfig {
  std::size_t warmup_runs = 3;
  std::size_t measured_runs = 11;  // >= 5
};

/// ||x - u v||_F^2 / ||x||_F^2 with fixed-order accumulation. Requires u
/// m x r and v r x n matching x; throws std::invalid_argument on shape
/// mismatch or ||x|| = 0.
double normalized_loss(const Matrix& x, const Matrix& u, const Matrix& v);

struct CalculatedFactor {
  double scaled_loss = 0.0;
  Matrix optimizer;  // the solved factor (or mixer for calculated_sigma)
  bool min_norm = false;
};

/// Best U for fixed v: min over m x r U~ of ||x - U~ v||_F.
CalculatedFactor calculated_u(const Matrix& x, const Matrix& v);
/// Best V for fixed u: min over r x n V~ of ||x - u V~||_F.
CalculatedFactor calculated_v(const Matrix& x, const Matrix& u);
/// Best mixer for fixed u, v: min over r x r S~ of ||x - u S~ v||_F,
/// solved as S~ = pinv(u) x pinv(v).
CalculatedFactor calculated_sigma(const Matrix& x, const Matrix& u, const Matrix& v);

/// Evaluates every requested method at every rank on the held-out
/// (validation + test) frames of the split. Model-dependent methods (convmf
/// and the calc_* refits) read the trained model paired with each rank:
/// models[i] goes with ranks[i] and must have matching dimensions and rank;
/// a null entry is allowed only when just svd methods are requested. Records
/// come back sorted by (rank, method, frame_index). Throws
/// std::invalid_argument on a missing or mismatched model.
std::vector<EvalRecord> rank_sweep(const TimeSeries& series, const SplitSpec& split,
                                   const std::vector<std::size_t>& ranks,
                                   const std::vector<EvalMethod>& methods,
                                   const std::vector<const ConvMFModel*>& models);

/// Mean scaled loss over the records matching (rank, method). Throws
/// std::invalid_argument when nothing matches.
double mean_loss(const std::vector<EvalRecord>& records, std::size_t rank,
                 EvalMethod method);

struct LossHistogram {
  std::vector<double> bin_left;
  std::vector<double> bin_right;
  std::vector<std::size_t> counts;
};

/// Equal-width bins spanning [min, max] of the scaled losses at `rank`
/// (every method present in records contributes). The max lands in the last
/// bin; a degenerate range (all losses equal) occupies bin 0 only. Throws
/// std::invalid_argument when bins = 0 or no record matches the rank.
LossHistogram loss_histogram(const std::vector<EvalRecord>& records, std::size_t rank,
                             std::size_t bins = 50);

/// Median wall time per (method, rank) on the final frame of the series,
/// warmup_runs untimed runs then measured_runs timed ones. When a
/// single run is shorter than 100x the measured clock granularity, the run
/// is repeated in an inner loop and the per-operation time reported, with
/// the repeat count in timing_batch. convmf is timed as pure inference; the
/// calc_* methods time the least-squares refit with the network factor
/// already in hand. Callers must keep the process single-threaded for the
/// numbers to mean anything. Throws std::invalid_argument on bad config or
/// missing models (same pairing rule as rank_sweep).
std::vector<EvalRecord> timing_benchmark(const TimeSeries& series,
                                         const std::vector<std::size_t>& ranks,
                                         const std::vector<EvalMethod>& methods,
                                         const std::vector<const ConvMFModel*>& models,
                                         const TimingConfig& cfg = {});

struct ExtrapolationResult {
  TrainReport report;
  /// convmf loss per held-out frame, time order.
  std::vector<EvalRecord> records;
  /// First frame index the model never saw during training (= ceil(0.7 T)).
  std::size_t boundary_index = 0;
  ConvMFModel model;
};

/// Trains on the first 70% of the series in time order (optionally padded
/// with random-IC frames, which never enter validation) and evaluates the
/// trained model on the held-out last 30%. Training errors propagate.
ExtrapolationResult extrapolation_experiment(const TimeSeries& series,
                                             const Hyperparameters& hyper,
                                             bool with_random_augment);

/// CSV with header frame_index,rank,method,scaled_loss,wall_time_ns after a
/// comment line stating the loss convention. Doubles print with 17
/// significant digits so parsing them back is bit-exact.
std::string records_to_csv(const std::vector<EvalRecord>& records);
/// Parses records_to_csv output (comment lines skipped). Throws FormatError
/// on a wrong header or malformed row, with the line number.
std::vector<EvalRecord> records_from_csv(const std::string& text);

/// CSV with header bin_left,bin_right,count, same conventions.
std::string histogram_to_csv(const LossHistogram& hist);
LossHistogram histogram_from_csv(const std::string& text);

/// Manifest skeleton accompanying exported files: a [manifest] section with
/// the library version and the loss convention. Callers append [config],
/// [seeds], and [files] sections before serializing alongside the CSVs.
ConfigText make_manifest();

}  // namespace lrmf

#endif
