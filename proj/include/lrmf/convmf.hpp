#ifndef LRMF_CONVMF_HPP
#define LRMF_CONVMF_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lrmf/config_text.hpp"
#include "lrmf/matrix.hpp"
#include "lrmf/split.hpp"
#include "lrmf/vlasov.hpp"

namespace lrmf {

enum class Activation { Tanh, Relu, LeakyRelu, Sigmoid };
enum class OptimizerKind { Adam, Sgd, Adagrad };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);
std::string optimizer_name(OptimizerKind o);
OptimizerKind optimizer_from_name(const std::string& name);

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t out_channels = 8;
};

/// Network configuration. Axis values (activation, optimizer, learning rate,
/// layer counts, conv geometry, stem and fork widths) are restricted to the
/// tested option grids unless `extension` is set; dimension expressions
/// m*n/2^k (stem) and m*r/{7,5,1} (fork) count as on-grid.
struct Hyperparameters {
  Activation activation = Activation::Tanh;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 1e-4;
  std::vector<ConvLayerSpec> conv_layers = {{5, 1, 3, 1, 8}, {3, 1, 0, 1, 8}};
  std::vector<std::size_t> stem_dims = {500, 200};
  std::vector<std::size_t> fork_dims = {300, 200};
  std::size_t rank = 12;
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool extension = false;

  /// Throws std::invalid_argument naming the first off-grid value.
  void validate(std::size_t m, std::size_t n) const;
};

/// Dense nd-array with row-major layout; conv kernels are
/// {out_channels, kh, kw, in_channels}, linear weights {out, in}.
struct Tensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> data;

  std::size_t size() const { return data.size(); }
};

struct ConvMFModel {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t rank = 0;
  Hyperparameters hyper;
  std::vector<Tensor> params;

  std::size_t parameter_count() const;
};

/// Activations recorded by forward() for reuse in backward(). Rows index the
/// batch; conv feature maps are flattened height-major with channels last.
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<Matrix> conv_in;   // input to each conv layer
  std::vector<Matrix> conv_z;    // conv output before the activation
  std::vector<Matrix> stem_in;   // input to each stem linear
  std::vector<Matrix> stem_z;
  std::vector<Matrix> u_in;      // fork head inputs and pre-activations;
  std::vector<Matrix> u_z;       // the last entry of *_z is the raw head output
  std::vector<Matrix> v_in;
  std::vector<Matrix> v_z;
};

/// Cross-correlation of a {H, W, C} input with {out_ch, kh, kw, C} kernels.
/// Output height is floor((H + 2*pad - dilation*(kernel-1) - 1)/stride) + 1,
/// likewise width. Throws std::invalid_argument when the dilated kernel
/// exceeds the padded input.
Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      const std::vector<double>& bias, const ConvLayerSpec& spec);

/// Zero-filled parameter tensors with the names and shapes of the
/// architecture for an m-by-n input. This is the single source of truth for
/// the layer chain; build_convmf fills it and load_checkpoint verifies
/// against it. Throws on a chain that collapses a dimension to zero.
std::vector<Tensor> make_parameter_tensors(std::size_t m, std::size_t n,
                                           const Hyperparameters& hyper);

/// Seeded uniform init in +-sqrt(1/fan_in) over make_parameter_tensors.
ConvMFModel build_convmf(std::size_t m, std::size_t n, const Hyperparameters& hyper);

/// Pure inference: x must be m-by-n; returns U (m-by-rank) and V (rank-by-n).
FactorPair forward(const ConvMFModel& model, const Matrix& x);
FactorPair forward(const ConvMFModel& model, const Matrix& x, ForwardCache& cache);

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradients with respect to the two outputs (upstream.u is dL/dU,
/// upstream.v is dL/dV) and the cache from the matching forward call.
/// Returned tensors align with model.params by position.
std::vector<Tensor> backward(const ConvMFModel& model, const Matrix& x,
                             const FactorPair& upstream, const ForwardCache& cache);

struct Perturbation {
  std::size_t tensor_index = 0;
  std::size_t element_index = 0;
  double delta = 0.0;
};

/// Single-sample training loss |x - u v|_F^2 after adding each perturbation's
/// delta to one parameter element (independently, one loss per entry),
/// reusing cached activations upstream of the perturbed tensor and batching
/// the shared downstream linear stages. Used by the finite-difference
/// gradient checks, where from-scratch forwards at full scale would dominate
/// the runtime. The cache must come from a batch-of-one forward on x.
std::vector<double> perturbed_losses(const ConvMFModel& model, const Matrix& x,
                                     const ForwardCache& cache,
                                     const std::vector<Perturbation>& perturbations);
double perturbed_loss(const ConvMFModel& model, const Matrix& x, const ForwardCache& cache,
                      std::size_t tensor_index, std::size_t element_index, double delta);

/// Per-tensor optimizer state, allocated lazily on the first step.
struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step_count = 0;
};

/// Standard Adam with bias correction; epsilon sits outside the square root.
/// Throws std::runtime_error naming the tensor on a non-finite gradient.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              OptimizerState& state, double lr);
void adagrad_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                  OptimizerState& state, double lr, double eps = 1e-8);
void optimizer_step(OptimizerKind kind, std::vector<Tensor>& params,
                    const std::vector<Tensor>& grads, OptimizerState& state, double lr);

struct TrainReport {
  /// Mean unscaled squared Frobenius reconstruction error per training frame,
  /// one entry per epoch. Normalization is an evaluation-time concern only.
  std::vector<double> train_loss;
  /// Mean normalized loss over the validation frames; entry 0 is measured
  /// before any update, then one entry per epoch.
  std::vector<double> validation_loss;
  std::vector<double> epoch_seconds;
  /// Index into validation_loss of the checkpointed epoch (0 = initial
  /// parameters). The model holds these parameters when train() returns.
  std::size_t best_epoch = 0;
};

/// Minimizes the unscaled squared Frobenius reconstruction error over the
/// training frames with seeded shuffled minibatches, tracking validation
/// loss each epoch and restoring the best-validation parameters on return.
/// split.augment_random_ic appends smoothed-noise simulation frames (20% of
/// the training set, seeds 1000+i) to the training pool only. Throws
/// std::runtime_error with the epoch index if the loss turns non-finite.
TrainReport train(ConvMFModel& model, const TimeSeries& series, const SplitSpec& split,
                  const Hyperparameters& hyper);

/// Writes hyper into cfg's [hyperparameters] section; conv layers render as
/// kernel:stride:padding:dilation:channels quintets joined by commas.
void hyper_to_config(const Hyperparameters& hyper, ConfigText& cfg);

/// Reads back what hyper_to_config wrote. Throws FormatError on a missing or
/// malformed entry and on keys the section does not define.
Hyperparameters hyper_from_config(const ConfigText& cfg);

/// Binary checkpoint: magic "CMF1", version, dims, named tensors, and a
/// trailing structured-text hyperparameter block. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ConvMFModel& model);

/// Throws FormatError on bad magic, version, truncation, tensor shapes that
/// disagree with the declared architecture, or a hyperparameter block whose
/// rank conflicts with the header.
ConvMFModel load_checkpoint(const std::string& path);

}  // namespace lrmf

#endif
