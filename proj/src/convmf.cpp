#include "lrmf/convmf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include "lrmf/rng.hpp"

namespace lrmf {

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::LeakyRelu: return "leaky_relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  throw std::invalid_argument("activation_name: bad enum value");
}

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "leaky_relu") return Activation::LeakyRelu;
  if (name == "sigmoid") return Activation::Sigmoid;
  throw std::invalid_argument("unknown activation '" + name +
                              "' (expected tanh, relu, leaky_relu, or sigmoid)");
}

std::string optimizer_name(OptimizerKind o) {
  switch (o) {
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Adagrad: return "adagrad";
  }
  throw std::invalid_argument("optimizer_name: bad enum value");
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adagrad") return OptimizerKind::Adagrad;
  throw std::invalid_argument("unknown optimizer '" + name +
                              "' (expected adam, sgd, or adagrad)");
}

namespace {

constexpr double kLeakySlope = 0.01;

bool on_grid(std::size_t v, std::initializer_list<std::size_t> grid) {
  for (std::size_t g : grid)
    if (v == g) return true;
  return false;
}

}  // namespace

void Hyperparameters::validate(std::size_t m, std::size_t n) const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("hyperparameters: learning_rate must be > 0");
  if (rank < 1) throw std::invalid_argument("hyperparameters: rank must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("hyperparameters: batch_size must be >= 1");
  for (const ConvLayerSpec& c : conv_layers) {
    if (c.kernel < 1 || c.stride < 1 || c.dilation < 1 || c.out_channels < 1)
      throw std::invalid_argument("hyperparameters: conv kernel/stride/dilation/channels must be >= 1");
  }
  if (extension) return;

  if (learning_rate != 1e-3 && learning_rate != 5e-4 && learning_rate != 1e-4)
    throw std::invalid_argument("hyperparameters: learning_rate " + std::to_string(learning_rate) +
                                " is off the tested grid {0.001, 0.0005, 0.0001}; set extension");
  if (conv_layers.empty() || conv_layers.size() > 5)
    throw std::invalid_argument("hyperparameters: conv layer count must be 1..5; set extension");
  for (const ConvLayerSpec& c : conv_layers) {
    if (!on_grid(c.kernel, {3, 5, 6}))
      throw std::invalid_argument("hyperparameters: conv kernel " + std::to_string(c.kernel) +
                                  " is off the tested grid {3, 5, 6}; set extension");
    if (!on_grid(c.stride, {1, 2, 3}))
      throw std::invalid_argument("hyperparameters: conv stride off the tested grid {1, 2, 3}");
    if (!on_grid(c.padding, {0, 1, 2, 3}))
      throw std::invalid_argument("hyperparameters: conv padding off the tested grid {0, 1, 2, 3}");
    if (c.dilation != 1)
      throw std::invalid_argument("hyperparameters: conv dilation off the tested grid {1}");
  }
  if (stem_dims.empty() || stem_dims.size() > 6)
    throw std::invalid_argument("hyperparameters: stem layer count must be 1..6; set extension");
  for (std::size_t d : stem_dims) {
    bool ok = on_grid(d, {100, 200, 500, 1000, 2000});
    for (std::size_t k = 1; !ok && k <= 5; ++k)
      ok = ((m * n) % (std::size_t{1} << k) == 0) && d == (m * n) >> k;
    if (!ok)
      throw std::invalid_argument("hyperparameters: stem dim " + std::to_string(d) +
                                  " is off the tested grid; set extension");
  }
  if (fork_dims.size() + 1 > 6)
    throw std::invalid_argument("hyperparameters: fork layer count must be 1..6; set extension");
  for (std::size_t d : fork_dims) {
    bool ok = d >= 100 && d <= 1000 && d % 100 == 0;
    // the divisor expression 9 - 2^k is positive only for k in {1, 2, 3}
    for (std::size_t div : {std::size_t{7}, std::size_t{5}, std::size_t{1}})
      ok = ok || ((m * rank) % div == 0 && d == (m * rank) / div);
    if (!ok)
      throw std::invalid_argument("hyperparameters: fork dim " + std::to_string(d) +
                                  " is off the tested grid; set extension");
  }
}

namespace {

struct ConvStage {
  std::size_t h_in = 0, w_in = 0, c_in = 0;
  std::size_t h_out = 0, w_out = 0, c_out = 0;
  std::size_t k = 0;  // kh*kw*c_in, the im2col column count
  ConvLayerSpec spec;
};

struct Plan {
  std::size_t m = 0, n = 0, rank = 0;
  std::vector<ConvStage> conv;
  std::size_t flat = 0;                    // width entering the first linear
  std::vector<std::size_t> stem;           // stem linear output widths
  std::vector<std::size_t> fork_u, fork_v; // head widths including the final projection
  // tensor index of the first stem / fork-u / fork-v weight (conv starts at 0)
  std::size_t stem_base = 0, u_base = 0, v_base = 0;
};

ConvStage plan_conv_stage(std::size_t h, std::size_t w, std::size_t c, const ConvLayerSpec& spec,
                          std::size_t stage_index) {
  if (spec.kernel < 1 || spec.stride < 1 || spec.dilation < 1 || spec.out_channels < 1)
    throw std::invalid_argument("conv layer " + std::to_string(stage_index) +
                                ": kernel, stride, dilation, and channels must be >= 1");
  const std::size_t eff = spec.dilation * (spec.kernel - 1) + 1;
  if (eff > h + 2 * spec.padding || eff > w + 2 * spec.padding)
    throw std::invalid_argument("conv layer " + std::to_string(stage_index) +
                                ": kernel exceeds the padded input extent");
  ConvStage st;
  st.h_in = h;
  st.w_in = w;
  st.c_in = c;
  st.h_out = (h + 2 * spec.padding - eff) / spec.stride + 1;
  st.w_out = (w + 2 * spec.padding - eff) / spec.stride + 1;
  st.c_out = spec.out_channels;
  st.k = spec.kernel * spec.kernel * c;
  st.spec = spec;
  return st;
}

Plan make_plan(std::size_t m, std::size_t n, const Hyperparameters& hyper) {
  if (m < 1 || n < 1) throw std::invalid_argument("network input dimensions must be >= 1");
  if (hyper.rank < 1) throw std::invalid_argument("rank must be >= 1");
  Plan p;
  p.m = m;
  p.n = n;
  p.rank = hyper.rank;
  std::size_t h = m, w = n, c = 1;
  for (std::size_t s = 0; s < hyper.conv_layers.size(); ++s) {
    ConvStage st = plan_conv_stage(h, w, c, hyper.conv_layers[s], s);
    h = st.h_out;
    w = st.w_out;
    c = st.c_out;
    p.conv.push_back(st);
  }
  p.flat = h * w * c;
  for (std::size_t d : hyper.stem_dims) {
    if (d == 0) throw std::invalid_argument("invalid layer chain: zero-width stem layer");
    p.stem.push_back(d);
  }
  for (std::size_t d : hyper.fork_dims) {
    if (d == 0) throw std::invalid_argument("invalid layer chain: zero-width fork layer");
    p.fork_u.push_back(d);
    p.fork_v.push_back(d);
  }
  p.fork_u.push_back(m * hyper.rank);
  p.fork_v.push_back(hyper.rank * n);
  p.stem_base = 2 * p.conv.size();
  p.u_base = p.stem_base + 2 * p.stem.size();
  p.v_base = p.u_base + 2 * p.fork_u.size();
  return p;
}

Tensor named_tensor(std::string name, std::vector<std::size_t> dims) {
  Tensor t;
  t.name = std::move(name);
  std::size_t count = 1;
  for (std::size_t d : dims) count *= d;
  t.dims = std::move(dims);
  t.data.assign(count, 0.0);
  return t;
}

// --- small fixed-order kernels -------------------------------------------

double dot8(const double* a, const double* b, std::size_t k) {
  constexpr std::size_t L = 8;
  double acc[L] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + L <= k; i += L)
    for (std::size_t l = 0; l < L; ++l) acc[l] += a[i + l] * b[i + l];
  double tail = 0.0;
  for (; i < k; ++i) tail += a[i] * b[i];
  double s = 0.0;
  for (std::size_t l = 0; l < L; ++l) s += acc[l];
  return s + tail;
}

void axpy(double* y, double s, const double* x, std::size_t k) {
  for (std::size_t i = 0; i < k; ++i) y[i] += s * x[i];
}

// z (B x out) = a (B x in) * w(out x in)^T + bias. The weight row is the
// streamed operand: with batched rows of a resident in cache, each w row is
// read exactly once per call, which is what keeps the wide stem layer from
// being re-streamed per sample.
void linear_fwd(const double* a, std::size_t B, std::size_t in, const double* w,
                const double* bias, std::size_t out, double* z) {
  for (std::size_t j = 0; j < out; ++j) {
    const double* wrow = w + j * in;
    const double bj = bias[j];
    for (std::size_t b = 0; b < B; ++b) z[b * out + j] = bj + dot8(a + b * in, wrow, in);
  }
}

// dw (out x in) += dz^T * a, db += column sums of dz.
void linear_bwd_params(const double* a, const double* dz, std::size_t B, std::size_t in,
                       std::size_t out, double* dw, double* db) {
  for (std::size_t j = 0; j < out; ++j) {
    double* dwrow = dw + j * in;
    for (std::size_t b = 0; b < B; ++b) {
      const double g = dz[b * out + j];
      db[j] += g;
      axpy(dwrow, g, a + b * in, in);
    }
  }
}

// da (B x in) = dz (B x out) * w (out x in); da is overwritten.
void linear_bwd_input(const double* dz, const double* w, std::size_t B, std::size_t in,
                      std::size_t out, double* da) {
  std::memset(da, 0, B * in * sizeof(double));
  for (std::size_t j = 0; j < out; ++j) {
    const double* wrow = w + j * in;
    for (std::size_t b = 0; b < B; ++b) axpy(da + b * in, dz[b * out + j], wrow, in);
  }
}

// --- convolution ----------------------------------------------------------

// cols is (h_out*w_out) x k row-major; input is channels-last {h, w, c}.
void im2col(const double* in, const ConvStage& st, double* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(st.spec.padding);
  const std::size_t kk = st.spec.kernel;
  for (std::size_t oy = 0; oy < st.h_out; ++oy) {
    for (std::size_t ox = 0; ox < st.w_out; ++ox) {
      double* col = cols + (oy * st.w_out + ox) * st.k;
      for (std::size_t ky = 0; ky < kk; ++ky) {
        const std::ptrdiff_t iy =
            static_cast<std::ptrdiff_t>(oy * st.spec.stride + ky * st.spec.dilation) - pad;
        for (std::size_t kx = 0; kx < kk; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * st.spec.stride + kx * st.spec.dilation) - pad;
          double* dst = col + (ky * kk + kx) * st.c_in;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(st.h_in) || ix < 0 ||
              ix >= static_cast<std::ptrdiff_t>(st.w_in)) {
            for (std::size_t c = 0; c < st.c_in; ++c) dst[c] = 0.0;
          } else {
            const double* src = in + (static_cast<std::size_t>(iy) * st.w_in +
                                      static_cast<std::size_t>(ix)) * st.c_in;
            for (std::size_t c = 0; c < st.c_in; ++c) dst[c] = src[c];
          }
        }
      }
    }
  }
}

void col2im_add(const double* dcols, const ConvStage& st, double* din) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(st.spec.padding);
  const std::size_t kk = st.spec.kernel;
  for (std::size_t oy = 0; oy < st.h_out; ++oy) {
    for (std::size_t ox = 0; ox < st.w_out; ++ox) {
      const double* col = dcols + (oy * st.w_out + ox) * st.k;
      for (std::size_t ky = 0; ky < kk; ++ky) {
        const std::ptrdiff_t iy =
            static_cast<std::ptrdiff_t>(oy * st.spec.stride + ky * st.spec.dilation) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(st.h_in)) continue;
        for (std::size_t kx = 0; kx < kk; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * st.spec.stride + kx * st.spec.dilation) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(st.w_in)) continue;
          const double* src = col + (ky * kk + kx) * st.c_in;
          double* dst = din + (static_cast<std::size_t>(iy) * st.w_in +
                               static_cast<std::size_t>(ix)) * st.c_in;
          for (std::size_t c = 0; c < st.c_in; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

// z[p*c_out + c] = bias[c] + dot(cols row p, w row c); channels-last output.
void conv_fwd_from_cols(const double* cols, const ConvStage& st, const double* w,
                        const double* bias, double* z) {
  const std::size_t pixels = st.h_out * st.w_out;
  for (std::size_t p = 0; p < pixels; ++p) {
    const double* col = cols + p * st.k;
    double* zrow = z + p * st.c_out;
    for (std::size_t c = 0; c < st.c_out; ++c) zrow[c] = bias[c] + dot8(col, w + c * st.k, st.k);
  }
}

// --- activations ----------------------------------------------------------

void apply_activation(Activation act, double* x, std::size_t count) {
  switch (act) {
    case Activation::Tanh:
      for (std::size_t i = 0; i < count; ++i) x[i] = std::tanh(x[i]);
      return;
    case Activation::Relu:
      for (std::size_t i = 0; i < count; ++i) x[i] = x[i] > 0.0 ? x[i] : 0.0;
      return;
    case Activation::LeakyRelu:
      for (std::size_t i = 0; i < count; ++i) x[i] = x[i] > 0.0 ? x[i] : kLeakySlope * x[i];
      return;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < count; ++i) x[i] = 1.0 / (1.0 + std::exp(-x[i]));
      return;
  }
}

// derivative of the activation expressed through its own output value
inline double act_deriv_from_y(Activation act, double y) {
  switch (act) {
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::LeakyRelu: return y > 0.0 ? 1.0 : kLeakySlope;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 0.0;
}

Matrix activated_copy(Activation act, const Matrix& z) {
  Matrix a = z;
  apply_activation(act, a.data(), a.size());
  return a;
}

// g *= act'(y) elementwise, with y the cached post-activation values.
void mul_act_deriv(Activation act, const Matrix& y, Matrix& g) {
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= act_deriv_from_y(act, y.data()[i]);
}

const Tensor& weight_of(const ConvMFModel& model, std::size_t base, std::size_t layer) {
  return model.params[base + 2 * layer];
}
const Tensor& bias_of(const ConvMFModel& model, std::size_t base, std::size_t layer) {
  return model.params[base + 2 * layer + 1];
}

// --- staged forward -------------------------------------------------------

void forward_batch(const ConvMFModel& model, const Plan& plan, const double* const* xs,
                   std::size_t B, ForwardCache& cache) {
  const Activation act = model.hyper.activation;
  cache.batch = B;
  cache.conv_in.clear();
  cache.conv_z.clear();
  cache.stem_in.clear();
  cache.stem_z.clear();
  cache.u_in.clear();
  cache.u_z.clear();
  cache.v_in.clear();
  cache.v_z.clear();

  Matrix current(B, plan.m * plan.n);
  for (std::size_t b = 0; b < B; ++b)
    std::memcpy(current.row(b), xs[b], plan.m * plan.n * sizeof(double));

  std::vector<double> cols;
  for (std::size_t s = 0; s < plan.conv.size(); ++s) {
    const ConvStage& st = plan.conv[s];
    cache.conv_in.push_back(std::move(current));
    Matrix z(B, st.h_out * st.w_out * st.c_out);
    cols.resize(st.h_out * st.w_out * st.k);
    const Tensor& w = weight_of(model, 0, s);
    const Tensor& bias = bias_of(model, 0, s);
    for (std::size_t b = 0; b < B; ++b) {
      im2col(cache.conv_in[s].row(b), st, cols.data());
      conv_fwd_from_cols(cols.data(), st, w.data.data(), bias.data.data(), z.row(b));
    }
    current = activated_copy(act, z);
    cache.conv_z.push_back(std::move(z));
  }

  std::size_t width = plan.conv.empty() ? plan.m * plan.n : plan.flat;
  for (std::size_t i = 0; i < plan.stem.size(); ++i) {
    cache.stem_in.push_back(std::move(current));
    Matrix z(B, plan.stem[i]);
    linear_fwd(cache.stem_in[i].data(), B, width, weight_of(model, plan.stem_base, i).data.data(),
               bias_of(model, plan.stem_base, i).data.data(), plan.stem[i], z.data());
    current = activated_copy(act, z);
    cache.stem_z.push_back(std::move(z));
    width = plan.stem[i];
  }

  auto run_head = [&](const std::vector<std::size_t>& dims, std::size_t base,
                      std::vector<Matrix>& head_in, std::vector<Matrix>& head_z) {
    Matrix a = current;  // fork input, shared by both heads
    std::size_t in_w = width;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      head_in.push_back(std::move(a));
      Matrix z(B, dims[i]);
      linear_fwd(head_in[i].data(), B, in_w, weight_of(model, base, i).data.data(),
                 bias_of(model, base, i).data.data(), dims[i], z.data());
      if (i + 1 < dims.size()) a = activated_copy(act, z);
      head_z.push_back(std::move(z));
      in_w = dims[i];
    }
  };
  run_head(plan.fork_u, plan.u_base, cache.u_in, cache.u_z);
  run_head(plan.fork_v, plan.v_base, cache.v_in, cache.v_z);
}

Matrix matrix_from_row(const Matrix& flat, std::size_t b, std::size_t rows, std::size_t cols) {
  Matrix out(rows, cols);
  std::memcpy(out.data(), flat.row(b), rows * cols * sizeof(double));
  return out;
}

double sample_sq_loss(const Matrix& x, const double* uflat, const double* vflat, std::size_t m,
                      std::size_t n, std::size_t r) {
  // | x - U V |_F^2 without materializing copies of U and V
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* u = uflat + i * r;
    const double* xrow = x.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      double recon = 0.0;
      for (std::size_t k = 0; k < r; ++k) recon += u[k] * vflat[k * n + j];
      const double d = xrow[j] - recon;
      loss += d * d;
    }
  }
  return loss;
}

}  // namespace

std::size_t ConvMFModel::parameter_count() const {
  std::size_t total = 0;
  for (const Tensor& t : params) total += t.size();
  return total;
}

std::vector<Tensor> make_parameter_tensors(std::size_t m, std::size_t n,
                                           const Hyperparameters& hyper) {
  Plan plan = make_plan(m, n, hyper);
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < plan.conv.size(); ++s) {
    const ConvStage& st = plan.conv[s];
    out.push_back(named_tensor("conv" + std::to_string(s) + ".weight",
                               {st.c_out, st.spec.kernel, st.spec.kernel, st.c_in}));
    out.push_back(named_tensor("conv" + std::to_string(s) + ".bias", {st.c_out}));
  }
  std::size_t width = plan.conv.empty() ? m * n : plan.flat;
  for (std::size_t i = 0; i < plan.stem.size(); ++i) {
    out.push_back(named_tensor("stem" + std::to_string(i) + ".weight", {plan.stem[i], width}));
    out.push_back(named_tensor("stem" + std::to_string(i) + ".bias", {plan.stem[i]}));
    width = plan.stem[i];
  }
  auto head = [&](const char* prefix, const std::vector<std::size_t>& dims) {
    std::size_t in_w = width;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      out.push_back(named_tensor(prefix + std::to_string(i) + ".weight", {dims[i], in_w}));
      out.push_back(named_tensor(prefix + std::to_string(i) + ".bias", {dims[i]}));
      in_w = dims[i];
    }
  };
  head("fork_u", plan.fork_u);
  head("fork_v", plan.fork_v);
  return out;
}

ConvMFModel build_convmf(std::size_t m, std::size_t n, const Hyperparameters& hyper) {
  hyper.validate(m, n);
  ConvMFModel model;
  model.m = m;
  model.n = n;
  model.rank = hyper.rank;
  model.hyper = hyper;
  model.params = make_parameter_tensors(m, n, hyper);
  Rng rng(hyper.seed);
  for (std::size_t t = 0; t + 1 < model.params.size(); t += 2) {
    Tensor& w = model.params[t];
    Tensor& b = model.params[t + 1];
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < w.dims.size(); ++d) fan_in *= w.dims[d];
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (double& x : w.data) x = rng.uniform(-bound, bound);
    for (double& x : b.data) x = rng.uniform(-bound, bound);
  }
  return model;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const std::vector<double>& bias,
                      const ConvLayerSpec& spec) {
  if (input.dims.size() != 3) throw std::invalid_argument("conv2d_forward: input must be {H, W, C}");
  if (weight.dims.size() != 4)
    throw std::invalid_argument("conv2d_forward: weight must be {out_ch, kh, kw, in_ch}");
  if (weight.dims[1] != spec.kernel || weight.dims[2] != spec.kernel ||
      weight.dims[3] != input.dims[2] || weight.dims[0] != spec.out_channels)
    throw std::invalid_argument("conv2d_forward: weight shape disagrees with the layer spec");
  if (bias.size() != spec.out_channels)
    throw std::invalid_argument("conv2d_forward: bias length disagrees with out_channels");
  ConvStage st = plan_conv_stage(input.dims[0], input.dims[1], input.dims[2], spec, 0);
  std::vector<double> cols(st.h_out * st.w_out * st.k);
  im2col(input.data.data(), st, cols.data());
  Tensor out = named_tensor("conv2d", {st.h_out, st.w_out, st.c_out});
  conv_fwd_from_cols(cols.data(), st, weight.data.data(), bias.data(), out.data.data());
  return out;
}

FactorPair forward(const ConvMFModel& model, const Matrix& x, ForwardCache& cache) {
  if (x.rows() != model.m || x.cols() != model.n)
    throw std::invalid_argument("forward: input is " + shape_string(x) + ", model expects " +
                                std::to_string(model.m) + "x" + std::to_string(model.n));
  Plan plan = make_plan(model.m, model.n, model.hyper);
  const double* xp = x.data();
  forward_batch(model, plan, &xp, 1, cache);
  FactorPair out;
  out.u = matrix_from_row(cache.u_z.back(), 0, model.m, model.rank);
  out.v = matrix_from_row(cache.v_z.back(), 0, model.rank, model.n);
  return out;
}

FactorPair forward(const ConvMFModel& model, const Matrix& x) {
  ForwardCache cache;
  return forward(model, x, cache);
}

namespace {

// Shared by backward() and train(): upstream is given per sample as flat
// rows (B x m*rank and B x rank*n).
std::vector<Tensor> backward_batch(const ConvMFModel& model, const Plan& plan,
                                   const Matrix& du_flat, const Matrix& dv_flat,
                                   const ForwardCache& cache) {
  const Activation act = model.hyper.activation;
  const std::size_t B = cache.batch;
  std::vector<Tensor> grads = make_parameter_tensors(model.m, model.n, model.hyper);

  // Walks one fork head backward; returns the gradient at the shared fork input.
  auto head_backward = [&](const std::vector<std::size_t>& dims, std::size_t base,
                           const std::vector<Matrix>& head_in, const Matrix& upstream) {
    Matrix g = upstream;
    for (std::size_t ii = dims.size(); ii-- > 0;) {
      const Tensor& w = weight_of(model, base, ii);
      const std::size_t in_w = w.dims[1];
      linear_bwd_params(head_in[ii].data(), g.data(), B, in_w, dims[ii],
                        grads[base + 2 * ii].data.data(), grads[base + 2 * ii + 1].data.data());
      Matrix da(B, in_w);
      linear_bwd_input(g.data(), w.data.data(), B, in_w, dims[ii], da.data());
      if (ii > 0) mul_act_deriv(act, head_in[ii], da);
      g = std::move(da);
    }
    return g;
  };

  Matrix dfork = head_backward(plan.fork_u, plan.u_base, cache.u_in, du_flat);
  {
    Matrix dfork_v = head_backward(plan.fork_v, plan.v_base, cache.v_in, dv_flat);
    for (std::size_t i = 0; i < dfork.size(); ++i) dfork.data()[i] += dfork_v.data()[i];
  }

  Matrix g = std::move(dfork);
  if (!plan.stem.empty()) {
    // the activation between the last stem layer and the fork
    mul_act_deriv(act, cache.u_in[0], g);
    for (std::size_t ii = plan.stem.size(); ii-- > 0;) {
      const Tensor& w = weight_of(model, plan.stem_base, ii);
      const std::size_t in_w = w.dims[1];
      linear_bwd_params(cache.stem_in[ii].data(), g.data(), B, in_w, plan.stem[ii],
                        grads[plan.stem_base + 2 * ii].data.data(),
                        grads[plan.stem_base + 2 * ii + 1].data.data());
      if (ii == 0 && plan.conv.empty()) return grads;  // input gradient unused
      Matrix da(B, in_w);
      linear_bwd_input(g.data(), w.data.data(), B, in_w, plan.stem[ii], da.data());
      if (ii > 0) mul_act_deriv(act, cache.stem_in[ii], da);
      g = std::move(da);
    }
  }

  if (plan.conv.empty()) return grads;
  // g now holds the gradient at the last conv activation output
  std::vector<double> cols, dcols;
  for (std::size_t s = plan.conv.size(); s-- > 0;) {
    const ConvStage& st = plan.conv[s];
    const Matrix& post = s + 1 < plan.conv.size() ? cache.conv_in[s + 1]
                       : (!plan.stem.empty() ? cache.stem_in[0] : cache.u_in[0]);
    mul_act_deriv(act, post, g);
    const std::size_t pixels = st.h_out * st.w_out;
    const Tensor& w = weight_of(model, 0, s);
    double* gw = grads[2 * s].data.data();
    double* gb = grads[2 * s + 1].data.data();
    cols.resize(pixels * st.k);
    Matrix da(B, st.h_in * st.w_in * st.c_in);
    if (s > 0) dcols.resize(pixels * st.k);
    for (std::size_t b = 0; b < B; ++b) {
      im2col(cache.conv_in[s].row(b), st, cols.data());
      const double* dz = g.row(b);
      for (std::size_t c = 0; c < st.c_out; ++c) {
        double* gwrow = gw + c * st.k;
        double gbc = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) {
          const double gv = dz[p * st.c_out + c];
          gbc += gv;
          axpy(gwrow, gv, cols.data() + p * st.k, st.k);
        }
        gb[c] += gbc;
      }
      if (s > 0) {
        for (std::size_t p = 0; p < pixels; ++p) {
          double* drow = dcols.data() + p * st.k;
          std::memset(drow, 0, st.k * sizeof(double));
          for (std::size_t c = 0; c < st.c_out; ++c)
            axpy(drow, dz[p * st.c_out + c], w.data.data() + c * st.k, st.k);
        }
        col2im_add(dcols.data(), st, da.row(b));
      }
    }
    g = std::move(da);
  }
  return grads;
}

}  // namespace

std::vector<Tensor> backward(const ConvMFModel& model, const Matrix& x, const FactorPair& upstream,
                             const ForwardCache& cache) {
  if (cache.batch != 1)
    throw std::invalid_argument("backward: cache must come from a batch-of-one forward");
  if (x.rows() != model.m || x.cols() != model.n)
    throw std::invalid_argument("backward: input shape mismatch");
  if (upstream.u.rows() != model.m || upstream.u.cols() != model.rank ||
      upstream.v.rows() != model.rank || upstream.v.cols() != model.n)
    throw std::invalid_argument("backward: upstream gradient shapes do not match the heads");
  Plan plan = make_plan(model.m, model.n, model.hyper);
  if (cache.u_z.empty() || cache.u_z.back().cols() != model.m * model.rank ||
      cache.v_z.back().cols() != model.rank * model.n)
    throw std::invalid_argument("backward: cached activations do not match the model");
  Matrix du(1, model.m * model.rank);
  Matrix dv(1, model.rank * model.n);
  std::memcpy(du.data(), upstream.u.data(), du.size() * sizeof(double));
  std::memcpy(dv.data(), upstream.v.data(), dv.size() * sizeof(double));
  return backward_batch(model, plan, du, dv, cache);
}

namespace {

struct SectionRef {
  enum Kind { Conv, Stem, ForkU, ForkV } kind;
  std::size_t layer;
  bool is_bias;
};

SectionRef locate_tensor(const Plan& plan, std::size_t tensor_index) {
  if (tensor_index < plan.stem_base)
    return {SectionRef::Conv, tensor_index / 2, tensor_index % 2 == 1};
  if (tensor_index < plan.u_base) {
    const std::size_t off = tensor_index - plan.stem_base;
    return {SectionRef::Stem, off / 2, off % 2 == 1};
  }
  if (tensor_index < plan.v_base) {
    const std::size_t off = tensor_index - plan.u_base;
    return {SectionRef::ForkU, off / 2, off % 2 == 1};
  }
  const std::size_t off = tensor_index - plan.v_base;
  return {SectionRef::ForkV, off / 2, off % 2 == 1};
}

// Finishes a perturbed evaluation whose effect starts at pre-activation z of
// stem layer `layer` (z has the perturbation already applied). Small layers
// only; returns the loss.
double finish_from_stem(const ConvMFModel& model, const Plan& plan, const Matrix& x,
                        std::vector<double> z, std::size_t layer) {
  const Activation act = model.hyper.activation;
  std::vector<double> a;
  for (std::size_t i = layer + 1; i < plan.stem.size(); ++i) {
    a = std::move(z);
    apply_activation(act, a.data(), a.size());
    z.assign(plan.stem[i], 0.0);
    linear_fwd(a.data(), 1, a.size(), weight_of(model, plan.stem_base, i).data.data(),
               bias_of(model, plan.stem_base, i).data.data(), plan.stem[i], z.data());
  }
  std::vector<double> fork = std::move(z);
  apply_activation(act, fork.data(), fork.size());
  auto head = [&](const std::vector<std::size_t>& dims, std::size_t base) {
    std::vector<double> h = fork;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i > 0) apply_activation(act, h.data(), h.size());
      std::vector<double> out(dims[i], 0.0);
      linear_fwd(h.data(), 1, h.size(), weight_of(model, base, i).data.data(),
                 bias_of(model, base, i).data.data(), dims[i], out.data());
      h = std::move(out);
    }
    return h;
  };
  std::vector<double> uflat = head(plan.fork_u, plan.u_base);
  std::vector<double> vflat = head(plan.fork_v, plan.v_base);
  return sample_sq_loss(x, uflat.data(), vflat.data(), plan.m, plan.n, plan.rank);
}

}  // namespace

std::vector<double> perturbed_losses(const ConvMFModel& model, const Matrix& x,
                                     const ForwardCache& cache,
                                     const std::vector<Perturbation>& perturbations) {
  if (cache.batch != 1)
    throw std::invalid_argument("perturbed_losses: cache must come from a batch-of-one forward");
  Plan plan = make_plan(model.m, model.n, model.hyper);
  const Activation act = model.hyper.activation;
  std::vector<double> losses(perturbations.size(), 0.0);

  // Conv-stage perturbations re-run the conv tail individually but share the
  // wide first linear across a batch, so the stem weights are streamed once
  // per kChunk evaluations instead of once per evaluation.
  constexpr std::size_t kChunk = 16;
  std::vector<std::size_t> conv_ids;

  for (std::size_t pi = 0; pi < perturbations.size(); ++pi) {
    const Perturbation& p = perturbations[pi];
    if (p.tensor_index >= model.params.size() ||
        p.element_index >= model.params[p.tensor_index].size())
      throw std::invalid_argument("perturbed_losses: tensor or element index out of range");
    SectionRef ref = locate_tensor(plan, p.tensor_index);
    if (ref.kind == SectionRef::Conv) {
      conv_ids.push_back(pi);
      continue;
    }
    if (ref.kind == SectionRef::Stem) {
      const Tensor& w = weight_of(model, plan.stem_base, ref.layer);
      std::vector<double> z(cache.stem_z[ref.layer].row(0),
                            cache.stem_z[ref.layer].row(0) + plan.stem[ref.layer]);
      if (ref.is_bias) {
        z[p.element_index] += p.delta;
      } else {
        const std::size_t in_w = w.dims[1];
        z[p.element_index / in_w] +=
            p.delta * cache.stem_in[ref.layer](0, p.element_index % in_w);
      }
      losses[pi] = finish_from_stem(model, plan, x, std::move(z), ref.layer);
      continue;
    }
    // fork head: rebuild this head only, the other comes from the cache
    const bool is_u = ref.kind == SectionRef::ForkU;
    const std::vector<std::size_t>& dims = is_u ? plan.fork_u : plan.fork_v;
    const std::size_t base = is_u ? plan.u_base : plan.v_base;
    const std::vector<Matrix>& head_in = is_u ? cache.u_in : cache.v_in;
    const std::vector<Matrix>& head_z = is_u ? cache.u_z : cache.v_z;
    std::vector<double> z(head_z[ref.layer].row(0), head_z[ref.layer].row(0) + dims[ref.layer]);
    if (ref.is_bias) {
      z[p.element_index] += p.delta;
    } else {
      const std::size_t in_w = weight_of(model, base, ref.layer).dims[1];
      z[p.element_index / in_w] += p.delta * head_in[ref.layer](0, p.element_index % in_w);
    }
    for (std::size_t i = ref.layer + 1; i < dims.size(); ++i) {
      apply_activation(act, z.data(), z.size());
      std::vector<double> out(dims[i], 0.0);
      linear_fwd(z.data(), 1, z.size(), weight_of(model, base, i).data.data(),
                 bias_of(model, base, i).data.data(), dims[i], out.data());
      z = std::move(out);
    }
    const double* uflat = is_u ? z.data() : cache.u_z.back().row(0);
    const double* vflat = is_u ? cache.v_z.back().row(0) : z.data();
    losses[pi] = sample_sq_loss(x, uflat, vflat, plan.m, plan.n, plan.rank);
  }

  // conv perturbations, in chunks sharing the batched linear tail
  std::vector<double> cols;
  for (std::size_t start = 0; start < conv_ids.size(); start += kChunk) {
    const std::size_t B = std::min(kChunk, conv_ids.size() - start);
    const std::size_t tail_width = plan.conv.empty() ? plan.m * plan.n : plan.flat;
    Matrix flat_batch(B, tail_width);
    for (std::size_t b = 0; b < B; ++b) {
      const Perturbation& p = perturbations[conv_ids[start + b]];
      SectionRef ref = locate_tensor(plan, p.tensor_index);
      const ConvStage& st = plan.conv[ref.layer];
      std::vector<double> z(cache.conv_z[ref.layer].row(0),
                            cache.conv_z[ref.layer].row(0) + cache.conv_z[ref.layer].cols());
      if (ref.is_bias) {
        const std::size_t oc = p.element_index;
        for (std::size_t pix = 0; pix < st.h_out * st.w_out; ++pix)
          z[pix * st.c_out + oc] += p.delta;
      } else {
        // weight element (oc, ky, kx, c): every output pixel of channel oc
        // picks up delta times its shifted input sample
        const std::size_t kk = st.spec.kernel;
        std::size_t rest = p.element_index;
        const std::size_t c = rest % st.c_in;
        rest /= st.c_in;
        const std::size_t kx = rest % kk;
        rest /= kk;
        const std::size_t ky = rest % kk;
        const std::size_t oc = rest / kk;
        const double* in = cache.conv_in[ref.layer].row(0);
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(st.spec.padding);
        for (std::size_t oy = 0; oy < st.h_out; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * st.spec.stride + ky * st.spec.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(st.h_in)) continue;
          for (std::size_t ox = 0; ox < st.w_out; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * st.spec.stride + kx * st.spec.dilation) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(st.w_in)) continue;
            z[(oy * st.w_out + ox) * st.c_out + oc] +=
                p.delta * in[(static_cast<std::size_t>(iy) * st.w_in +
                              static_cast<std::size_t>(ix)) * st.c_in + c];
          }
        }
      }
      // re-run the remaining conv stages
      apply_activation(act, z.data(), z.size());
      for (std::size_t s = ref.layer + 1; s < plan.conv.size(); ++s) {
        const ConvStage& nst = plan.conv[s];
        cols.resize(nst.h_out * nst.w_out * nst.k);
        im2col(z.data(), nst, cols.data());
        std::vector<double> zn(nst.h_out * nst.w_out * nst.c_out);
        conv_fwd_from_cols(cols.data(), nst, weight_of(model, 0, s).data.data(),
                           bias_of(model, 0, s).data.data(), zn.data());
        apply_activation(act, zn.data(), zn.size());
        z = std::move(zn);
      }
      std::memcpy(flat_batch.row(b), z.data(), tail_width * sizeof(double));
    }
    // batched linear tail: stem chain then both heads
    Matrix a = std::move(flat_batch);
    std::size_t width = tail_width;
    for (std::size_t i = 0; i < plan.stem.size(); ++i) {
      Matrix z(B, plan.stem[i]);
      linear_fwd(a.data(), B, width, weight_of(model, plan.stem_base, i).data.data(),
                 bias_of(model, plan.stem_base, i).data.data(), plan.stem[i], z.data());
      apply_activation(act, z.data(), z.size());
      a = std::move(z);
      width = plan.stem[i];
    }
    auto head = [&](const std::vector<std::size_t>& dims, std::size_t base) {
      Matrix h = a;
      std::size_t w = width;
      for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i > 0) apply_activation(act, h.data(), h.size());
        Matrix z(B, dims[i]);
        linear_fwd(h.data(), B, w, weight_of(model, base, i).data.data(),
                   bias_of(model, base, i).data.data(), dims[i], z.data());
        h = std::move(z);
        w = dims[i];
      }
      return h;
    };
    Matrix uflat = head(plan.fork_u, plan.u_base);
    Matrix vflat = head(plan.fork_v, plan.v_base);
    for (std::size_t b = 0; b < B; ++b)
      losses[conv_ids[start + b]] =
          sample_sq_loss(x, uflat.row(b), vflat.row(b), plan.m, plan.n, plan.rank);
  }
  return losses;
}

double perturbed_loss(const ConvMFModel& model, const Matrix& x, const ForwardCache& cache,
                      std::size_t tensor_index, std::size_t element_index, double delta) {
  return perturbed_losses(model, x, cache, {{tensor_index, element_index, delta}})[0];
}

// --- optimizers -----------------------------------------------------------

namespace {

void check_alignment(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer: gradient list does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads[i].size())
      throw std::invalid_argument("optimizer: gradient size mismatch on " + params[i].name);
}

void check_finite(const std::vector<Tensor>& grads) {
  for (const Tensor& g : grads)
    for (double v : g.data)
      if (!std::isfinite(v))
        throw std::runtime_error("optimizer: non-finite gradient in " + g.name);
}

void ensure_state(std::vector<Tensor>& slot, const std::vector<Tensor>& params) {
  if (!slot.empty()) return;
  slot.reserve(params.size());
  for (const Tensor& p : params) {
    Tensor t;
    t.name = p.name;
    t.dims = p.dims;
    t.data.assign(p.size(), 0.0);
    slot.push_back(std::move(t));
  }
}

}  // namespace

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double lr, double beta1, double beta2, double eps) {
  check_alignment(params, grads);
  check_finite(grads);
  ensure_state(state.first_moment, params);
  ensure_state(state.second_moment, params);
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step_count));
  for (std::size_t t = 0; t < params.size(); ++t) {
    double* p = params[t].data.data();
    double* mo = state.first_moment[t].data.data();
    double* vo = state.second_moment[t].data.data();
    const double* g = grads[t].data.data();
    const std::size_t count = params[t].size();
    for (std::size_t i = 0; i < count; ++i) {
      mo[i] = beta1 * mo[i] + (1.0 - beta1) * g[i];
      vo[i] = beta2 * vo[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= lr * (mo[i] / bc1) / (std::sqrt(vo[i] / bc2) + eps);
    }
  }
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimizerState& state,
              double lr) {
  check_alignment(params, grads);
  check_finite(grads);
  state.step_count += 1;
  for (std::size_t t = 0; t < params.size(); ++t) {
    double* p = params[t].data.data();
    const double* g = grads[t].data.data();
    for (std::size_t i = 0; i < params[t].size(); ++i) p[i] -= lr * g[i];
  }
}

void adagrad_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                  OptimizerState& state, double lr, double eps) {
  check_alignment(params, grads);
  check_finite(grads);
  ensure_state(state.second_moment, params);
  state.step_count += 1;
  for (std::size_t t = 0; t < params.size(); ++t) {
    double* p = params[t].data.data();
    double* acc = state.second_moment[t].data.data();
    const double* g = grads[t].data.data();
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      acc[i] += g[i] * g[i];
      p[i] -= lr * g[i] / (std::sqrt(acc[i]) + eps);
    }
  }
}

void optimizer_step(OptimizerKind kind, std::vector<Tensor>& params,
                    const std::vector<Tensor>& grads, OptimizerState& state, double lr) {
  switch (kind) {
    case OptimizerKind::Adam: adam_step(params, grads, state, lr); return;
    case OptimizerKind::Sgd: sgd_step(params, grads, state, lr); return;
    case OptimizerKind::Adagrad: adagrad_step(params, grads, state, lr); return;
  }
  throw std::invalid_argument("optimizer_step: bad optimizer enum");
}

// --- training -------------------------------------------------------------

namespace {

double eq7_loss(const Matrix& x, const double* uflat, const double* vflat, std::size_t m,
                std::size_t n, std::size_t r) {
  const double denom = x.squared_frobenius_norm();
  if (denom <= 0.0) throw std::invalid_argument("normalized loss: zero-norm frame");
  return sample_sq_loss(x, uflat, vflat, m, n, r) / denom;
}

double mean_validation_loss(const ConvMFModel& model, const Plan& plan,
                            const std::vector<const Matrix*>& frames, std::size_t batch_size,
                            ForwardCache& scratch) {
  double total = 0.0;
  for (std::size_t start = 0; start < frames.size(); start += batch_size) {
    const std::size_t B = std::min(batch_size, frames.size() - start);
    std::vector<const double*> xs(B);
    for (std::size_t b = 0; b < B; ++b) xs[b] = frames[start + b]->data();
    forward_batch(model, plan, xs.data(), B, scratch);
    for (std::size_t b = 0; b < B; ++b)
      total += eq7_loss(*frames[start + b], scratch.u_z.back().row(b), scratch.v_z.back().row(b),
                        plan.m, plan.n, plan.rank);
  }
  return total / static_cast<double>(frames.size());
}

// Smoothed-noise simulation frames appended to the training pool when the
// split requests augmentation; 25 frames per seeded run.
std::vector<Matrix> make_augment_frames(const TimeSeries& series, std::size_t count) {
  std::vector<Matrix> out;
  constexpr std::size_t kPerRun = 25;
  std::uint64_t seed = 1000;
  while (out.size() < count) {
    const std::size_t want = std::min(kPerRun, count - out.size());
    Matrix ic = init_random_smooth(series.grid, seed++, 4.0);
    TimeSeries aug = run(ic, series.grid, series.dt, want - 1, 1, "augment");
    for (std::size_t i = 0; i < want; ++i) out.push_back(std::move(aug.frames[i]));
  }
  return out;
}

}  // namespace

TrainReport train(ConvMFModel& model, const TimeSeries& series, const SplitSpec& split,
                  const Hyperparameters& hyper) {
  if (series.frames.empty()) throw std::invalid_argument("train: empty series");
  if (series.grid.nx != model.m || series.grid.nv != model.n)
    throw std::invalid_argument("train: series frames are " + std::to_string(series.grid.nx) +
                                "x" + std::to_string(series.grid.nv) + ", model expects " +
                                std::to_string(model.m) + "x" + std::to_string(model.n));
  if (hyper.rank != model.rank)
    throw std::invalid_argument("train: hyperparameter rank disagrees with the model");

  Plan plan = make_plan(model.m, model.n, model.hyper);
  SplitIndices idx = make_split(series.frames.size(), split);

  std::vector<const Matrix*> train_frames;
  for (std::size_t i : idx.train) train_frames.push_back(&series.frames[i]);
  std::vector<Matrix> augment;
  if (split.augment_random_ic) {
    const std::size_t extra = (idx.train.size() + 4) / 5;  // 20% of the training set
    augment = make_augment_frames(series, extra);
    for (const Matrix& f : augment) train_frames.push_back(&f);
  }
  std::vector<const Matrix*> val_frames;
  for (std::size_t i : idx.validation) val_frames.push_back(&series.frames[i]);

  TrainReport report;
  ForwardCache cache;
  report.validation_loss.push_back(
      mean_validation_loss(model, plan, val_frames, hyper.batch_size, cache));
  std::vector<Tensor> best_params = model.params;
  double best_val = report.validation_loss[0];
  report.best_epoch = 0;

  Rng shuffle_rng(hyper.seed ^ 0x8ad4f1d752d4ULL);
  OptimizerState opt_state;
  std::vector<std::size_t> order(train_frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const std::size_t mr = model.m * model.rank;
  const std::size_t rn = model.rank * model.n;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t B = std::min(hyper.batch_size, order.size() - start);
      std::vector<const double*> xs(B);
      for (std::size_t b = 0; b < B; ++b) xs[b] = train_frames[order[start + b]]->data();
      forward_batch(model, plan, xs.data(), B, cache);

      Matrix du(B, mr);
      Matrix dv(B, rn);
      const double scale = 2.0 / static_cast<double>(B);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const Matrix& x = *train_frames[order[start + b]];
        const double* uf = cache.u_z.back().row(b);
        const double* vf = cache.v_z.back().row(b);
        // residual R = U V - X drives both head gradients
        Matrix r(model.m, model.n);
        for (std::size_t i = 0; i < model.m; ++i) {
          const double* u = uf + i * model.rank;
          double* rrow = r.row(i);
          const double* xrow = x.row(i);
          for (std::size_t j = 0; j < model.n; ++j) {
            double recon = 0.0;
            for (std::size_t k = 0; k < model.rank; ++k) recon += u[k] * vf[k * model.n + j];
            rrow[j] = recon - xrow[j];
            batch_loss += rrow[j] * rrow[j];
          }
        }
        // dU = scale * R V^T, dV = scale * U^T R
        for (std::size_t i = 0; i < model.m; ++i)
          for (std::size_t k = 0; k < model.rank; ++k)
            du(b, i * model.rank + k) = scale * dot8(r.row(i), vf + k * model.n, model.n);
        double* dvrow = dv.row(b);
        std::memset(dvrow, 0, rn * sizeof(double));
        for (std::size_t i = 0; i < model.m; ++i)
          for (std::size_t k = 0; k < model.rank; ++k)
            axpy(dvrow + k * model.n, scale * uf[i * model.rank + k], r.row(i), model.n);
      }
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
      loss_sum += batch_loss;

      std::vector<Tensor> grads = backward_batch(model, plan, du, dv, cache);
      optimizer_step(hyper.optimizer, model.params, grads, opt_state, hyper.learning_rate);
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(train_frames.size()));

    const double val = mean_validation_loss(model, plan, val_frames, hyper.batch_size, cache);
    if (!std::isfinite(val))
      throw std::runtime_error("train: validation loss diverged at epoch " + std::to_string(epoch));
    report.validation_loss.push_back(val);
    if (val < best_val) {
      best_val = val;
      best_params = model.params;
      report.best_epoch = epoch;
    }
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  model.params = std::move(best_params);
  return report;
}

}  // namespace lrmf
