// Python bindings for the core operations: simulation, series I/O, SVD
// baselines, network training and inference, and held-out evaluation.
// Matrices cross the boundary as numpy float64 arrays (copied both ways, so
// python code can never alias internal buffers).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "lrmf/convmf.hpp"
#include "lrmf/evalbench.hpp"
#include "lrmf/linalg.hpp"
#include "lrmf/matrix.hpp"
#include "lrmf/series_io.hpp"
#include "lrmf/split.hpp"
#include "lrmf/version.hpp"
#include "lrmf/vlasov.hpp"

namespace py = pybind11;
using namespace lrmf;

namespace pybind11 {
namespace detail {

template <>
struct type_caster<Matrix> {
  PYBIND11_TYPE_CASTER(Matrix, const_name("numpy.ndarray"));

  bool load(handle src, bool) {
    auto arr = array_t<double, array::c_style | array::forcecast>::ensure(src);
    if (!arr || arr.ndim() != 2) return false;
    value = Matrix(static_cast<std::size_t>(arr.shape(0)),
                   static_cast<std::size_t>(arr.shape(1)));
    std::memcpy(value.data(), arr.data(), sizeof(double) * value.size());
    return true;
  }

  static handle cast(const Matrix& m, return_value_policy, handle) {
    array_t<double> out({m.rows(), m.cols()});
    std::memcpy(out.mutable_data(), m.data(), sizeof(double) * m.size());
    return out.release();
  }
};

// (U, V) pairs appear in python as 2-tuples of arrays.
template <>
struct type_caster<FactorPair> {
  PYBIND11_TYPE_CASTER(FactorPair, const_name("tuple[numpy.ndarray, numpy.ndarray]"));

  bool load(handle src, bool convert) {
    if (!isinstance<sequence>(src)) return false;
    auto seq = reinterpret_borrow<sequence>(src);
    if (seq.size() != 2) return false;
    type_caster<Matrix> u, v;
    if (!u.load(seq[0], convert) || !v.load(seq[1], convert)) return false;
    value.u = cast_op<Matrix&&>(std::move(u));
    value.v = cast_op<Matrix&&>(std::move(v));
    return true;
  }

  static handle cast(const FactorPair& fp, return_value_policy policy, handle parent) {
    return make_tuple(type_caster<Matrix>::cast(fp.u, policy, parent),
                      type_caster<Matrix>::cast(fp.v, policy, parent))
        .release();
  }
};

}  // namespace detail
}  // namespace pybind11

namespace {

std::vector<const ConvMFModel*> as_model_pointers(const std::vector<ConvMFModel*>& models) {
  return {models.begin(), models.end()};
}

py::tuple calculated_tuple(const CalculatedFactor& cf) {
  return py::make_tuple(cf.optimizer, cf.scaled_loss, cf.min_norm);
}

}  // namespace

PYBIND11_MODULE(_lrmf, m) {
  m.doc() = "Kinetic phase-space simulation, low-rank factorization, and evaluation";
  m.attr("__version__") = kVersionString;

  py::class_<PhaseSpaceGrid>(m, "PhaseSpaceGrid")
      .def(py::init<>())
      .def_readwrite("nx", &PhaseSpaceGrid::nx)
      .def_readwrite("nv", &PhaseSpaceGrid::nv)
      .def_readwrite("x_min", &PhaseSpaceGrid::x_min)
      .def_readwrite("x_max", &PhaseSpaceGrid::x_max)
      .def_readwrite("v_min", &PhaseSpaceGrid::v_min)
      .def_readwrite("v_max", &PhaseSpaceGrid::v_max)
      .def("dx", &PhaseSpaceGrid::dx)
      .def("dv", &PhaseSpaceGrid::dv)
      .def("validate", &PhaseSpaceGrid::validate);

  m.def("make_default_grid", &make_default_grid, py::arg("nx"), py::arg("nv"));
  m.def("init_landau_strong", &init_landau_strong, py::arg("grid"), py::arg("alpha") = 0.5,
        py::arg("k") = 0.5);
  m.def("init_two_stream", &init_two_stream, py::arg("grid"), py::arg("alpha") = 0.05,
        py::arg("k") = 0.5, py::arg("v0") = 2.4);
  m.def("init_random_smooth", &init_random_smooth, py::arg("grid"), py::arg("seed"),
        py::arg("smooth_scale"));

  py::class_<TimeSeries>(m, "TimeSeries")
      .def(py::init<>())
      .def_readwrite("grid", &TimeSeries::grid)
      .def_readwrite("dt", &TimeSeries::dt)
      .def_readwrite("frames", &TimeSeries::frames)
      .def_readwrite("ic_name", &TimeSeries::ic_name)
      .def_readwrite("field_energy", &TimeSeries::field_energy);

  m.def("run", &run, py::arg("ic"), py::arg("grid"), py::arg("dt"), py::arg("steps"),
        py::arg("record_every"), py::arg("ic_name") = "custom",
        py::call_guard<py::gil_scoped_release>());
  m.def("total_mass", &total_mass, py::arg("f"), py::arg("grid"));
  m.def("write_series", &write_series, py::arg("path"), py::arg("series"));
  m.def("read_series", &read_series, py::arg("path"));

  py::class_<SvdResult>(m, "SvdResult")
      .def_readonly("left", &SvdResult::left)
      .def_readonly("singular_values", &SvdResult::singular_values)
      .def_readonly("right", &SvdResult::right)
      .def("reconstruction", &SvdResult::reconstruction)
      .def("truncated", &SvdResult::truncated, py::arg("r"))
      .def("factor_pair", &SvdResult::factor_pair);

  m.def("svd_dense", &svd_dense, py::arg("x"), py::call_guard<py::gil_scoped_release>());
  m.def("svd_truncated", &svd_truncated, py::arg("x"), py::arg("r"), py::arg("tol") = 1e-10,
        py::call_guard<py::gil_scoped_release>());
  m.def(
      "lstsq", [](const Matrix& a, const Matrix& b) { return lstsq(a, b); }, py::arg("a"),
      py::arg("b"));
  m.def("best_rank_error", &best_rank_error, py::arg("singular_values"), py::arg("r"),
        py::arg("x_norm"));
  m.def("normalized_loss", &normalized_loss, py::arg("x"), py::arg("u"), py::arg("v"));

  py::enum_<SplitMode>(m, "SplitMode")
      .value("random", SplitMode::Random)
      .value("sequential", SplitMode::Sequential);

  py::class_<SplitSpec>(m, "SplitSpec")
      .def(py::init([](SplitMode mode, double train_fraction, std::uint64_t seed,
                       bool augment_random_ic) {
             SplitSpec spec;
             spec.mode = mode;
             spec.train_fraction = train_fraction;
             spec.seed = seed;
             spec.augment_random_ic = augment_random_ic;
             return spec;
           }),
           py::arg("mode") = SplitMode::Random, py::arg("train_fraction") = 0.7,
           py::arg("seed") = 0, py::arg("augment_random_ic") = false)
      .def_readwrite("mode", &SplitSpec::mode)
      .def_readwrite("train_fraction", &SplitSpec::train_fraction)
      .def_readwrite("seed", &SplitSpec::seed)
      .def_readwrite("augment_random_ic", &SplitSpec::augment_random_ic);

  py::class_<SplitIndices>(m, "SplitIndices")
      .def_readonly("train", &SplitIndices::train)
      .def_readonly("validation", &SplitIndices::validation)
      .def_readonly("test", &SplitIndices::test);

  m.def("make_split", &make_split, py::arg("frame_count"), py::arg("spec"));

  py::enum_<Activation>(m, "Activation")
      .value("tanh", Activation::Tanh)
      .value("relu", Activation::Relu)
      .value("leakyrelu", Activation::LeakyRelu)
      .value("sigmoid", Activation::Sigmoid);

  py::enum_<OptimizerKind>(m, "Optimizer")
      .value("adam", OptimizerKind::Adam)
      .value("sgd", OptimizerKind::Sgd)
      .value("adagrad", OptimizerKind::Adagrad);

  py::class_<ConvLayerSpec>(m, "ConvLayerSpec")
      .def(py::init([](std::size_t kernel, std::size_t stride, std::size_t padding,
                       std::size_t dilation, std::size_t out_channels) {
             return ConvLayerSpec{kernel, stride, padding, dilation, out_channels};
           }),
           py::arg("kernel") = 3, py::arg("stride") = 1, py::arg("padding") = 0,
           py::arg("dilation") = 1, py::arg("out_channels") = 8)
      .def_readwrite("kernel", &ConvLayerSpec::kernel)
      .def_readwrite("stride", &ConvLayerSpec::stride)
      .def_readwrite("padding", &ConvLayerSpec::padding)
      .def_readwrite("dilation", &ConvLayerSpec::dilation)
      .def_readwrite("out_channels", &ConvLayerSpec::out_channels);

  py::class_<Hyperparameters>(m, "Hyperparameters")
      .def(py::init<>())
      .def_readwrite("activation", &Hyperparameters::activation)
      .def_readwrite("optimizer", &Hyperparameters::optimizer)
      .def_readwrite("learning_rate", &Hyperparameters::learning_rate)
      .def_readwrite("conv_layers", &Hyperparameters::conv_layers)
      .def_readwrite("stem_dims", &Hyperparameters::stem_dims)
      .def_readwrite("fork_dims", &Hyperparameters::fork_dims)
      .def_readwrite("rank", &Hyperparameters::rank)
      .def_readwrite("epochs", &Hyperparameters::epochs)
      .def_readwrite("batch_size", &Hyperparameters::batch_size)
      .def_readwrite("seed", &Hyperparameters::seed)
      .def_readwrite("extension", &Hyperparameters::extension)
      .def("validate", &Hyperparameters::validate, py::arg("m"), py::arg("n"));

  py::class_<ConvMFModel>(m, "ConvMFModel")
      .def_readonly("m", &ConvMFModel::m)
      .def_readonly("n", &ConvMFModel::n)
      .def_readonly("rank", &ConvMFModel::rank)
      .def_readonly("hyper", &ConvMFModel::hyper)
      .def("parameter_count", &ConvMFModel::parameter_count);

  m.def("build_convmf", &build_convmf, py::arg("m"), py::arg("n"), py::arg("hyper"));

  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("train_loss", &TrainReport::train_loss)
      .def_readonly("validation_loss", &TrainReport::validation_loss)
      .def_readonly("epoch_seconds", &TrainReport::epoch_seconds)
      .def_readonly("best_epoch", &TrainReport::best_epoch);

  m.def("train", &train, py::arg("model"), py::arg("series"), py::arg("split"),
        py::arg("hyper"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "forward", [](const ConvMFModel& model, const Matrix& x) { return forward(model, x); },
      py::arg("model"), py::arg("x"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("model"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::enum_<EvalMethod>(m, "EvalMethod")
      .value("convmf", EvalMethod::ConvMF)
      .value("svd_basic", EvalMethod::SvdBasic)
      .value("svd_faster", EvalMethod::SvdFaster)
      .value("calc_u", EvalMethod::CalcU)
      .value("calc_v", EvalMethod::CalcV)
      .value("calc_sigma", EvalMethod::CalcSigma);

  py::class_<EvalRecord>(m, "EvalRecord")
      .def_readonly("frame_index", &EvalRecord::frame_index)
      .def_readonly("rank", &EvalRecord::rank)
      .def_readonly("method", &EvalRecord::method)
      .def_readonly("scaled_loss", &EvalRecord::scaled_loss)
      .def_readonly("wall_time_ns", &EvalRecord::wall_time_ns)
      .def_readonly("min_norm", &EvalRecord::min_norm)
      .def_readonly("timing_batch", &EvalRecord::timing_batch);

  // each returns (solved factor, scaled loss, hit_min_norm)
  m.def(
      "calculated_u",
      [](const Matrix& x, const Matrix& v) { return calculated_tuple(calculated_u(x, v)); },
      py::arg("x"), py::arg("v"));
  m.def(
      "calculated_v",
      [](const Matrix& x, const Matrix& u) { return calculated_tuple(calculated_v(x, u)); },
      py::arg("x"), py::arg("u"));
  m.def(
      "calculated_sigma",
      [](const Matrix& x, const Matrix& u, const Matrix& v) {
        return calculated_tuple(calculated_sigma(x, u, v));
      },
      py::arg("x"), py::arg("u"), py::arg("v"));

  m.def(
      "rank_sweep",
      [](const TimeSeries& series, const SplitSpec& split, const std::vector<std::size_t>& ranks,
         const std::vector<EvalMethod>& methods, const std::vector<ConvMFModel*>& models) {
        return rank_sweep(series, split, ranks, methods, as_model_pointers(models));
      },
      py::arg("series"), py::arg("split"), py::arg("ranks"), py::arg("methods"),
      py::arg("models") = std::vector<ConvMFModel*>{});
  m.def("mean_loss", &mean_loss, py::arg("records"), py::arg("rank"), py::arg("method"));
}
