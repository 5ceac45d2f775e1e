#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrmf/convmf.hpp"
#include "lrmf/format_error.hpp"

namespace lrmf {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

void put_f64(std::string& buf, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  for (int b = 0; b < 8; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t count, const char* what) {
    if (bytes.size() - pos < count)
      throw FormatError("load_checkpoint: truncated file while reading " + std::string(what));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * b);
    return v;
  }
  double f64() {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * b);
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t count, const char* what) {
    need(count, what);
    std::string s(reinterpret_cast<const char*>(bytes.data()) + pos, count);
    pos += count;
    return s;
  }
};

std::vector<std::uint64_t> parse_u64_list(const std::string& text, char sep,
                                          const std::string& what) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(sep, pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    if (item.empty() || item.size() > 19 ||
        item.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("config: " + what + " has a malformed entry: '" + item + "'");
    out.push_back(std::stoull(item));
    pos = end + 1;
  }
  return out;
}

std::string join_u64(const std::vector<std::uint64_t>& values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out.push_back(sep);
    out += std::to_string(values[i]);
  }
  return out;
}

constexpr const char* kSection = "hyperparameters";

}  // namespace

void hyper_to_config(const Hyperparameters& hyper, ConfigText& cfg) {
  cfg.set(kSection, "activation", activation_name(hyper.activation));
  cfg.set(kSection, "optimizer", optimizer_name(hyper.optimizer));
  cfg.set_double(kSection, "learning_rate", hyper.learning_rate);
  std::string conv;
  for (std::size_t i = 0; i < hyper.conv_layers.size(); ++i) {
    const ConvLayerSpec& c = hyper.conv_layers[i];
    if (i > 0) conv.push_back(',');
    conv += join_u64({c.kernel, c.stride, c.padding, c.dilation, c.out_channels}, ':');
  }
  cfg.set(kSection, "conv_layers", conv);
  cfg.set(kSection, "stem_dims",
          join_u64({hyper.stem_dims.begin(), hyper.stem_dims.end()}, ','));
  cfg.set(kSection, "fork_dims",
          join_u64({hyper.fork_dims.begin(), hyper.fork_dims.end()}, ','));
  cfg.set_u64(kSection, "rank", hyper.rank);
  cfg.set_u64(kSection, "epochs", hyper.epochs);
  cfg.set_u64(kSection, "batch_size", hyper.batch_size);
  cfg.set_u64(kSection, "seed", hyper.seed);
  cfg.set_bool(kSection, "extension", hyper.extension);
}

Hyperparameters hyper_from_config(const ConfigText& cfg) {
  const ConfigText::Section* sec = cfg.find_section(kSection);
  if (!sec) throw FormatError("config: missing [hyperparameters] section");
  for (const ConfigText::Entry& e : sec->entries) {
    static const char* known[] = {"activation", "optimizer",  "learning_rate", "conv_layers",
                                  "stem_dims",  "fork_dims",  "rank",          "epochs",
                                  "batch_size", "seed",       "extension"};
    bool ok = false;
    for (const char* k : known) ok = ok || e.key == k;
    if (!ok) throw FormatError("config: unknown hyperparameter key '" + e.key + "'");
  }

  Hyperparameters hyper;
  try {
    hyper.activation = activation_from_name(cfg.require(kSection, "activation"));
    hyper.optimizer = optimizer_from_name(cfg.require(kSection, "optimizer"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  hyper.learning_rate = cfg.get_double(kSection, "learning_rate");
  hyper.conv_layers.clear();
  const std::string& conv = cfg.require(kSection, "conv_layers");
  std::size_t pos = 0;
  while (!conv.empty() && pos <= conv.size()) {
    std::size_t end = conv.find(',', pos);
    if (end == std::string::npos) end = conv.size();
    std::vector<std::uint64_t> q = parse_u64_list(conv.substr(pos, end - pos), ':', "conv_layers");
    if (q.size() != 5)
      throw FormatError("config: conv_layers entries need kernel:stride:padding:dilation:channels");
    hyper.conv_layers.push_back({q[0], q[1], q[2], q[3], q[4]});
    pos = end + 1;
  }
  hyper.stem_dims.clear();
  const std::string& stem = cfg.require(kSection, "stem_dims");
  if (!stem.empty())
    for (std::uint64_t d : parse_u64_list(stem, ',', "stem_dims")) hyper.stem_dims.push_back(d);
  hyper.fork_dims.clear();
  const std::string& fork = cfg.require(kSection, "fork_dims");
  if (!fork.empty())
    for (std::uint64_t d : parse_u64_list(fork, ',', "fork_dims")) hyper.fork_dims.push_back(d);
  hyper.rank = cfg.get_u64(kSection, "rank");
  hyper.epochs = cfg.get_u64(kSection, "epochs");
  hyper.batch_size = cfg.get_u64(kSection, "batch_size");
  hyper.seed = cfg.get_u64(kSection, "seed");
  hyper.extension = cfg.get_bool(kSection, "extension");
  return hyper;
}

void save_checkpoint(const std::string& path, const ConvMFModel& model) {
  std::string buf;
  buf += "CMF1";
  put_u32(buf, 1u);
  put_u32(buf, static_cast<std::uint32_t>(model.m));
  put_u32(buf, static_cast<std::uint32_t>(model.n));
  put_u32(buf, static_cast<std::uint32_t>(model.rank));
  put_u32(buf, static_cast<std::uint32_t>(model.params.size()));
  for (const Tensor& t : model.params) {
    put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    put_u32(buf, static_cast<std::uint32_t>(t.dims.size()));
    for (std::size_t d : t.dims) put_u32(buf, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_f64(buf, v);
  }
  ConfigText cfg;
  hyper_to_config(model.hyper, cfg);
  const std::string text = cfg.serialize();
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ConvMFModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || !(bytes[0] == 'C' && bytes[1] == 'M' && bytes[2] == 'F' &&
                            bytes[3] == '1'))
    throw FormatError("load_checkpoint: bad magic bytes (expected CMF1)");
  Reader r{bytes, 4};
  const std::uint32_t version = r.u32("version");
  if (version != 1)
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(version));

  ConvMFModel model;
  model.m = r.u32("dimensions");
  model.n = r.u32("dimensions");
  model.rank = r.u32("dimensions");
  const std::uint32_t tensor_count = r.u32("tensor count");
  if (model.m == 0 || model.n == 0 || model.rank == 0)
    throw FormatError("load_checkpoint: zero dimension in header");

  model.params.reserve(tensor_count);
  for (std::uint32_t t = 0; t < tensor_count; ++t) {
    Tensor tensor;
    const std::uint32_t name_len = r.u32("tensor name length");
    tensor.name = r.str(name_len, "tensor name");
    const std::uint32_t ndims = r.u32("tensor dim count");
    if (ndims > 8) throw FormatError("load_checkpoint: implausible tensor dim count");
    std::size_t count = 1;
    constexpr std::size_t kMaxElements = std::size_t{1} << 36;
    for (std::uint32_t d = 0; d < ndims; ++d) {
      tensor.dims.push_back(r.u32("tensor dims"));
      const std::size_t dim = tensor.dims.back();
      if (dim == 0 || count > kMaxElements / dim)
        throw FormatError("load_checkpoint: implausible shape for tensor '" + tensor.name + "'");
      count *= dim;
    }
    // size check before the allocation so a corrupt count fails cleanly
    r.need(count * 8, ("data of " + tensor.name).c_str());
    tensor.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) tensor.data[i] = r.f64();
    model.params.push_back(std::move(tensor));
  }

  const std::uint32_t text_len = r.u32("hyperparameter block length");
  const std::string text = r.str(text_len, "hyperparameter block");
  if (r.pos != bytes.size())
    throw FormatError("load_checkpoint: " + std::to_string(bytes.size() - r.pos) +
                      " trailing bytes after the hyperparameter block");
  model.hyper = hyper_from_config(ConfigText::parse(text));
  if (model.hyper.rank != model.rank)
    throw FormatError("load_checkpoint: hyperparameter rank " +
                      std::to_string(model.hyper.rank) + " conflicts with header rank " +
                      std::to_string(model.rank));

  std::vector<Tensor> expected;
  try {
    expected = make_parameter_tensors(model.m, model.n, model.hyper);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("load_checkpoint: hyperparameters describe an invalid "
                                  "architecture: ") + e.what());
  }
  if (expected.size() != model.params.size())
    throw FormatError("load_checkpoint: file has " + std::to_string(model.params.size()) +
                      " tensors, architecture defines " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (model.params[i].name != expected[i].name || model.params[i].dims != expected[i].dims)
      throw FormatError("load_checkpoint: tensor " + std::to_string(i) + " is '" +
                        model.params[i].name + "', architecture defines '" + expected[i].name +
                        "'");
  }
  return model;
}

}  // namespace lrmf
