#include "lrmf/series_io.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

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

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * b);
    return v;
  }
  double f64() {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * b);
    return std::bit_cast<double>(v);
  }
};

constexpr std::size_t kHeaderBytes = 4 + 4 * 4 + 8 * 5;

}  // namespace

void write_series(const std::string& path, const TimeSeries& series) {
  if (series.frames.empty()) throw std::invalid_argument("write_series: no frames");
  if (series.field_energy.size() != series.frames.size())
    throw std::invalid_argument("write_series: field energy count does not match frames");
  const PhaseSpaceGrid& g = series.grid;
  for (const Matrix& f : series.frames)
    if (f.rows() != g.nx || f.cols() != g.nv)
      throw std::invalid_argument("write_series: frame shape does not match grid");

  std::string buf;
  buf.reserve(kHeaderBytes + series.frames.size() * (g.nx * g.nv + 1) * 8);
  buf += "VPTS";
  put_u32(buf, 1u);
  put_u32(buf, static_cast<std::uint32_t>(g.nx));
  put_u32(buf, static_cast<std::uint32_t>(g.nv));
  put_u32(buf, static_cast<std::uint32_t>(series.frames.size()));
  put_f64(buf, series.dt);
  put_f64(buf, g.x_min);
  put_f64(buf, g.x_max);
  put_f64(buf, g.v_min);
  put_f64(buf, g.v_max);
  for (const Matrix& f : series.frames)
    for (std::size_t i = 0; i < f.size(); ++i) put_f64(buf, f.data()[i]);
  for (double e : series.field_energy) put_f64(buf, e);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_series: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write_series: write failed for " + path);
}

TimeSeries read_series(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_series: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderBytes)
    throw FormatError("read_series: file shorter than the fixed header (" +
                      std::to_string(bytes.size()) + " bytes)");
  if (!(bytes[0] == 'V' && bytes[1] == 'P' && bytes[2] == 'T' && bytes[3] == 'S'))
    throw FormatError("read_series: bad magic bytes (expected VPTS)");

  Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw FormatError("read_series: unsupported version " + std::to_string(version));
  const std::uint32_t nx = r.u32();
  const std::uint32_t nv = r.u32();
  const std::uint32_t frames = r.u32();
  if (nx == 0 || nv == 0) throw FormatError("read_series: zero grid dimension in header");
  if (frames == 0) throw FormatError("read_series: zero frame count in header");

  // Validate the byte budget before touching the payload so corrupt headers
  // fail cleanly instead of over-allocating.
  const std::size_t expected =
      kHeaderBytes +
      static_cast<std::size_t>(frames) *
          (static_cast<std::size_t>(nx) * static_cast<std::size_t>(nv) + 1) * 8;
  if (bytes.size() != expected)
    throw FormatError("read_series: file size " + std::to_string(bytes.size()) +
                      " does not match header (expected " + std::to_string(expected) + ")");

  TimeSeries s;
  s.grid.nx = nx;
  s.grid.nv = nv;
  s.dt = r.f64();
  s.grid.x_min = r.f64();
  s.grid.x_max = r.f64();
  s.grid.v_min = r.f64();
  s.grid.v_max = r.f64();
  s.frames.reserve(frames);
  for (std::uint32_t t = 0; t < frames; ++t) {
    Matrix f(nx, nv);
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] = r.f64();
    s.frames.push_back(std::move(f));
  }
  s.field_energy.resize(frames);
  for (std::uint32_t t = 0; t < frames; ++t) s.field_energy[t] = r.f64();
  return s;
}

}  // namespace lrmf
