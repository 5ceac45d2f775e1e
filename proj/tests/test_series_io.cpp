#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lrmf/format_error.hpp"
#include "lrmf/series_io.hpp"
#include "lrmf/vlasov.hpp"

using lrmf::Matrix;
using lrmf::TimeSeries;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
  }
  ~TempFile() { std::remove(path.c_str()); }
};

TimeSeries small_series() {
  lrmf::PhaseSpaceGrid g = lrmf::make_default_grid(16, 32);
  Matrix ic = lrmf::init_landau_strong(g);
  return lrmf::run(ic, g, 0.05, 6, 2, "landau_strong");
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

void dump(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("series round-trip is bit-exact") {
  TimeSeries s = small_series();
  TempFile tmp("series_roundtrip.vpts");
  lrmf::write_series(tmp.path, s);
  TimeSeries r = lrmf::read_series(tmp.path);

  REQUIRE(r.frames.size() == s.frames.size());
  CHECK(r.grid.nx == s.grid.nx);
  CHECK(r.grid.nv == s.grid.nv);
  CHECK(r.grid.x_min == s.grid.x_min);
  CHECK(r.grid.x_max == s.grid.x_max);
  CHECK(r.grid.v_min == s.grid.v_min);
  CHECK(r.grid.v_max == s.grid.v_max);
  CHECK(r.dt == s.dt);
  for (std::size_t t = 0; t < s.frames.size(); ++t)
    for (std::size_t i = 0; i < s.frames[t].size(); ++i)
      CHECK(r.frames[t].data()[i] == s.frames[t].data()[i]);
  for (std::size_t t = 0; t < s.field_energy.size(); ++t)
    CHECK(r.field_energy[t] == s.field_energy[t]);
}

TEST_CASE("rewriting a read series produces identical bytes") {
  TimeSeries s = small_series();
  TempFile a("series_bytes_a.vpts"), b("series_bytes_b.vpts");
  lrmf::write_series(a.path, s);
  lrmf::write_series(b.path, lrmf::read_series(a.path));
  CHECK(slurp(a.path) == slurp(b.path));
}

TEST_CASE("corrupted magic bytes raise a format error") {
  TimeSeries s = small_series();
  TempFile tmp("series_badmagic.vpts");
  lrmf::write_series(tmp.path, s);
  std::vector<char> bytes = slurp(tmp.path);
  bytes[0] = 'X';
  dump(tmp.path, bytes);
  CHECK_THROWS_AS((void)lrmf::read_series(tmp.path), lrmf::FormatError);
}

TEST_CASE("unsupported version raises a format error") {
  TimeSeries s = small_series();
  TempFile tmp("series_badversion.vpts");
  lrmf::write_series(tmp.path, s);
  std::vector<char> bytes = slurp(tmp.path);
  bytes[4] = 9;
  dump(tmp.path, bytes);
  CHECK_THROWS_AS((void)lrmf::read_series(tmp.path), lrmf::FormatError);
}

TEST_CASE("truncated payload raises a format error") {
  TimeSeries s = small_series();
  TempFile tmp("series_truncated.vpts");
  lrmf::write_series(tmp.path, s);
  std::vector<char> bytes = slurp(tmp.path);
  bytes.resize(bytes.size() - 17);
  dump(tmp.path, bytes);
  CHECK_THROWS_AS((void)lrmf::read_series(tmp.path), lrmf::FormatError);
}

TEST_CASE("header that promises an absurd payload raises a format error") {
  TimeSeries s = small_series();
  TempFile tmp("series_wildheader.vpts");
  lrmf::write_series(tmp.path, s);
  std::vector<char> bytes = slurp(tmp.path);
  bytes[16] = static_cast<char>(0xff);  // frame_count low byte
  bytes[17] = static_cast<char>(0xff);
  bytes[18] = static_cast<char>(0xff);
  bytes[19] = static_cast<char>(0x7f);
  dump(tmp.path, bytes);
  CHECK_THROWS_AS((void)lrmf::read_series(tmp.path), lrmf::FormatError);
}

TEST_CASE("missing file raises a runtime error") {
  CHECK_THROWS_AS((void)lrmf::read_series("/nonexistent/dir/nothing.vpts"), std::runtime_error);
}

TEST_CASE("header fields reflect grid and frame count") {
  TimeSeries s = small_series();
  TempFile tmp("series_header.vpts");
  lrmf::write_series(tmp.path, s);
  std::vector<char> bytes = slurp(tmp.path);
  auto u32at = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + b])) << (8 * b);
    return v;
  };
  CHECK(bytes[0] == 'V');
  CHECK(bytes[1] == 'P');
  CHECK(bytes[2] == 'T');
  CHECK(bytes[3] == 'S');
  CHECK(u32at(4) == 1u);
  CHECK(u32at(8) == s.grid.nx);
  CHECK(u32at(12) == s.grid.nv);
  CHECK(u32at(16) == s.frames.size());
  const std::size_t expected =
      4 + 16 + 40 + s.frames.size() * (s.grid.nx * s.grid.nv + 1) * 8;
  CHECK(bytes.size() == expected);
}

TEST_CASE("write_series validates its input") {
  TimeSeries s = small_series();
  TempFile tmp("series_invalid.vpts");
  TimeSeries empty;
  empty.grid = s.grid;
  CHECK_THROWS_AS(lrmf::write_series(tmp.path, empty), std::invalid_argument);
  TimeSeries mismatched = s;
  mismatched.field_energy.pop_back();
  CHECK_THROWS_AS(lrmf::write_series(tmp.path, mismatched), std::invalid_argument);
}
