#pragma once

#include <string>

#include "lrmf/vlasov.hpp"

namespace lrmf {

// Binary time-series container. Layout, with no padding anywhere:
//   "VPTS" | u32 version=1 | u32 nx | u32 nv | u32 frame_count
//   | f64 dt_between_frames | f64 x_min | f64 x_max | f64 v_min | f64 v_max
//   | frame_count * (nx*nv f64, row-major) | frame_count * f64 field energy
// All integers and doubles little-endian. Round-trips are bit-exact.
void write_series(const std::string& path, const TimeSeries& series);

// Throws FormatError on bad magic, unsupported version, or a file whose size
// disagrees with its header; std::runtime_error on I/O failure.
TimeSeries read_series(const std::string& path);

}  // namespace lrmf
