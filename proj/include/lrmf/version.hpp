#ifndef LRMF_VERSION_HPP
#define LRMF_VERSION_HPP

namespace lrmf {

inline constexpr const char* kVersionString = "0.1.0";

}  // namespace lrmf

#endif
