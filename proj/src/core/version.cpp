#include "sdiff/version.hpp"

#ifndef SDIFF_CODE_VERSION
#define SDIFF_CODE_VERSION "unknown"
#endif

namespace sdiff {
std::string code_version() { return SDIFF_CODE_VERSION; }
}  // namespace sdiff
