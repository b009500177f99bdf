#pragma once
#include <string>

namespace sdiff {
/// Project version plus the git revision seen at configure time ("+dirty" if modified).
std::string code_version();
}  // namespace sdiff
