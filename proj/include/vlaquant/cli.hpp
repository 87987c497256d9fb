#pragma once

#include <string>
#include <vector>

namespace vlaq {

// Exit codes: 0 success, 1 usage error, 2 data or quantization error.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace vlaq
