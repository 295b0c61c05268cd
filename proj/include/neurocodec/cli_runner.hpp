#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace neurocodec::cli {

// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// abort. Flags beat NEUROCODEC_* environment variables, which beat --config
// file entries, which beat built-in defaults.
int run_cli(int argc, const char* const* argv);

// argv-style convenience overload for tests.
int run_cli(const std::vector<std::string>& args);

}  // namespace neurocodec::cli
