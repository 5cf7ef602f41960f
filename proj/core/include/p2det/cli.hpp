#pragma once

namespace p2det {

/// Full subcommand dispatch (gen-data | train | predict | eval | assign |
/// gradcheck | bench). Returns the process exit code: 0 success, 2 usage or
/// config error, 3 numerical abort, 4 I/O error.
int run_cli(int argc, const char* const* argv);

}  // namespace p2det
