#pragma once

#include <string>
#include <vector>

#include "paco/config.hpp"

namespace paco::cli {

// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
// invariant violation.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

void cmd_prepare(const RunConfig &cfg);
void cmd_train(const RunConfig &cfg);
void cmd_evaluate(const RunConfig &cfg, const std::string &baseline_path);

struct InspectOptions {
  int stencil = -1;            // restrict block report to one stencil
  std::string item;            // raw item id; empty: first items
  std::vector<std::string> pairs;  // "user:item" raw ids
};
void cmd_inspect(const RunConfig &cfg, const InspectOptions &opts);

// Full argv entry point; exceptions are mapped to exit codes.
int run(int argc, const char *const *argv);
int run(const std::vector<std::string> &args);  // convenience for tests

}  // namespace paco::cli
