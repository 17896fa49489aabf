#pragma once

#include <stdexcept>
#include <string>

namespace paco {

// Invalid or inconsistent user-supplied configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string &msg) : std::runtime_error(msg) {}
};

// Unreadable, malformed, or mismatched input data / files.
struct DataError : std::runtime_error {
  explicit DataError(const std::string &msg) : std::runtime_error(msg) {}
};

// A violated internal invariant; indicates a bug, not bad input.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string &msg) : std::logic_error(msg) {}
};

#define PACO_CHECK(cond, msg)                                               \
  do {                                                                      \
    if (!(cond)) throw ::paco::InternalError(std::string("invariant: ") + (msg)); \
  } while (0)

#ifdef NDEBUG
#define PACO_DCHECK(cond, msg) ((void)0)
#else
#define PACO_DCHECK(cond, msg) PACO_CHECK(cond, msg)
#endif

}  // namespace paco
