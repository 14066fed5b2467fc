// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xmoe {

// Error category, mapped onto process exit codes at the C API boundary:
// config -> 2, runtime -> 3, check -> 4.
enum class ErrorKind { config, runtime, check };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    static Error config(const std::string& msg) { return Error(ErrorKind::config, msg); }
    static Error runtime(const std::string& msg) { return Error(ErrorKind::runtime, msg); }
    static Error check(const std::string& msg) { return Error(ErrorKind::check, msg); }

private:
    ErrorKind kind_;
};

}  // namespace xmoe
