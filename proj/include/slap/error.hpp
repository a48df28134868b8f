#pragma once

#include <stdexcept>
#include <string>

namespace slap {

// One exception type for the whole library; `kind` maps to CLI exit codes
// (data/config/io -> 2, numeric -> 3).
class Error : public std::runtime_error {
public:
    enum class Kind { data, config, io, numeric };

    Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

    static Error data(const std::string& what) { return Error(Kind::data, what); }
    static Error config(const std::string& what) { return Error(Kind::config, what); }
    static Error io(const std::string& what) { return Error(Kind::io, what); }
    static Error numeric(const std::string& what) { return Error(Kind::numeric, what); }

private:
    Kind kind_;
};

} // namespace slap
