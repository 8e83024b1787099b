#pragma once

#include <stdexcept>
#include <string>

namespace lkd {

/// Coarse classification used by the CLI to pick an exit code.
enum class ErrorKind {
  kUsage,       // exit 1
  kData,        // exit 2: malformed input, format, lookup, conformance
  kNumeric,     // exit 3
  kContract,    // programming-contract violations (reported as data errors)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LKD_DEFINE_ERROR(Name, Kind, prefix)                                   \
  class Name : public Error {                                                  \
   public:                                                                     \
    explicit Name(const std::string& what) : Error(Kind, prefix + what) {}     \
  };

LKD_DEFINE_ERROR(ConformanceError, ErrorKind::kData, std::string("conformance error: "))
LKD_DEFINE_ERROR(ParameterError, ErrorKind::kData, std::string("parameter error: "))
LKD_DEFINE_ERROR(IndexError, ErrorKind::kData, std::string("index error: "))
LKD_DEFINE_ERROR(LookupError, ErrorKind::kData, std::string("lookup error: "))
LKD_DEFINE_ERROR(FormatError, ErrorKind::kData, std::string("format error: "))
LKD_DEFINE_ERROR(VersionError, ErrorKind::kData, std::string("version error: "))
LKD_DEFINE_ERROR(DegenerateInputError, ErrorKind::kData, std::string("degenerate input: "))
LKD_DEFINE_ERROR(StateError, ErrorKind::kData, std::string("state error: "))
LKD_DEFINE_ERROR(IoError, ErrorKind::kData, std::string("i/o error: "))
LKD_DEFINE_ERROR(JudgeError, ErrorKind::kData, std::string("judge error: "))
LKD_DEFINE_ERROR(UndefinedCorrelationError, ErrorKind::kData, std::string("undefined correlation: "))
LKD_DEFINE_ERROR(ContractError, ErrorKind::kContract, std::string("contract error: "))
LKD_DEFINE_ERROR(NumericError, ErrorKind::kNumeric, std::string("numeric error: "))
LKD_DEFINE_ERROR(UsageError, ErrorKind::kUsage, std::string("usage error: "))

#undef LKD_DEFINE_ERROR

}  // namespace lkd
