#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfvla {

// Every failure raised by the library derives from Error so callers can
// catch broadly and still dispatch on the concrete type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define RFVLA_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

// autodiff
RFVLA_DEFINE_ERROR(DimensionError)
RFVLA_DEFINE_ERROR(IndexError)
RFVLA_DEFINE_ERROR(DegenerateBatchError)
RFVLA_DEFINE_ERROR(ContractError)

// configuration / simulator
RFVLA_DEFINE_ERROR(ConfigError)
RFVLA_DEFINE_ERROR(CapacityError)
RFVLA_DEFINE_ERROR(TaskError)

// teacher
RFVLA_DEFINE_ERROR(VocabError)
RFVLA_DEFINE_ERROR(FormatError)
RFVLA_DEFINE_ERROR(HallucinationError)
RFVLA_DEFINE_ERROR(ConsistencyError)
RFVLA_DEFINE_ERROR(TransportError)

// dataset
RFVLA_DEFINE_ERROR(LoadError)
RFVLA_DEFINE_ERROR(SizeError)
RFVLA_DEFINE_ERROR(IoError)

// model / training / evaluation
RFVLA_DEFINE_ERROR(LengthError)
RFVLA_DEFINE_ERROR(SpanError)
RFVLA_DEFINE_ERROR(DivergenceError)
RFVLA_DEFINE_ERROR(MetricError)
RFVLA_DEFINE_ERROR(CompatibilityError)
RFVLA_DEFINE_ERROR(PlotError)

#undef RFVLA_DEFINE_ERROR

class RemoteError : public Error {
 public:
  RemoteError(int status, const std::string& what)
      : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class VersionError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ManifestError : public LoadError {
 public:
  using LoadError::LoadError;
};

class MalformedLineError : public LoadError {
 public:
  MalformedLineError(std::size_t line, const std::string& what)
      : LoadError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct FailedItem {
  std::size_t index;
  std::string reason;
};

class PartialOutputError : public Error {
 public:
  PartialOutputError(std::vector<FailedItem> failed, const std::string& what)
      : Error(what), failed_(std::move(failed)) {}
  const std::vector<FailedItem>& failed() const noexcept { return failed_; }

 private:
  std::vector<FailedItem> failed_;
};

}  // namespace rfvla
