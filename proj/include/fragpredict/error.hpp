#pragma once

#include <stdexcept>
#include <string>

namespace fragpredict {

enum class ErrorKind {
  kDimension,
  kDegenerateInput,
  kSegmentation,
  kEmptyRegion,
  kDomain,
  kConfig,
  kShape,
  kState,
  kTrainingData,
  kDivergence,
  kValidation,
  kPath,
  kIo,
  kSplit,
  kUndefinedRoc,
  kEmptyInput,
};

const char* ToString(ErrorKind kind);

// Single exception type for the library; the kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fragpredict
