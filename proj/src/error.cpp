#include "fragpredict/error.hpp"

namespace fragpredict {

const char* ToString(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kDegenerateInput: return "degenerate_input";
    case ErrorKind::kSegmentation: return "segmentation_failure";
    case ErrorKind::kEmptyRegion: return "empty_region";
    case ErrorKind::kDomain: return "domain";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kState: return "state";
    case ErrorKind::kTrainingData: return "training_data";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kPath: return "path";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kSplit: return "split";
    case ErrorKind::kUndefinedRoc: return "undefined_roc";
    case ErrorKind::kEmptyInput: return "empty_input";
  }
  return "unknown";
}

}  // namespace fragpredict
