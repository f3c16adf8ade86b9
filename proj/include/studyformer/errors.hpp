#pragma once

#include <stdexcept>
#include <string>

namespace studyformer {

// Base of every error thrown by the library. kind() is a stable lowercase tag
// used by the CLI for machine-parsable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define STUDYFORMER_DEFINE_ERROR(Name, tag) \
  class Name : public Error {               \
   public:                                  \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

STUDYFORMER_DEFINE_ERROR(DimensionError, "dimension")
STUDYFORMER_DEFINE_ERROR(ContractError, "contract")
STUDYFORMER_DEFINE_ERROR(ConfigError, "config")
STUDYFORMER_DEFINE_ERROR(CapacityError, "capacity")
STUDYFORMER_DEFINE_ERROR(FormatError, "format")
STUDYFORMER_DEFINE_ERROR(InputError, "input")
STUDYFORMER_DEFINE_ERROR(ValidationError, "validation")
STUDYFORMER_DEFINE_ERROR(UndefinedMetricError, "undefined-metric")
STUDYFORMER_DEFINE_ERROR(TrainingError, "training")

#undef STUDYFORMER_DEFINE_ERROR

}  // namespace studyformer
