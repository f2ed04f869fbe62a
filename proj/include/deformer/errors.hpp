#pragma once

#include <stdexcept>
#include <string>

namespace deformer {

// Every error contract in the library maps onto one of these types so the CLI
// can pick an exit status and callers can branch on the failure class.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DEFORMER_ERROR(Name)            \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

DEFORMER_ERROR(ShapeError);
DEFORMER_ERROR(ParameterError);
DEFORMER_ERROR(NumericalError);
DEFORMER_ERROR(InputError);
DEFORMER_ERROR(StateError);
DEFORMER_ERROR(ConfigurationError);
DEFORMER_ERROR(CacheCompatibilityError);
DEFORMER_ERROR(FormatError);
DEFORMER_ERROR(IoError);
DEFORMER_ERROR(DependencyError);
DEFORMER_ERROR(StaleArtifactError);

#undef DEFORMER_ERROR

}  // namespace deformer
