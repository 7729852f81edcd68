#pragma once

#include <stdexcept>
#include <string>

namespace bgfn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BGFN_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

BGFN_DEFINE_ERROR(CycleDetected);
BGFN_DEFINE_ERROR(TooLarge);
BGFN_DEFINE_ERROR(OutOfRange);
BGFN_DEFINE_ERROR(LengthMismatch);
BGFN_DEFINE_ERROR(ShapeMismatch);
BGFN_DEFINE_ERROR(NoTape);
BGFN_DEFINE_ERROR(AllMasked);
BGFN_DEFINE_ERROR(NoParents);
BGFN_DEFINE_ERROR(InvalidEdge);
BGFN_DEFINE_ERROR(IncompleteTrajectory);
BGFN_DEFINE_ERROR(UnknownPreset);
BGFN_DEFINE_ERROR(ConfigError);
BGFN_DEFINE_ERROR(NonFiniteLoss);
BGFN_DEFINE_ERROR(DidNotConverge);

#undef BGFN_DEFINE_ERROR

}  // namespace bgfn
