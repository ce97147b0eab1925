#pragma once

#include <stdexcept>
#include <string>

namespace mss {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MSS_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

MSS_DEFINE_ERROR(BoundViolation)
MSS_DEFINE_ERROR(NonFiniteDensity)
MSS_DEFINE_ERROR(DimensionMismatch)
MSS_DEFINE_ERROR(NonPositiveVariance)
MSS_DEFINE_ERROR(NonPositiveAmplitude)
MSS_DEFINE_ERROR(NumericalSingular)
MSS_DEFINE_ERROR(DegenerateFrequencies)
MSS_DEFINE_ERROR(DegenerateSpan)
MSS_DEFINE_ERROR(JitterCollision)
MSS_DEFINE_ERROR(FormatError)
MSS_DEFINE_ERROR(VersionMismatch)
MSS_DEFINE_ERROR(Divergence)
MSS_DEFINE_ERROR(AllDivergent)
MSS_DEFINE_ERROR(InitOutOfSupport)
MSS_DEFINE_ERROR(UnsupportedModel)
MSS_DEFINE_ERROR(TooFewSamples)
MSS_DEFINE_ERROR(NonFiniteLoss)
MSS_DEFINE_ERROR(DegenerateChain)
MSS_DEFINE_ERROR(CoverageError)
MSS_DEFINE_ERROR(ConvergenceGateFailed)
MSS_DEFINE_ERROR(InvalidArgument)

#undef MSS_DEFINE_ERROR

}  // namespace mss
