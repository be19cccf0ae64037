// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lcsb {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LCSB_DEFINE_ERROR(Name)        \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  }

LCSB_DEFINE_ERROR(DimensionError);
LCSB_DEFINE_ERROR(UnsupportedPrimitiveError);
LCSB_DEFINE_ERROR(RankError);
LCSB_DEFINE_ERROR(NonFiniteError);
LCSB_DEFINE_ERROR(ConfigError);
LCSB_DEFINE_ERROR(PlanError);
LCSB_DEFINE_ERROR(ScheduleError);
LCSB_DEFINE_ERROR(MissingRngError);
LCSB_DEFINE_ERROR(InputError);
LCSB_DEFINE_ERROR(ContractError);
LCSB_DEFINE_ERROR(IngestionError);
LCSB_DEFINE_ERROR(CorruptionError);
LCSB_DEFINE_ERROR(ReportingError);
LCSB_DEFINE_ERROR(SuiteError);

#undef LCSB_DEFINE_ERROR

/// Raised when a loss leaves the finite range or crosses the divergence
/// threshold. Carries the probe losses for zeroth-order steps.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, double loss_plus, double loss_minus)
      : Error(what), loss_plus_(loss_plus), loss_minus_(loss_minus) {}

  double loss_plus() const noexcept { return loss_plus_; }
  double loss_minus() const noexcept { return loss_minus_; }

 private:
  double loss_plus_;
  double loss_minus_;
};

}  // namespace lcsb
