#pragma once

#include <stdexcept>
#include <string>

namespace mforge {

/// Coarse error families. Each maps onto one CLI exit code.
enum class ErrorKind {
  config = 2,
  solver = 3,
  data = 4,
  training = 5,
  optimization = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : Error(kind, what, static_cast<int>(kind)) {}
  Error(ErrorKind kind, const std::string& what, int exit_code)
      : std::runtime_error(what), kind_(kind), exit_code_(exit_code) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  ErrorKind kind_;
  int exit_code_;
};

#define MFORGE_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                                  \
   public:                                                                     \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}   \
  }

// material / membrane-sim
MFORGE_DEFINE_ERROR(ExtensionLimitExceeded, solver);
MFORGE_DEFINE_ERROR(SingularRhs, solver);
MFORGE_DEFINE_ERROR(NotReachable, solver);
MFORGE_DEFINE_ERROR(InvalidDesign, config);

class ShootingFailed : public Error {
 public:
  explicit ShootingFailed(const std::string& what) : Error(ErrorKind::solver, what) {}
};

// Solver family, but a separate exit code (7) so scripts can tell "no static
// shape exists" from "the shooting iteration gave up".
class NoEquilibrium : public Error {
 public:
  static constexpr int kExitCode = 7;
  explicit NoEquilibrium(const std::string& what) : Error(ErrorKind::solver, what, kExitCode) {}
};

// dataset
MFORGE_DEFINE_ERROR(ParseError, data);
MFORGE_DEFINE_ERROR(SchemaError, data);
MFORGE_DEFINE_ERROR(InvariantViolation, data);
MFORGE_DEFINE_ERROR(TooFewDesigns, data);
MFORGE_DEFINE_ERROR(EmptyDataset, data);

// surrogate
MFORGE_DEFINE_ERROR(EmptyBatch, training);
MFORGE_DEFINE_ERROR(Divergence, training);
MFORGE_DEFINE_ERROR(RankDeficient, training);

// ensemble-al / design-opt
MFORGE_DEFINE_ERROR(AllStartsFailed, optimization);
MFORGE_DEFINE_ERROR(EmptyInput, optimization);
MFORGE_DEFINE_ERROR(TargetUnreachable, optimization);
MFORGE_DEFINE_ERROR(ModelEvaluationFailed, optimization);

// cli
MFORGE_DEFINE_ERROR(ConfigError, config);

#undef MFORGE_DEFINE_ERROR

}  // namespace mforge
