#pragma once

#include <stdexcept>
#include <string>

namespace hdwsr {

// Base class for all recoverable failures raised at module boundaries.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or divisibility violations; messages name the offending axis.
struct DimensionError : Error { using Error::Error; };
// Invalid construction parameters (schedule ranges, loss weights, K out of range).
struct ConfigError : Error { using Error::Error; };
// A documented precondition was violated by the caller.
struct ContractError : Error { using Error::Error; };
// Step index outside the schedule range.
struct IndexError : Error { using Error::Error; };
// Dataset or external image problems.
struct IngestError : Error { using Error::Error; };
// Filesystem and codec failures.
struct IoError : Error { using Error::Error; };
// Report requested from an empty ledger.
struct ReportError : Error { using Error::Error; };

}  // namespace hdwsr
