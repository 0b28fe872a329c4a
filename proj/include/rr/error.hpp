// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rr {

enum class Errc {
  InvalidArgument,
  BadMagic,
  VersionUnsupported,
  TruncatedFile,
  NormViolation,
  MetaMismatch,
  IoFailure,
  ZeroVector,
  DimMismatch,
  ShapeMismatch,
  LengthMismatch,
  EmptyCandidateSet,
  EmptyDatabase,
  SingletonDatabase,
  MalformedRecord,
  MissingAssignment,
  EmptyInput,
  NonFiniteLoss,
  DivergenceDetected,
  CheckpointMissing,
  IdLookupFailure,
  SpecInfeasible,
  NonFiniteOutput,
};

constexpr std::string_view errc_name(Errc c) noexcept {
  switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::BadMagic: return "BadMagic";
    case Errc::VersionUnsupported: return "VersionUnsupported";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::NormViolation: return "NormViolation";
    case Errc::MetaMismatch: return "MetaMismatch";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ZeroVector: return "ZeroVector";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyCandidateSet: return "EmptyCandidateSet";
    case Errc::EmptyDatabase: return "EmptyDatabase";
    case Errc::SingletonDatabase: return "SingletonDatabase";
    case Errc::MalformedRecord: return "MalformedRecord";
    case Errc::MissingAssignment: return "MissingAssignment";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::DivergenceDetected: return "DivergenceDetected";
    case Errc::CheckpointMissing: return "CheckpointMissing";
    case Errc::IdLookupFailure: return "IdLookupFailure";
    case Errc::SpecInfeasible: return "SpecInfeasible";
    case Errc::NonFiniteOutput: return "NonFiniteOutput";
  }
  return "Unknown";
}

/// All library failures surface as rr::Error; code() identifies the failure
/// kind so callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace rr
