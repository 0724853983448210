#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nvmag {

enum class Errc {
  OutOfBand,
  NegativeSplit,
  AmbiguousSigns,
  BadState,
  BadScene,
  EmptyScene,
  SingularPoint,
  InsidePrism,
  BadSweep,
  BadTiming,
  BadDims,
  AlreadyMirrored,
  TooSmall,
  NoPeaks,
  BadGuess,
  NotConverged,
  NonPositive,
  BadRegion,
  IoError,
  CorruptMagic,
  HeaderMismatch,
  AllInvalid,
};

std::string_view to_string(Errc code) noexcept;

/// Base exception for every failure raised by the library. `code()` is the
/// machine-readable kind; `what()` carries a human-readable message.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string &message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

} // namespace nvmag
