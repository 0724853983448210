#include "nvmag/error.hpp"

namespace nvmag {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
  case Errc::OutOfBand: return "OutOfBand";
  case Errc::NegativeSplit: return "NegativeSplit";
  case Errc::AmbiguousSigns: return "AmbiguousSigns";
  case Errc::BadState: return "BadState";
  case Errc::BadScene: return "BadScene";
  case Errc::EmptyScene: return "EmptyScene";
  case Errc::SingularPoint: return "SingularPoint";
  case Errc::InsidePrism: return "InsidePrism";
  case Errc::BadSweep: return "BadSweep";
  case Errc::BadTiming: return "BadTiming";
  case Errc::BadDims: return "BadDims";
  case Errc::AlreadyMirrored: return "AlreadyMirrored";
  case Errc::TooSmall: return "TooSmall";
  case Errc::NoPeaks: return "NoPeaks";
  case Errc::BadGuess: return "BadGuess";
  case Errc::NotConverged: return "NotConverged";
  case Errc::NonPositive: return "NonPositive";
  case Errc::BadRegion: return "BadRegion";
  case Errc::IoError: return "IoError";
  case Errc::CorruptMagic: return "CorruptMagic";
  case Errc::HeaderMismatch: return "HeaderMismatch";
  case Errc::AllInvalid: return "AllInvalid";
  }
  return "Unknown";
}

} // namespace nvmag
