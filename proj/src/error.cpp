#include "powattn/error.hpp"

namespace powattn {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::Overflow: return "OverflowError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::InvalidGate: return "InvalidGate";
    case ErrorCode::OddPowerWithNormalize: return "OddPowerWithNormalize";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::StateTooLarge: return "StateTooLarge";
  }
  return "Unknown";
}

}  // namespace powattn
