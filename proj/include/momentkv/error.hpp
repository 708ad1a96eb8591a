// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace momentkv {

enum class ErrorCode {
    AlreadyPrefilled,
    EmptyPrompt,
    DimensionMismatch,
    PhaseMismatch,
    PositionOrder,
    NotPrefilled,
    IndexOutOfRange,
    PrefillEvictionAttempt,
    LengthMismatch,
    OverflowTooLarge,
    BudgetTooSmall,
    NoEvictableTokens,
    InvalidConfig,
    TokenOutOfVocab,
    BadMagic,
    TruncatedTrace,
    NormalizationViolation,
    InvalidDipWindow,
    BadConcentration,
    RunTooShort,
    HorizonExceedsTrace,
    NotFound,
    ModeError,
    IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::AlreadyPrefilled: return "AlreadyPrefilled";
        case ErrorCode::EmptyPrompt: return "EmptyPrompt";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::PhaseMismatch: return "PhaseMismatch";
        case ErrorCode::PositionOrder: return "PositionOrder";
        case ErrorCode::NotPrefilled: return "NotPrefilled";
        case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorCode::PrefillEvictionAttempt: return "PrefillEvictionAttempt";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::OverflowTooLarge: return "OverflowTooLarge";
        case ErrorCode::BudgetTooSmall: return "BudgetTooSmall";
        case ErrorCode::NoEvictableTokens: return "NoEvictableTokens";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::TokenOutOfVocab: return "TokenOutOfVocab";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedTrace: return "TruncatedTrace";
        case ErrorCode::NormalizationViolation: return "NormalizationViolation";
        case ErrorCode::InvalidDipWindow: return "InvalidDipWindow";
        case ErrorCode::BadConcentration: return "BadConcentration";
        case ErrorCode::RunTooShort: return "RunTooShort";
        case ErrorCode::HorizonExceedsTrace: return "HorizonExceedsTrace";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::ModeError: return "ModeError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-checkable part, `what()` carries `<Code>: <detail>`.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace momentkv
