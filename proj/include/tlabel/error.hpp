/// @file  error.hpp
/// @brief Error type shared by every tlabel module.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tlabel {

enum class ErrorCode {
	InvalidSize,
	Index,
	Format,
	BudgetExceedsUniverse,
	DuplicateQuery,
	FusionConflict,
	EmptyInput,
	NumericalOverflow,
	NotPsd,
	Domain,
	InvalidBins,
	UndefinedCorrelation,
	NotFound,
	Conflict,
	Gone,
	DuplicateTask,
	Config,
	Io,
};

inline std::string_view to_string(ErrorCode code) {
	switch (code) {
	case ErrorCode::InvalidSize: return "invalid-size";
	case ErrorCode::Index: return "index";
	case ErrorCode::Format: return "format";
	case ErrorCode::BudgetExceedsUniverse: return "budget-exceeds-universe";
	case ErrorCode::DuplicateQuery: return "duplicate-query";
	case ErrorCode::FusionConflict: return "fusion-conflict";
	case ErrorCode::EmptyInput: return "empty-input";
	case ErrorCode::NumericalOverflow: return "numerical-overflow";
	case ErrorCode::NotPsd: return "not-psd";
	case ErrorCode::Domain: return "domain";
	case ErrorCode::InvalidBins: return "invalid-bins";
	case ErrorCode::UndefinedCorrelation: return "undefined-correlation";
	case ErrorCode::NotFound: return "not-found";
	case ErrorCode::Conflict: return "conflict";
	case ErrorCode::Gone: return "gone";
	case ErrorCode::DuplicateTask: return "duplicate-task";
	case ErrorCode::Config: return "config";
	case ErrorCode::Io: return "io";
	}
	return "unknown";
}

/// Exception carrying a machine-readable code next to the message.
class Error : public std::runtime_error {
public:
	Error(ErrorCode code, const std::string& what)
		: std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

	ErrorCode code() const noexcept { return code_; }

private:
	ErrorCode code_;
};

/// Raised by load_signal and the JSON-Lines reader; row is 1-based.
class FormatError : public Error {
public:
	FormatError(std::size_t row, const std::string& what)
		: Error(ErrorCode::Format, "row " + std::to_string(row) + ": " + what), row_(row) {}

	std::size_t row() const noexcept { return row_; }

private:
	std::size_t row_;
};

} // namespace tlabel
