#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace mmdebias {

// Exit-code category used by the CLI: 1 = data, 2 = backend, 3 = config.
enum class ErrorCategory { Data = 1, Backend = 2, Config = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

private:
  ErrorCategory category_;
};

struct DataError : Error {
  explicit DataError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct EmptyEvaluationError : Error {
  explicit EmptyEvaluationError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};
struct SpecError : Error {
  explicit SpecError(const std::string& m) : Error(ErrorCategory::Data, m) {}
};

struct BackendError : Error {
  explicit BackendError(const std::string& m) : Error(ErrorCategory::Backend, m) {}
};
// Carries the offending payload so a failing remote exchange can be inspected.
struct ProtocolError : Error {
  explicit ProtocolError(const std::string& m, std::string raw_payload = {})
      : Error(ErrorCategory::Backend, m), payload(std::move(raw_payload)) {}
  std::string payload;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct TemplateError : Error {
  explicit TemplateError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct SchemaError : Error {
  explicit SchemaError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct UnsupportedError : Error {
  explicit UnsupportedError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct RoutingError : Error {
  explicit RoutingError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct SearchError : Error {
  explicit SearchError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};

}  // namespace mmdebias
