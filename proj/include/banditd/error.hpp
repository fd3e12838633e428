#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace banditd {

enum class Errc {
  invalid_observation,
  dimension_mismatch,
  singular_model,
  empty_list,
  malformed_document,
  unknown_kind,
  unknown_experiment,
  auth_failure,
  invalid_config,
  cycle_detected,
  context_invalid,
  schema_violation,
  io_error,
  in_use,
  invalid_key,
};

std::string_view to_string(Errc code);

// All library failures surface as this exception; `code()` is what callers
// branch on, `what()` is for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace banditd
