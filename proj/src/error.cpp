#include "banditd/error.hpp"

namespace banditd {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_observation: return "invalid_observation";
    case Errc::dimension_mismatch: return "dimension_mismatch";
    case Errc::singular_model: return "singular_model";
    case Errc::empty_list: return "empty_list";
    case Errc::malformed_document: return "malformed_document";
    case Errc::unknown_kind: return "unknown_kind";
    case Errc::unknown_experiment: return "unknown_experiment";
    case Errc::auth_failure: return "auth_failure";
    case Errc::invalid_config: return "invalid_config";
    case Errc::cycle_detected: return "cycle_detected";
    case Errc::context_invalid: return "context_invalid";
    case Errc::schema_violation: return "schema_violation";
    case Errc::io_error: return "io_error";
    case Errc::in_use: return "in_use";
    case Errc::invalid_key: return "invalid_key";
  }
  return "unknown";
}

}  // namespace banditd
