#include "banditd/policy.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace banditd {

Document to_document(const PolicyConfig& config) {
  Document doc = {{"kind", config.kind}, {"params", config.params}};
  doc["nested_ids"] = config.nested_ids;
  return doc;
}

PolicyConfig policy_config_from_document(const Document& doc) {
  if (!doc.is_object()) throw Error(Errc::invalid_config, "policy config must be an object");
  PolicyConfig config;
  auto kind = doc.find("kind");
  if (kind == doc.end() || !kind->is_string()) {
    throw Error(Errc::invalid_config, "policy config needs a string 'kind'");
  }
  config.kind = kind->get<std::string>();
  if (auto params = doc.find("params"); params != doc.end() && !params->is_null()) {
    if (!params->is_object()) throw Error(Errc::invalid_config, "'params' must be an object");
    config.params = *params;
  }
  if (auto ids = doc.find("nested_ids"); ids != doc.end() && !ids->is_null()) {
    if (!ids->is_array()) throw Error(Errc::invalid_config, "'nested_ids' must be an array");
    for (const auto& id : *ids) {
      if (!id.is_number_integer() || id.get<std::int64_t>() < 1) {
        throw Error(Errc::invalid_config, "'nested_ids' must hold positive integers");
      }
      config.nested_ids.push_back(id.get<ExperimentId>());
    }
  }
  for (const auto& [name, _] : doc.items()) {
    if (name != "kind" && name != "params" && name != "nested_ids") {
      throw Error(Errc::invalid_config, "unexpected policy field '" + name + "'");
    }
  }
  return config;
}

void PolicyRegistry::add(std::string kind, Factory factory) {
  factories_.insert_or_assign(std::move(kind), std::move(factory));
}

std::vector<std::string> PolicyRegistry::kinds() const {
  std::vector<std::string> out;
  for (const auto& [kind, _] : factories_) out.push_back(kind);
  return out;
}

std::shared_ptr<const Policy> PolicyRegistry::compile(const PolicyConfig& config) const {
  auto it = factories_.find(config.kind);
  if (it == factories_.end()) {
    throw Error(Errc::invalid_config, "unknown policy kind '" + config.kind + "'");
  }
  if (config.kind != "nested" && !config.nested_ids.empty()) {
    throw Error(Errc::invalid_config, "only nested policies may list nested_ids");
  }
  try {
    return it->second(config);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_config, std::string("bad policy params: ") + e.what());
  }
}

const PolicyRegistry& PolicyRegistry::builtin() {
  static const PolicyRegistry registry = [] {
    PolicyRegistry r;
    r.add("epsilon_first", make_epsilon_first);
    r.add("thompson_bernoulli", make_thompson_bernoulli);
    r.add("mean_goal", make_mean_goal);
    r.add("linear_goal", make_linear_goal);
    r.add("nested", make_nested);
    return r;
  }();
  return registry;
}

double optimal_delta(std::span<const double> beta, double lo, double hi) {
  if (beta.size() != 3) {
    throw Error(Errc::dimension_mismatch, "quadratic goal model needs three coefficients");
  }
  double delta = 0.0;
  if (beta[2] < 0.0) delta = -beta[1] / (2.0 * beta[2]);
  return std::clamp(delta, lo, hi);
}

std::string weather_user_label(const Document& context) {
  if (!context.is_object()) throw Error(Errc::context_invalid, "context must be an object");
  auto weather = context.find("weather");
  if (weather == context.end() || !weather->is_string()) {
    throw Error(Errc::context_invalid, "context needs a string 'weather'");
  }
  auto user = context.find("userid");
  if (user == context.end()) throw Error(Errc::context_invalid, "context needs 'userid'");
  std::string label = weather->get<std::string>();
  if (user->is_string()) {
    label += user->get<std::string>();
  } else if (user->is_number_integer()) {
    label += user->dump();
  } else {
    throw Error(Errc::context_invalid, "'userid' must be an integer or a string");
  }
  return label;
}

}  // namespace banditd
