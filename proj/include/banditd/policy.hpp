#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "banditd/random.hpp"
#include "banditd/stats.hpp"
#include "banditd/theta_store.hpp"

namespace banditd {

// Declarative policy description, stored verbatim as
//   {"kind": ..., "params": {...}, "nested_ids": [...]}
struct PolicyConfig {
  std::string kind;
  Document params = Document::object();
  std::vector<ExperimentId> nested_ids;

  bool operator==(const PolicyConfig&) const = default;
};

Document to_document(const PolicyConfig& config);
PolicyConfig policy_config_from_document(const Document& doc);

struct DecisionOutcome {
  Document action;
  // Diagnostics for the logbook; never part of the wire action.
  Document log_hint = Document::object();
};

// Action field that records which child handled a nested decision.
inline constexpr const char* kNestedField = "_nested_id";
inline constexpr int kMaxNestingDepth = 8;

class Policy;

// Resolves the compiled policy of another experiment for nested delegation.
class PolicyDirectory {
 public:
  virtual ~PolicyDirectory() = default;
  virtual std::shared_ptr<const Policy> policy_of(ExperimentId id) const = 0;
};

// Where a policy runs: its theta namespace plus the means to reach children.
struct PolicyScope {
  ExperimentId experiment = 0;
  ThetaStore* store = nullptr;
  const PolicyDirectory* directory = nullptr;
  int depth = 0;
};

// The two-step contract.  `decide` only reads theta; `summarize` folds one
// observation into theta through ThetaStore::atomic_update and is therefore
// not idempotent.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual DecisionOutcome decide(const PolicyScope& scope, const Document& context,
                                 Rng& rng) const = 0;
  virtual void summarize(const PolicyScope& scope, const Document& context,
                         const Document& action, const Document& reward) const = 0;
  // Experiments this policy may delegate to.
  virtual std::vector<ExperimentId> children() const { return {}; }
};

// Maps a kind tag to a factory that validates params and compiles a policy.
class PolicyRegistry {
 public:
  using Factory = std::function<std::shared_ptr<const Policy>(const PolicyConfig&)>;

  void add(std::string kind, Factory factory);
  bool contains(const std::string& kind) const { return factories_.contains(kind); }
  std::vector<std::string> kinds() const;
  // Throws invalid_config for unknown kinds or bad params.
  std::shared_ptr<const Policy> compile(const PolicyConfig& config) const;

  // epsilon_first, thompson_bernoulli, mean_goal, linear_goal, nested.
  static const PolicyRegistry& builtin();

 private:
  std::map<std::string, Factory> factories_;
};

// Factories for the built-in kinds; PolicyRegistry::builtin() wires them up.
std::shared_ptr<const Policy> make_epsilon_first(const PolicyConfig& config);
std::shared_ptr<const Policy> make_thompson_bernoulli(const PolicyConfig& config);
std::shared_ptr<const Policy> make_mean_goal(const PolicyConfig& config);
std::shared_ptr<const Policy> make_linear_goal(const PolicyConfig& config);
std::shared_ptr<const Policy> make_nested(const PolicyConfig& config);

// Goal offset maximising b0 + b1*d + b2*d^2 on [lo, hi] when the quadratic
// is concave (b2 < 0); zero otherwise (clamped into the interval).
double optimal_delta(std::span<const double> beta, double lo, double hi);

// Label under which goal policies key a context: weather followed by user id.
std::string weather_user_label(const Document& context);

}  // namespace banditd
