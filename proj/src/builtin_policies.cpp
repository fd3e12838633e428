#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "banditd/policy.hpp"

namespace banditd {

namespace {

// ---- parameter helpers -----------------------------------------------------

void reject_unknown_params(const Document& params, std::initializer_list<const char*> known) {
  for (const auto& [name, _] : params.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return name == k; })) {
      throw Error(Errc::invalid_config, "unknown parameter '" + name + "'");
    }
  }
}

std::string string_param(const Document& params, const char* name, const char* fallback) {
  auto it = params.find(name);
  if (it == params.end()) return fallback;
  if (!it->is_string() || it->get_ref<const std::string&>().empty()) {
    throw Error(Errc::invalid_config, std::string("'") + name + "' must be a non-empty string");
  }
  return it->get<std::string>();
}

double real_param(const Document& params, const char* name, double fallback) {
  auto it = params.find(name);
  if (it == params.end()) return fallback;
  if (!it->is_number() || !std::isfinite(it->get<double>())) {
    throw Error(Errc::invalid_config, std::string("'") + name + "' must be a finite number");
  }
  return it->get<double>();
}

std::uint64_t count_param(const Document& params, const char* name, std::uint64_t fallback) {
  auto it = params.find(name);
  if (it == params.end()) return fallback;
  if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
    throw Error(Errc::invalid_config, std::string("'") + name + "' must be a nonnegative integer");
  }
  return it->get<std::uint64_t>();
}

std::vector<std::string> arms_param(const Document& params) {
  auto it = params.find("arms");
  if (it == params.end() || !it->is_array() || it->empty()) {
    throw Error(Errc::invalid_config, "'arms' must be a non-empty list of labels");
  }
  std::vector<std::string> arms;
  std::set<std::string> seen;
  for (const auto& arm : *it) {
    if (!arm.is_string() || arm.get_ref<const std::string&>().empty()) {
      throw Error(Errc::invalid_config, "arm labels must be non-empty strings");
    }
    if (!seen.insert(arm.get<std::string>()).second) {
      throw Error(Errc::invalid_config, "duplicate arm '" + arm.get<std::string>() + "'");
    }
    arms.push_back(arm.get<std::string>());
  }
  std::sort(arms.begin(), arms.end());
  return arms;
}

std::map<std::string, std::string> activity_param(const Document& params) {
  auto it = params.find("activity_map");
  if (it == params.end()) return {{"sunny", "run"}, {"rainy", "swim"}};
  if (!it->is_object() || it->empty()) {
    throw Error(Errc::invalid_config, "'activity_map' must be a non-empty object");
  }
  std::map<std::string, std::string> out;
  for (const auto& [weather, activity] : it->items()) {
    if (!activity.is_string()) {
      throw Error(Errc::invalid_config, "'activity_map' values must be strings");
    }
    out.emplace(weather, activity.get<std::string>());
  }
  return out;
}

// ---- observation helpers ---------------------------------------------------

int binary_reward(const Document& reward, const std::string& field) {
  if (!reward.is_object()) throw Error(Errc::schema_violation, "reward must be an object");
  auto it = reward.find(field);
  if (it == reward.end()) throw Error(Errc::schema_violation, "reward needs '" + field + "'");
  if (it->is_boolean()) return it->get<bool>() ? 1 : 0;
  if (it->is_number()) {
    const double v = it->get<double>();
    if (v == 0.0) return 0;
    if (v == 1.0) return 1;
  }
  throw Error(Errc::schema_violation, "reward '" + field + "' must be 0 or 1");
}

double real_reward(const Document& reward, const std::string& field) {
  if (!reward.is_object()) throw Error(Errc::schema_violation, "reward must be an object");
  auto it = reward.find(field);
  if (it == reward.end() || !it->is_number() || !std::isfinite(it->get<double>())) {
    throw Error(Errc::schema_violation, "reward needs a finite number '" + field + "'");
  }
  return it->get<double>();
}

double real_action_field(const Document& action, const std::string& field) {
  if (!action.is_object()) throw Error(Errc::schema_violation, "action must be an object");
  auto it = action.find(field);
  if (it == action.end() || !it->is_number() || !std::isfinite(it->get<double>())) {
    throw Error(Errc::schema_violation, "action needs a finite number '" + field + "'");
  }
  return it->get<double>();
}

template <class Stat>
Stat stat_or_zero(const std::optional<Document>& doc) {
  return doc ? deserialize_as<Stat>(*doc) : Stat{};
}

// ---- arm-based policies ----------------------------------------------------

// Shared by epsilon_first and thompson_bernoulli: one click proportion per
// arm under key "version" (configurable), value = arm label.
class ArmPolicy : public Policy {
 public:
  explicit ArmPolicy(const Document& params)
      : arms_(arms_param(params)),
        arm_field_(string_param(params, "arm_field", "version")),
        reward_field_(string_param(params, "reward_field", "click")),
        theta_key_(string_param(params, "theta_key", "version")) {}

  void summarize(const PolicyScope& scope, const Document&, const Document& action,
                 const Document& reward) const override {
    const std::string arm = chosen_arm(action);
    const int outcome = binary_reward(reward, reward_field_);
    scope.store->atomic_update(
        ThetaKey{scope.experiment, "default", theta_key_, arm},
        [&](const std::optional<Document>& current) {
          auto prop = stat_or_zero<RunningProportion>(current);
          prop.update(outcome);
          return serialize(prop);
        });
  }

 protected:
  StatList<RunningProportion> proportions(const PolicyScope& scope) const {
    StatList<RunningProportion> list;
    const auto stored = scope.store->get_all(scope.experiment, "default", theta_key_);
    for (const auto& arm : arms_) {
      auto it = stored.find(arm);
      list.insert(arm, it == stored.end() ? RunningProportion{}
                                          : deserialize_as<RunningProportion>(it->second));
    }
    return list;
  }

  Document action_for(const std::string& arm) const { return {{arm_field_, arm}}; }

 private:
  std::string chosen_arm(const Document& action) const {
    if (!action.is_object()) throw Error(Errc::schema_violation, "action must be an object");
    auto it = action.find(arm_field_);
    if (it == action.end() || !it->is_string()) {
      throw Error(Errc::schema_violation, "action needs a string '" + arm_field_ + "'");
    }
    const auto& arm = it->get_ref<const std::string&>();
    if (!std::binary_search(arms_.begin(), arms_.end(), arm)) {
      throw Error(Errc::schema_violation, "unknown arm '" + arm + "'");
    }
    return arm;
  }

  std::vector<std::string> arms_;
  std::string arm_field_;
  std::string reward_field_;
  std::string theta_key_;
};

// Uniform exploration until more than `exploration_n` observations, then the
// arm with the best observed proportion.
class EpsilonFirst final : public ArmPolicy {
 public:
  explicit EpsilonFirst(const Document& params)
      : ArmPolicy(params), exploration_n_(count_param(params, "exploration_n", 1000)) {}

  DecisionOutcome decide(const PolicyScope& scope, const Document&, Rng& rng) const override {
    const auto list = proportions(scope);
    const bool exploit = list.count() > exploration_n_;
    const std::string& arm = exploit ? list.max() : list.random(rng);
    return {action_for(arm), {{"phase", exploit ? "exploit" : "explore"}}};
  }

 private:
  std::uint64_t exploration_n_;
};

// Beta(1,1)-prior Thompson sampling over the arm proportions.
class ThompsonBernoulli final : public ArmPolicy {
 public:
  using ArmPolicy::ArmPolicy;

  DecisionOutcome decide(const PolicyScope& scope, const Document&, Rng& rng) const override {
    const auto list = proportions(scope);
    const std::string* best = nullptr;
    double best_draw = -1.0;
    Document draws = Document::object();
    for (const auto& [arm, prop] : list.entries()) {
      const double s = static_cast<double>(prop.successes());
      const double f = static_cast<double>(prop.count() - prop.successes());
      const double q = rng.beta(s + 1.0, f + 1.0);
      draws[arm] = q;
      if (q > best_draw) {
        best_draw = q;
        best = &arm;
      }
    }
    return {action_for(*best), {{"draws", std::move(draws)}}};
  }
};

// ---- goal-setting policies -------------------------------------------------

constexpr const char* kGoalKey = "weather-uid";

class GoalPolicyBase : public Policy {
 public:
  explicit GoalPolicyBase(const Document& params)
      : activities_(activity_param(params)),
        cold_start_goal_(real_param(params, "cold_start_goal", 1.0)),
        reward_field_(string_param(params, "reward_field", "km")) {}

 protected:
  // Validates the context and returns its label and activity type.
  std::pair<std::string, std::string> label_and_activity(const Document& context) const {
    std::string label = weather_user_label(context);
    const auto& weather = context["weather"].get_ref<const std::string&>();
    auto it = activities_.find(weather);
    if (it == activities_.end()) {
      throw Error(Errc::context_invalid, "no activity configured for weather '" + weather + "'");
    }
    return {std::move(label), it->second};
  }

  std::map<std::string, std::string> activities_;
  double cold_start_goal_;
  std::string reward_field_;
};

// Goal = running mean of achieved distance times a fixed uplift.
class MeanGoal final : public GoalPolicyBase {
 public:
  explicit MeanGoal(const Document& params)
      : GoalPolicyBase(params), uplift_(real_param(params, "uplift", 1.1)) {}

  DecisionOutcome decide(const PolicyScope& scope, const Document& context, Rng&) const override {
    const auto [label, activity] = label_and_activity(context);
    const auto mean =
        stat_or_zero<RunningMean>(scope.store->get({scope.experiment, "default", kGoalKey, label}));
    double distance = mean.value() * uplift_;
    if (distance == 0.0) distance = cold_start_goal_;
    return {{{"type", activity}, {"distance", distance}},
            {{"label", label}, {"mean", mean.value()}, {"n", mean.count()}}};
  }

  void summarize(const PolicyScope& scope, const Document& context, const Document&,
                 const Document& reward) const override {
    const auto [label, activity] = label_and_activity(context);
    const double km = real_reward(reward, reward_field_);
    scope.store->atomic_update(ThetaKey{scope.experiment, "default", kGoalKey, label},
                               [&](const std::optional<Document>& current) {
                                 auto mean = stat_or_zero<RunningMean>(current);
                                 mean.update(km);
                                 return serialize(mean);
                               });
  }

 private:
  double uplift_;
};

// Learns r = b0 + b1*delta + b2*delta^2 with delta = goal - mean and sets the
// goal at the fitted optimum plus Gaussian exploration.
class LinearGoal final : public GoalPolicyBase {
 public:
  explicit LinearGoal(const Document& params)
      : GoalPolicyBase(params),
        delta_min_(real_param(params, "delta_min", -5.0)),
        delta_max_(real_param(params, "delta_max", 5.0)),
        lambda_(real_param(params, "lambda", OnlineLinearModel::kDefaultLambda)),
        exploration_sd_(real_param(params, "exploration_sd", 0.5)),
        goal_field_(string_param(params, "goal_field", "distance")) {
    if (delta_min_ > delta_max_) throw Error(Errc::invalid_config, "delta_min exceeds delta_max");
    if (lambda_ < 0.0) throw Error(Errc::invalid_config, "'lambda' must be nonnegative");
    if (exploration_sd_ < 0.0) {
      throw Error(Errc::invalid_config, "'exploration_sd' must be nonnegative");
    }
  }

  DecisionOutcome decide(const PolicyScope& scope, const Document& context,
                         Rng& rng) const override {
    const auto [label, activity] = label_and_activity(context);
    const auto mean = stat_or_zero<RunningMean>(
        scope.store->get({scope.experiment, "mean", kGoalKey, label}));
    if (mean.value() == 0.0) {
      return {{{"type", activity}, {goal_field_, cold_start_goal_}},
              {{"label", label}, {"cold_start", true}}};
    }
    const auto stored = scope.store->get({scope.experiment, "default", kGoalKey, label});
    const auto model = stored ? deserialize_as<OnlineLinearModel>(*stored) : empty_model();
    const std::vector<double> beta = model.coefs();
    const double best = optimal_delta(beta, delta_min_, delta_max_);
    double delta = best;
    if (exploration_sd_ > 0.0) {
      delta = std::clamp(best + rng.normal(0.0, exploration_sd_), delta_min_, delta_max_);
    }
    return {{{"type", activity}, {goal_field_, mean.value() + delta}},
            {{"label", label},
             {"mean", mean.value()},
             {"beta", beta},
             {"delta_star", best},
             {"delta", delta}}};
  }

  void summarize(const PolicyScope& scope, const Document& context, const Document& action,
                 const Document& reward) const override {
    const auto [label, activity] = label_and_activity(context);
    const double km = real_reward(reward, reward_field_);
    const double goal = real_action_field(action, goal_field_);
    const std::array<ThetaKey, 2> keys{ThetaKey{scope.experiment, "default", kGoalKey, label},
                                       ThetaKey{scope.experiment, "mean", kGoalKey, label}};
    scope.store->atomic_update(keys, [&](const std::vector<std::optional<Document>>& current) {
      auto model = current[0] ? deserialize_as<OnlineLinearModel>(*current[0]) : empty_model();
      auto mean = stat_or_zero<RunningMean>(current[1]);
      const double delta = goal - mean.value();
      const std::array<double, 2> features{delta, delta * delta};
      model.update(km, features);
      mean.update(km);
      return std::vector<Document>{serialize(model), serialize(mean)};
    });
  }

 private:
  OnlineLinearModel empty_model() const { return OnlineLinearModel(2, lambda_); }

  double delta_min_;
  double delta_max_;
  double lambda_;
  double exploration_sd_;
  std::string goal_field_;
};

// ---- nesting ---------------------------------------------------------------

// Routes each decision to a child experiment, either by fixed split weights
// or by a context field, and tags the action with the handling child so the
// reward can be routed back without server-side session state.
class Nested final : public Policy {
 public:
  explicit Nested(const PolicyConfig& config) : children_(config.nested_ids) {
    const Document& params = config.params;
    if (children_.empty()) throw Error(Errc::invalid_config, "nested policy needs nested_ids");
    if (std::set<ExperimentId>(children_.begin(), children_.end()).size() != children_.size()) {
      throw Error(Errc::invalid_config, "duplicate nested id");
    }
    const std::string router = string_param(params, "router", "split");
    if (router == "split") {
      reject_unknown_params(params, {"router", "weights"});
      if (auto it = params.find("weights"); it != params.end()) {
        if (!it->is_array() || it->size() != children_.size()) {
          throw Error(Errc::invalid_config, "'weights' must match nested_ids in length");
        }
        for (const auto& w : *it) {
          if (!w.is_number() || !(w.get<double>() >= 0.0) || !std::isfinite(w.get<double>())) {
            throw Error(Errc::invalid_config, "weights must be nonnegative numbers");
          }
          weights_.push_back(w.get<double>());
        }
      } else {
        weights_.assign(children_.size(), 1.0);
      }
      double total = 0.0;
      for (double w : weights_) total += w;
      if (!(total > 0.0)) throw Error(Errc::invalid_config, "weights must not all be zero");
      for (double& w : weights_) w /= total;
    } else if (router == "field") {
      reject_unknown_params(params, {"router", "field", "routes"});
      field_ = string_param(params, "field", "");
      if (field_.empty()) throw Error(Errc::invalid_config, "field router needs 'field'");
      auto routes = params.find("routes");
      if (routes == params.end() || !routes->is_object() || routes->empty()) {
        throw Error(Errc::invalid_config, "field router needs a non-empty 'routes' object");
      }
      for (const auto& [value, target] : routes->items()) {
        if (!target.is_number_integer()) {
          throw Error(Errc::invalid_config, "route targets must be experiment ids");
        }
        const auto id = target.get<ExperimentId>();
        if (std::find(children_.begin(), children_.end(), id) == children_.end()) {
          throw Error(Errc::invalid_config, "route target " + std::to_string(id) +
                                                " is not listed in nested_ids");
        }
        routes_.emplace(value, id);
      }
    } else {
      throw Error(Errc::invalid_config, "unknown router '" + router + "'");
    }
  }

  std::vector<ExperimentId> children() const override { return children_; }

  DecisionOutcome decide(const PolicyScope& scope, const Document& context,
                         Rng& rng) const override {
    const ExperimentId child = route(context, rng);
    DecisionOutcome outcome = child_policy(scope, child)->decide(child_scope(scope, child),
                                                                 context, rng);
    if (!outcome.action.is_object()) {
      throw Error(Errc::invalid_config, "nested child returned a non-object action");
    }
    // Deeper routing is kept as a path: [child, grandchild, ...].
    if (auto inner = outcome.action.find(kNestedField); inner != outcome.action.end()) {
      Document path = Document::array({child});
      if (inner->is_array()) {
        for (const auto& id : *inner) path.push_back(id);
      } else {
        path.push_back(*inner);
      }
      outcome.action[kNestedField] = std::move(path);
    } else {
      outcome.action[kNestedField] = child;
    }
    outcome.log_hint = {{"child", child}, {"child_hint", std::move(outcome.log_hint)}};
    return outcome;
  }

  void summarize(const PolicyScope& scope, const Document& context, const Document& action,
                 const Document& reward) const override {
    if (!action.is_object()) throw Error(Errc::schema_violation, "action must be an object");
    auto tag = action.find(kNestedField);
    if (tag == action.end()) {
      throw Error(Errc::schema_violation, std::string("action lacks '") + kNestedField + "'");
    }
    Document inner_action = action;
    ExperimentId child = 0;
    if (tag->is_number_integer()) {
      child = tag->get<ExperimentId>();
      inner_action.erase(kNestedField);
    } else if (tag->is_array() && !tag->empty() && (*tag)[0].is_number_integer()) {
      child = (*tag)[0].get<ExperimentId>();
      Document rest(tag->begin() + 1, tag->end());
      if (rest.empty()) {
        inner_action.erase(kNestedField);
      } else if (rest.size() == 1) {
        inner_action[kNestedField] = rest[0];
      } else {
        inner_action[kNestedField] = std::move(rest);
      }
    } else {
      throw Error(Errc::schema_violation, std::string("malformed '") + kNestedField + "'");
    }
    if (std::find(children_.begin(), children_.end(), child) == children_.end()) {
      throw Error(Errc::schema_violation,
                  "action was routed to " + std::to_string(child) + ", not a nested child");
    }
    child_policy(scope, child)->summarize(child_scope(scope, child), context, inner_action,
                                          reward);
  }

 private:
  ExperimentId route(const Document& context, Rng& rng) const {
    if (!field_.empty()) {
      if (!context.is_object() || !context.contains(field_)) {
        throw Error(Errc::context_invalid, "context needs '" + field_ + "' for routing");
      }
      const Document& v = context[field_];
      const std::string key = v.is_string() ? v.get<std::string>() : v.dump();
      auto it = routes_.find(key);
      if (it == routes_.end()) {
        throw Error(Errc::context_invalid, "no route for " + field_ + "=" + key);
      }
      return it->second;
    }
    if (children_.size() == 1) return children_.front();
    const double u = rng.uniform01();
    double cumulative = 0.0;
    for (std::size_t i = 0; i < children_.size(); ++i) {
      cumulative += weights_[i];
      if (u < cumulative) return children_[i];
    }
    // Rounding can leave u just above the final cumulative weight.
    for (std::size_t i = children_.size(); i-- > 0;) {
      if (weights_[i] > 0.0) return children_[i];
    }
    return children_.back();
  }

  static std::shared_ptr<const Policy> child_policy(const PolicyScope& scope, ExperimentId id) {
    if (scope.depth + 1 > kMaxNestingDepth) {
      throw Error(Errc::cycle_detected, "nesting deeper than " +
                                            std::to_string(kMaxNestingDepth) + " levels");
    }
    auto policy = scope.directory ? scope.directory->policy_of(id) : nullptr;
    if (!policy) {
      throw Error(Errc::invalid_config, "nested experiment " + std::to_string(id) + " is missing");
    }
    return policy;
  }

  static PolicyScope child_scope(const PolicyScope& scope, ExperimentId id) {
    return {id, scope.store, scope.directory, scope.depth + 1};
  }

  std::vector<ExperimentId> children_;
  std::vector<double> weights_;
  std::string field_;
  std::map<std::string, ExperimentId> routes_;
};

}  // namespace

std::shared_ptr<const Policy> make_epsilon_first(const PolicyConfig& config) {
  reject_unknown_params(config.params,
                        {"arms", "exploration_n", "reward_field", "arm_field", "theta_key"});
  return std::make_shared<EpsilonFirst>(config.params);
}

std::shared_ptr<const Policy> make_thompson_bernoulli(const PolicyConfig& config) {
  reject_unknown_params(config.params, {"arms", "reward_field", "arm_field", "theta_key"});
  return std::make_shared<ThompsonBernoulli>(config.params);
}

std::shared_ptr<const Policy> make_mean_goal(const PolicyConfig& config) {
  reject_unknown_params(config.params,
                        {"uplift", "cold_start_goal", "activity_map", "reward_field"});
  return std::make_shared<MeanGoal>(config.params);
}

std::shared_ptr<const Policy> make_linear_goal(const PolicyConfig& config) {
  reject_unknown_params(config.params,
                        {"delta_min", "delta_max", "lambda", "exploration_sd", "cold_start_goal",
                         "activity_map", "reward_field", "goal_field"});
  return std::make_shared<LinearGoal>(config.params);
}

std::shared_ptr<const Policy> make_nested(const PolicyConfig& config) {
  return std::make_shared<Nested>(config);
}

}  // namespace banditd
