#include "banditd/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace banditd {

namespace {

class BernoulliArms final : public Environment {
 public:
  explicit BernoulliArms(BernoulliArmsParams params) : p_(std::move(params)) {
    if (p_.probabilities.empty()) {
      throw Error(Errc::invalid_config, "bernoulli_arms needs at least one arm");
    }
    for (const auto& [arm, prob] : p_.probabilities) {
      if (!(prob >= 0.0 && prob <= 1.0)) {
        throw Error(Errc::invalid_config, "arm '" + arm + "' probability must lie in [0, 1]");
      }
    }
  }

  Document describe() const override {
    return {{"kind", "bernoulli_arms"},
            {"arms", p_.probabilities},
            {"arm_field", p_.arm_field},
            {"reward_field", p_.reward_field}};
  }

  Document next_context(Rng&) override { return Document::object(); }

  Document respond(const Document&, const Document& action, Rng& rng) override {
    const std::string arm = action_label(action);
    auto it = p_.probabilities.find(arm);
    if (it == p_.probabilities.end()) {
      throw Error(Errc::schema_violation, "policy chose arm '" + arm + "' unknown to the environment");
    }
    // One uniform per step whatever the arm, so paired runs share noise.
    const double u = rng.uniform01();
    return {{p_.reward_field, u < it->second ? 1 : 0}};
  }

  double reward_value(const Document& reward) const override {
    return reward.at(p_.reward_field).get<double>();
  }

  std::string action_label(const Document& action) const override {
    auto it = action.find(p_.arm_field);
    if (it == action.end() || !it->is_string()) {
      throw Error(Errc::schema_violation, "action lacks arm field '" + p_.arm_field + "'");
    }
    return it->get<std::string>();
  }

 private:
  BernoulliArmsParams p_;
};

class GoalSetting final : public Environment {
 public:
  explicit GoalSetting(GoalSettingParams params) : p_(std::move(params)) {
    for (double v : {p_.alpha, p_.beta1, p_.beta2, p_.sigma}) {
      if (!std::isfinite(v)) throw Error(Errc::invalid_config, "goal_setting parameters must be finite");
    }
    if (!(p_.beta2 < 0.0)) throw Error(Errc::invalid_config, "goal_setting needs beta2 < 0");
    if (p_.sigma < 0.0) throw Error(Errc::invalid_config, "sigma must be nonnegative");
    if (p_.users < 1) throw Error(Errc::invalid_config, "goal_setting needs at least one user");
    if (p_.weathers.empty()) throw Error(Errc::invalid_config, "goal_setting needs weathers");
  }

  Document describe() const override {
    return {{"kind", "goal_setting"}, {"alpha", p_.alpha},   {"beta1", p_.beta1},
            {"beta2", p_.beta2},      {"sigma", p_.sigma},   {"users", p_.users},
            {"weathers", p_.weathers}, {"activity_map", p_.activities}};
  }

  Document next_context(Rng& rng) override {
    const auto& weather = p_.weathers[rng.uniform_index(p_.weathers.size())];
    const auto user = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(p_.users)));
    return {{"weather", weather}, {"userid", user}};
  }

  Document respond(const Document& context, const Document& action, Rng& rng) override {
    auto goal = action.find(p_.goal_field);
    if (goal == action.end() || !goal->is_number()) {
      throw Error(Errc::schema_violation, "action lacks a numeric '" + p_.goal_field + "'");
    }
    RunningMean& achieved = achieved_[weather_user_label(context)];
    const double delta = goal->get<double>() - achieved.value();
    const double noise = rng.normal(0.0, p_.sigma);
    const double r =
        std::max(0.0, p_.alpha + p_.beta1 * delta + p_.beta2 * delta * delta + noise);
    achieved.update(r);
    return {{p_.reward_field, r}};
  }

  double reward_value(const Document& reward) const override {
    return reward.at(p_.reward_field).get<double>();
  }

  std::string action_label(const Document& action) const override {
    auto it = action.find("type");
    return it != action.end() && it->is_string() ? it->get<std::string>() : "goal";
  }

 private:
  GoalSettingParams p_;
  std::map<std::string, RunningMean> achieved_;
};

// Builds a store + directory holding `config` (and its children) for one run.
struct Harness {
  ThetaStore store;
  StaticDirectory directory;
  ExperimentId experiment = 0;
  std::shared_ptr<const Policy> policy;

  Harness(const PolicyConfig& config, const std::vector<PolicyConfig>& children) {
    const auto& registry = PolicyRegistry::builtin();
    ExperimentId id = 1;
    for (const auto& child : children) {
      store.register_experiment(id);
      directory.add(id, registry.compile(child));
      ++id;
    }
    experiment = id;
    for (ExperimentId nested : config.nested_ids) {
      if (nested >= experiment) {
        throw Error(Errc::invalid_config, "nested id " + std::to_string(nested) +
                                              " does not name a simulated child");
      }
    }
    store.register_experiment(experiment);
    policy = registry.compile(config);
    directory.add(experiment, policy);
  }
};

double parse_number(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_config, "bad number for " + what + ": '" + text + "'");
  }
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

}  // namespace

std::unique_ptr<Environment> make_environment(const BernoulliArmsParams& params) {
  return std::make_unique<BernoulliArms>(params);
}

std::unique_ptr<Environment> make_environment(const GoalSettingParams& params) {
  return std::make_unique<GoalSetting>(params);
}

std::unique_ptr<Environment> make_environment(const Document& spec) {
  try {
    const std::string kind = spec.at("kind").get<std::string>();
    if (kind == "bernoulli_arms") {
      BernoulliArmsParams p;
      p.probabilities = spec.at("arms").get<std::map<std::string, double>>();
      p.arm_field = spec.value("arm_field", p.arm_field);
      p.reward_field = spec.value("reward_field", p.reward_field);
      return make_environment(p);
    }
    if (kind == "goal_setting") {
      GoalSettingParams p;
      p.alpha = spec.value("alpha", p.alpha);
      p.beta1 = spec.value("beta1", p.beta1);
      p.beta2 = spec.value("beta2", p.beta2);
      p.sigma = spec.value("sigma", p.sigma);
      p.users = spec.value("users", p.users);
      p.weathers = spec.value("weathers", p.weathers);
      p.activities = spec.value("activity_map", p.activities);
      return make_environment(p);
    }
    throw Error(Errc::invalid_config, "unknown environment kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_config, std::string("bad environment: ") + e.what());
  }
}

Document parse_environment_spec(const std::string& text) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string tail = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (head == "bernoulli" || head == "bernoulli_arms") {
    Document arms = Document::object();
    const auto probs = split(tail, ',');
    if (probs.empty() || probs.size() > 26) {
      throw Error(Errc::invalid_config, "bernoulli needs between 1 and 26 probabilities");
    }
    for (std::size_t i = 0; i < probs.size(); ++i) {
      arms[std::string(1, static_cast<char>('A' + i))] = parse_number(probs[i], "arm probability");
    }
    return {{"kind", "bernoulli_arms"}, {"arms", arms}};
  }
  if (head == "goal" || head == "goal_setting") {
    Document spec = {{"kind", "goal_setting"}};
    for (const auto& item : split(tail, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw Error(Errc::invalid_config, "expected name=value: " + item);
      const std::string name = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      if (name == "users") {
        spec["users"] = static_cast<int>(parse_number(value, name));
      } else if (name == "weathers") {
        spec["weathers"] = split(value, '/');
      } else if (name == "alpha" || name == "beta1" || name == "beta2" || name == "sigma") {
        spec[name] = parse_number(value, name);
      } else {
        throw Error(Errc::invalid_config, "unknown goal environment parameter '" + name + "'");
      }
    }
    return spec;
  }
  throw Error(Errc::invalid_config, "unknown environment '" + head + "'");
}

std::uint64_t replication_seed(std::uint64_t seed, std::size_t replication) {
  return mix_seed(seed, replication);
}

Document to_document(const SimulationReport& report) {
  Document per_rep = Document::array();
  for (const auto& r : report.per_rep) {
    per_rep.push_back({{"replication", r.replication},
                       {"seed", r.seed},
                       {"R", r.cumulative_reward},
                       {"mean_reward", r.cumulative_reward / static_cast<double>(report.horizon)},
                       {"counts", r.action_counts}});
  }
  return {{"env", report.env},
          {"config", report.config},
          {"horizon", report.horizon},
          {"replications", report.replications},
          {"seed", report.seed},
          {"mean_R", report.mean_reward},
          {"sd_R", report.sd_reward},
          {"per_rep", std::move(per_rep)},
          {"freq", report.freq}};
}

SimulationReport run_simulation(const Document& env_spec, const PolicyConfig& config,
                                const SimulationOptions& options) {
  if (options.horizon < 1) throw Error(Errc::invalid_config, "horizon must be at least 1");
  if (options.replications < 1) throw Error(Errc::invalid_config, "need at least one replication");

  SimulationReport report;
  report.env = make_environment(env_spec)->describe();
  report.config = to_document(config);
  report.horizon = options.horizon;
  report.replications = options.replications;
  report.seed = options.seed;

  std::map<std::string, std::uint64_t> total_counts;
  for (std::size_t rep = 0; rep < options.replications; ++rep) {
    const std::uint64_t seed = replication_seed(options.seed, rep);
    Rng env_rng(mix_seed(seed, 0));
    Rng policy_rng(mix_seed(seed, 1));
    auto env = make_environment(env_spec);
    Harness harness(config, options.children);
    const PolicyScope scope{harness.experiment, &harness.store, &harness.directory, 0};

    ReplicationResult result{rep, seed, 0.0, {}};
    for (std::uint64_t t = 1; t <= options.horizon; ++t) {
      const Document context = env->next_context(env_rng);
      const DecisionOutcome outcome = harness.policy->decide(scope, context, policy_rng);
      const Document reward = env->respond(context, outcome.action, env_rng);
      const double value = env->reward_value(reward);
      harness.policy->summarize(scope, context, outcome.action, reward);

      result.cumulative_reward += value;
      ++result.action_counts[env->action_label(outcome.action)];
      if (auto nested = outcome.action.find(kNestedField); nested != outcome.action.end()) {
        const Document& head = nested->is_array() ? nested->front() : *nested;
        ++result.action_counts["child:" + head.dump()];
      }
      if (options.observer) {
        options.observer(SimulationStep{rep, t, &context, &outcome, &reward, value});
      }
    }
    if (options.on_finish) options.on_finish(rep, harness.store);
    for (const auto& [label, n] : result.action_counts) total_counts[label] += n;
    report.per_rep.push_back(std::move(result));
  }

  // Reduction in replication order keeps the report byte-stable.
  double sum = 0.0;
  for (const auto& r : report.per_rep) sum += r.cumulative_reward;
  report.mean_reward = sum / static_cast<double>(report.per_rep.size());
  if (report.per_rep.size() > 1) {
    double ss = 0.0;
    for (const auto& r : report.per_rep) {
      ss += (r.cumulative_reward - report.mean_reward) * (r.cumulative_reward - report.mean_reward);
    }
    report.sd_reward = std::sqrt(ss / static_cast<double>(report.per_rep.size() - 1));
  }
  const double decisions =
      static_cast<double>(options.horizon) * static_cast<double>(options.replications);
  for (const auto& [label, n] : total_counts) {
    report.freq[label] = static_cast<double>(n) / decisions;
  }
  return report;
}

std::vector<ThetaRecord> replay(const std::vector<InteractionRecord>& log, ExperimentId experiment,
                                const PolicyConfig& config,
                                const std::map<ExperimentId, PolicyConfig>& children) {
  ThetaStore store;
  StaticDirectory directory;
  const auto& registry = PolicyRegistry::builtin();
  for (const auto& [id, child] : children) {
    store.register_experiment(id);
    directory.add(id, registry.compile(child));
  }
  store.register_experiment(experiment);
  auto policy = registry.compile(config);
  directory.add(experiment, policy);

  std::vector<const InteractionRecord*> rewards;
  for (const auto& r : log) {
    if (r.kind == RecordKind::reward) rewards.push_back(&r);
  }
  std::sort(rewards.begin(), rewards.end(),
            [](const auto* a, const auto* b) { return a->t < b->t; });

  const PolicyScope scope{experiment, &store, &directory, 0};
  for (const auto* r : rewards) {
    if (!r->action || !r->reward) {
      throw Error(Errc::malformed_document, "reward record " + std::to_string(r->t) +
                                                " lacks its action or reward");
    }
    policy->summarize(scope, r->context, *r->action, *r->reward);
  }
  return store.records();
}

}  // namespace banditd
