#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "banditd/experiment.hpp"
#include "banditd/policy.hpp"
#include "banditd/random.hpp"

namespace banditd {

// Synthetic reward-generating process.  Environments never see theta and
// policies never see the latent parameters.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual Document describe() const = 0;
  virtual Document next_context(Rng& rng) = 0;
  // Realised reward document for the chosen action.
  virtual Document respond(const Document& context, const Document& action, Rng& rng) = 0;
  // The scalar r_t that enters R(T).
  virtual double reward_value(const Document& reward) const = 0;
  // Label under which the action is counted in the frequency table.
  virtual std::string action_label(const Document& action) const = 0;
};

// Independent Bernoulli arms.  Context is empty, the action names the arm in
// `arm_field` and the reward is {"click": 0|1}.
struct BernoulliArmsParams {
  std::map<std::string, double> probabilities;
  std::string arm_field = "version";
  std::string reward_field = "click";
};

// Goal-setting users: achieved distance
//   r = max(0, alpha + beta1*delta + beta2*delta^2 + eps),  eps ~ N(0, sigma^2)
// where delta = goal - the mean distance the user has achieved so far in that
// weather (tracked by the environment itself).
struct GoalSettingParams {
  double alpha = 5.0;
  double beta1 = 2.0;
  double beta2 = -1.0;
  double sigma = 0.5;
  int users = 1;
  // Drawn uniformly per step.
  std::vector<std::string> weathers{"sunny"};
  std::map<std::string, std::string> activities{{"sunny", "run"}, {"rainy", "swim"}};
  std::string goal_field = "distance";
  std::string reward_field = "km";
};

std::unique_ptr<Environment> make_environment(const BernoulliArmsParams& params);
std::unique_ptr<Environment> make_environment(const GoalSettingParams& params);
// {"kind": "bernoulli_arms", "arms": {...}} or {"kind": "goal_setting", ...}.
std::unique_ptr<Environment> make_environment(const Document& spec);
// Compact command-line form: "bernoulli:0.5,0.6" (arms A, B, ...) or
// "goal:alpha=5,beta1=2,beta2=-1,sigma=0.5,users=1".
Document parse_environment_spec(const std::string& text);

struct SimulationStep {
  std::size_t replication = 0;
  std::uint64_t t = 0;
  const Document* context = nullptr;
  const DecisionOutcome* outcome = nullptr;
  const Document* reward = nullptr;
  double reward_value = 0.0;
};

struct SimulationOptions {
  std::uint64_t horizon = 1;
  std::uint64_t seed = 0;
  std::size_t replications = 1;
  // Child experiments for nested configs, installed as ids 1..k in order;
  // the simulated experiment itself gets id k+1.
  std::vector<PolicyConfig> children;
  std::function<void(const SimulationStep&)> observer;
  // Called with each replication's final store before it is discarded.
  std::function<void(std::size_t replication, const ThetaStore&)> on_finish;
};

struct ReplicationResult {
  std::size_t replication = 0;
  std::uint64_t seed = 0;
  double cumulative_reward = 0.0;
  std::map<std::string, std::uint64_t> action_counts;
};

struct SimulationReport {
  Document env;
  Document config;
  std::uint64_t horizon = 0;
  std::size_t replications = 0;
  std::uint64_t seed = 0;
  double mean_reward = 0.0;  // mean over replications of R(T)
  double sd_reward = 0.0;    // sample standard deviation of R(T)
  std::vector<ReplicationResult> per_rep;
  // Fraction of all decisions per action label.
  std::map<std::string, double> freq;
};

Document to_document(const SimulationReport& report);

// Seed of replication r.
std::uint64_t replication_seed(std::uint64_t seed, std::size_t replication);

// Runs decide -> respond -> summarize for t = 1..horizon in every
// replication, each with a fresh volatile store, through the production
// policy code.
SimulationReport run_simulation(const Document& env_spec, const PolicyConfig& config,
                                const SimulationOptions& options);

// Folds the reward records of a log (any order; sorted by t) through the
// summary step on a fresh store and returns the resulting theta.  `children`
// maps nested experiment ids to their configs.
std::vector<ThetaRecord> replay(const std::vector<InteractionRecord>& log,
                                ExperimentId experiment, const PolicyConfig& config,
                                const std::map<ExperimentId, PolicyConfig>& children = {});

// Fixed id -> policy table for running policies outside a registry.
class StaticDirectory final : public PolicyDirectory {
 public:
  void add(ExperimentId id, std::shared_ptr<const Policy> policy) {
    policies_[id] = std::move(policy);
  }
  std::shared_ptr<const Policy> policy_of(ExperimentId id) const override {
    auto it = policies_.find(id);
    return it == policies_.end() ? nullptr : it->second;
  }

 private:
  std::map<ExperimentId, std::shared_ptr<const Policy>> policies_;
};

}  // namespace banditd
