#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "banditd/policy.hpp"
#include "banditd/theta_store.hpp"

namespace banditd {

struct Experiment {
  ExperimentId id = 0;
  // 10 lowercase hex characters.
  std::string key;
  std::string name;
  PolicyConfig config;
  Timestamp created_at = 0;

  bool operator==(const Experiment&) const = default;
};

Document to_document(const Experiment& experiment, bool include_key);

enum class RecordKind { decision, reward, custom };

std::string_view to_string(RecordKind kind);
RecordKind record_kind_from_string(std::string_view text);

struct InteractionRecord {
  ExperimentId experiment_id = 0;
  // Per-experiment sequence number: 1, 2, 3, ... without gaps.
  std::uint64_t t = 0;
  RecordKind kind = RecordKind::decision;
  Document context = Document::object();
  std::optional<Document> action;
  std::optional<Document> reward;
  // Policy diagnostics for decisions (e.g. the sampled values).
  std::optional<Document> hint;
  Timestamp logged_at = 0;

  bool operator==(const InteractionRecord&) const = default;
};

Document to_document(const InteractionRecord& record);
InteractionRecord interaction_from_document(const Document& doc);

std::string generate_experiment_key();
// Compares without an early exit on the first differing byte.
bool constant_time_equal(std::string_view a, std::string_view b);

// Experiment lifecycle, authentication and the per-experiment logbook.
//
// Registrations are persisted to `experiments.json` (rewritten atomically,
// including the id counter so ids are never reused) and log records to the
// append-only `logs.ndjson`.  The registry doubles as the directory through
// which nested policies find their children.
class ExperimentRegistry final : public PolicyDirectory {
 public:
  static constexpr std::size_t kMaxLogPage = 10'000;

  struct Options {
    // Empty means volatile.
    std::filesystem::path dir;
    const PolicyRegistry* policies = &PolicyRegistry::builtin();
  };

  ExperimentRegistry(ThetaStore& store, Options options);
  explicit ExperimentRegistry(ThetaStore& store);
  ~ExperimentRegistry() override;

  Experiment create(std::string name, const PolicyConfig& config);
  // Replaces the policy of an existing experiment; theta is kept.
  Experiment update(ExperimentId id, const PolicyConfig& config);
  // Refuses with in_use while another experiment nests this one.
  void remove(ExperimentId id);

  std::optional<Experiment> find(ExperimentId id) const;
  std::vector<Experiment> list() const;
  // unknown_experiment and auth_failure are distinct here; the HTTP layer
  // folds them into one response.
  Experiment authenticate(ExperimentId id, std::string_view key) const;

  std::shared_ptr<const Policy> policy_of(ExperimentId id) const override;

  InteractionRecord append_log(ExperimentId id, RecordKind kind, Document context,
                               std::optional<Document> action, std::optional<Document> reward,
                               std::optional<Document> hint = std::nullopt);
  // Newest first.  offset counts from the newest record.
  std::vector<InteractionRecord> get_logs(ExperimentId id, std::size_t limit,
                                          std::size_t offset = 0) const;
  std::size_t log_size(ExperimentId id) const;

  ThetaStore& store() const { return store_; }

 private:
  struct LogBook {
    mutable std::mutex mutex;
    std::vector<InteractionRecord> records;
  };
  struct Entry {
    Experiment experiment;
    std::shared_ptr<const Policy> policy;
    std::shared_ptr<LogBook> log = std::make_shared<LogBook>();
  };

  void check_graph(ExperimentId id, const PolicyConfig& config) const;
  std::shared_ptr<const Entry> entry(ExperimentId id) const;
  void persist_registry() const;
  void load();
  void append_log_line(const Document& line);

  ThetaStore& store_;
  Options options_;

  mutable std::shared_mutex mutex_;
  std::map<ExperimentId, std::shared_ptr<Entry>> entries_;
  ExperimentId next_id_ = 1;

  std::mutex log_file_mutex_;
  std::ofstream log_file_;
};

}  // namespace banditd
