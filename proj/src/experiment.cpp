#include "banditd/experiment.hpp"

#include <sys/random.h>

#include <algorithm>
#include <array>
#include <functional>
#include <set>
#include <sstream>

namespace banditd {

namespace fs = std::filesystem;

namespace {

constexpr const char* kRegistryFile = "experiments.json";
constexpr const char* kLogFile = "logs.ndjson";
constexpr const char* kLogFormat = "log-v1";

// Stand-in compared against when the id is unknown, so both failure paths do
// the same work.
constexpr std::string_view kDummyKey = "0000000000";

}  // namespace

std::string_view to_string(RecordKind kind) {
  switch (kind) {
    case RecordKind::decision: return "decision";
    case RecordKind::reward: return "reward";
    case RecordKind::custom: return "custom";
  }
  return "custom";
}

RecordKind record_kind_from_string(std::string_view text) {
  if (text == "decision") return RecordKind::decision;
  if (text == "reward") return RecordKind::reward;
  if (text == "custom") return RecordKind::custom;
  throw Error(Errc::malformed_document, "unknown record kind '" + std::string(text) + "'");
}

Document to_document(const Experiment& experiment, bool include_key) {
  Document doc = {{"id", experiment.id},
                  {"name", experiment.name},
                  {"config", to_document(experiment.config)},
                  {"created_at", experiment.created_at}};
  if (include_key) doc["key"] = experiment.key;
  return doc;
}

Document to_document(const InteractionRecord& record) {
  Document doc = {{"experiment_id", record.experiment_id},
                  {"t", record.t},
                  {"kind", to_string(record.kind)},
                  {"context", record.context},
                  {"logged_at", record.logged_at}};
  if (record.action) doc["action"] = *record.action;
  if (record.reward) doc["reward"] = *record.reward;
  if (record.hint) doc["hint"] = *record.hint;
  return doc;
}

InteractionRecord interaction_from_document(const Document& doc) {
  try {
    InteractionRecord r;
    r.experiment_id = doc.at("experiment_id").get<ExperimentId>();
    r.t = doc.at("t").get<std::uint64_t>();
    r.kind = record_kind_from_string(doc.at("kind").get<std::string>());
    r.context = doc.at("context");
    if (doc.contains("action")) r.action = doc["action"];
    if (doc.contains("reward")) r.reward = doc["reward"];
    if (doc.contains("hint")) r.hint = doc["hint"];
    r.logged_at = doc.at("logged_at").get<Timestamp>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed_document, std::string("bad log record: ") + e.what());
  }
}

std::string generate_experiment_key() {
  std::array<unsigned char, 5> bytes{};
  std::size_t filled = 0;
  while (filled < bytes.size()) {
    const ssize_t got = getrandom(bytes.data() + filled, bytes.size() - filled, 0);
    if (got < 0) throw Error(Errc::io_error, "getrandom failed");
    filled += static_cast<std::size_t>(got);
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string key;
  for (unsigned char b : bytes) {
    key.push_back(kHex[b >> 4]);
    key.push_back(kHex[b & 0xF]);
  }
  return key;
}

bool constant_time_equal(std::string_view a, std::string_view b) {
  const std::size_t n = std::max(a.size(), b.size());
  unsigned char diff = a.size() == b.size() ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char x = i < a.size() ? static_cast<unsigned char>(a[i]) : 0;
    const unsigned char y = i < b.size() ? static_cast<unsigned char>(b[i]) : 0;
    diff |= static_cast<unsigned char>(x ^ y);
  }
  return diff == 0;
}

ExperimentRegistry::ExperimentRegistry(ThetaStore& store)
    : ExperimentRegistry(store, Options{}) {}

ExperimentRegistry::ExperimentRegistry(ThetaStore& store, Options options)
    : store_(store), options_(std::move(options)) {
  if (!options_.policies) options_.policies = &PolicyRegistry::builtin();
  if (!options_.dir.empty()) {
    fs::create_directories(options_.dir);
    load();
  }
}

ExperimentRegistry::~ExperimentRegistry() = default;

void ExperimentRegistry::check_graph(ExperimentId id, const PolicyConfig& config) const {
  // Caller holds mutex_.  Checks the graph as it would be with `config`
  // installed at `id`.
  for (ExperimentId child : config.nested_ids) {
    if (child == id) {
      throw Error(Errc::cycle_detected, "experiment " + std::to_string(id) + " nests itself");
    }
    if (!entries_.contains(child)) {
      throw Error(Errc::invalid_config,
                  "nested experiment " + std::to_string(child) + " does not exist");
    }
  }

  auto children = [&](ExperimentId node) -> std::vector<ExperimentId> {
    if (node == id) return config.nested_ids;
    auto it = entries_.find(node);
    return it == entries_.end() ? std::vector<ExperimentId>{}
                                : it->second->experiment.config.nested_ids;
  };

  // Longest delegation chain reachable from each node, with cycle detection.
  enum class Mark { none, active, done };
  std::map<ExperimentId, Mark> marks;
  std::map<ExperimentId, int> depth;
  std::function<int(ExperimentId)> visit = [&](ExperimentId node) -> int {
    Mark& m = marks[node];
    if (m == Mark::active) {
      throw Error(Errc::cycle_detected,
                  "nesting cycle through experiment " + std::to_string(node));
    }
    if (m == Mark::done) return depth[node];
    m = Mark::active;
    int longest = 0;
    for (ExperimentId child : children(node)) longest = std::max(longest, 1 + visit(child));
    marks[node] = Mark::done;
    depth[node] = longest;
    return longest;
  };

  std::set<ExperimentId> nodes{id};
  for (const auto& [other, _] : entries_) nodes.insert(other);
  for (ExperimentId node : nodes) {
    if (visit(node) > kMaxNestingDepth) {
      throw Error(Errc::invalid_config,
                  "nesting deeper than " + std::to_string(kMaxNestingDepth) + " levels");
    }
  }
}

Experiment ExperimentRegistry::create(std::string name, const PolicyConfig& config) {
  if (name.empty()) throw Error(Errc::invalid_config, "experiment name must be non-empty");
  auto policy = options_.policies->compile(config);

  std::unique_lock lock(mutex_);
  const ExperimentId id = next_id_;
  check_graph(id, config);

  auto entry = std::make_shared<Entry>();
  entry->experiment = Experiment{id, generate_experiment_key(), std::move(name), config,
                                 now_micros()};
  entry->policy = std::move(policy);
  entries_.emplace(id, entry);
  ++next_id_;
  store_.register_experiment(id);
  try {
    persist_registry();
  } catch (...) {
    entries_.erase(id);
    --next_id_;
    store_.unregister_experiment(id);
    throw;
  }
  return entry->experiment;
}

Experiment ExperimentRegistry::update(ExperimentId id, const PolicyConfig& config) {
  auto policy = options_.policies->compile(config);
  std::unique_lock lock(mutex_);
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  }
  check_graph(id, config);
  auto replacement = std::make_shared<Entry>(*it->second);
  replacement->experiment.config = config;
  replacement->policy = std::move(policy);
  auto previous = std::exchange(it->second, replacement);
  try {
    persist_registry();
  } catch (...) {
    it->second = previous;
    throw;
  }
  return replacement->experiment;
}

void ExperimentRegistry::remove(ExperimentId id) {
  std::unique_lock lock(mutex_);
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  }
  for (const auto& [other, e] : entries_) {
    const auto& ids = e->experiment.config.nested_ids;
    if (std::find(ids.begin(), ids.end(), id) != ids.end()) {
      throw Error(Errc::in_use, "experiment " + std::to_string(id) + " is nested by " +
                                    std::to_string(other));
    }
  }
  entries_.erase(it);
  persist_registry();
  store_.unregister_experiment(id);
  if (!options_.dir.empty()) append_log_line({{"op", "drop"}, {"experiment_id", id}});
}

std::shared_ptr<const ExperimentRegistry::Entry> ExperimentRegistry::entry(ExperimentId id) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : it->second;
}

std::optional<Experiment> ExperimentRegistry::find(ExperimentId id) const {
  auto e = entry(id);
  if (!e) return std::nullopt;
  return e->experiment;
}

std::vector<Experiment> ExperimentRegistry::list() const {
  std::shared_lock lock(mutex_);
  std::vector<Experiment> out;
  for (const auto& [id, e] : entries_) out.push_back(e->experiment);
  return out;
}

Experiment ExperimentRegistry::authenticate(ExperimentId id, std::string_view key) const {
  auto e = entry(id);
  const bool match = constant_time_equal(e ? std::string_view(e->experiment.key) : kDummyKey, key);
  if (!e) throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  if (!match) throw Error(Errc::auth_failure, "wrong key for experiment " + std::to_string(id));
  return e->experiment;
}

std::shared_ptr<const Policy> ExperimentRegistry::policy_of(ExperimentId id) const {
  auto e = entry(id);
  return e ? e->policy : nullptr;
}

InteractionRecord ExperimentRegistry::append_log(ExperimentId id, RecordKind kind,
                                                 Document context,
                                                 std::optional<Document> action,
                                                 std::optional<Document> reward,
                                                 std::optional<Document> hint) {
  auto e = entry(id);
  if (!e) throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  std::lock_guard lock(e->log->mutex);
  InteractionRecord record{id,
                           e->log->records.size() + 1,
                           kind,
                           std::move(context),
                           std::move(action),
                           std::move(reward),
                           std::move(hint),
                           now_micros()};
  if (!options_.dir.empty()) append_log_line(to_document(record));
  e->log->records.push_back(record);
  return record;
}

std::vector<InteractionRecord> ExperimentRegistry::get_logs(ExperimentId id, std::size_t limit,
                                                            std::size_t offset) const {
  auto e = entry(id);
  if (!e) throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  limit = std::min(limit, kMaxLogPage);
  std::lock_guard lock(e->log->mutex);
  const auto& records = e->log->records;
  std::vector<InteractionRecord> out;
  if (offset >= records.size()) return out;
  const std::size_t newest = records.size() - offset;  // exclusive upper index
  const std::size_t count = std::min(limit, newest);
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(records[newest - 1 - i]);
  return out;
}

std::size_t ExperimentRegistry::log_size(ExperimentId id) const {
  auto e = entry(id);
  if (!e) throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  std::lock_guard lock(e->log->mutex);
  return e->log->records.size();
}

void ExperimentRegistry::persist_registry() const {
  if (options_.dir.empty()) return;
  Document doc = {{"format", "experiments-v1"}, {"next_id", next_id_}};
  Document list = Document::array();
  for (const auto& [id, e] : entries_) list.push_back(to_document(e->experiment, true));
  doc["experiments"] = std::move(list);

  const fs::path path = options_.dir / kRegistryFile;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << doc.dump(2) << '\n';
    out.flush();
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ExperimentRegistry::append_log_line(const Document& line) {
  std::lock_guard lock(log_file_mutex_);
  log_file_ << line.dump() << '\n' << std::flush;
  if (!log_file_) throw Error(Errc::io_error, "log append failed");
}

void ExperimentRegistry::load() {
  const fs::path registry_path = options_.dir / kRegistryFile;
  if (fs::exists(registry_path)) {
    std::ifstream in(registry_path, std::ios::binary);
    Document doc = Document::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object() || doc.value("format", "") != "experiments-v1") {
      throw Error(Errc::malformed_document, "corrupt " + registry_path.string());
    }
    try {
      next_id_ = doc.at("next_id").get<ExperimentId>();
      for (const auto& item : doc.at("experiments")) {
        auto e = std::make_shared<Entry>();
        e->experiment.id = item.at("id").get<ExperimentId>();
        e->experiment.key = item.at("key").get<std::string>();
        e->experiment.name = item.at("name").get<std::string>();
        e->experiment.config = policy_config_from_document(item.at("config"));
        e->experiment.created_at = item.at("created_at").get<Timestamp>();
        e->policy = options_.policies->compile(e->experiment.config);
        store_.register_experiment(e->experiment.id);
        entries_.emplace(e->experiment.id, std::move(e));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw Error(Errc::malformed_document, std::string("corrupt registry: ") + ex.what());
    }
  }

  const fs::path log_path = options_.dir / kLogFile;
  if (fs::exists(log_path)) {
    std::ifstream in(log_path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::istringstream lines(content);
    std::string line;
    std::size_t consumed = 0;
    bool saw_header = false;
    while (std::getline(lines, line)) {
      consumed += line.size() + 1;
      // Torn final write after a crash.
      if (consumed > content.size()) break;
      Document doc = Document::parse(line, nullptr, false);
      if (doc.is_discarded()) throw Error(Errc::malformed_document, "corrupt log file");
      if (!saw_header) {
        if (doc.value("format", "") != kLogFormat) {
          throw Error(Errc::malformed_document, "missing log-v1 header");
        }
        saw_header = true;
        continue;
      }
      if (doc.value("op", "") == "drop") continue;
      InteractionRecord record = interaction_from_document(doc);
      auto it = entries_.find(record.experiment_id);
      if (it == entries_.end()) continue;  // experiment since deleted
      auto& records = it->second->log->records;
      if (record.t != records.size() + 1) {
        throw Error(Errc::malformed_document, "log sequence gap for experiment " +
                                                  std::to_string(record.experiment_id));
      }
      records.push_back(std::move(record));
    }
    if (!content.empty() && content.back() != '\n') {
      // Drop the torn tail so later appends start on a fresh line.
      const auto keep = content.rfind('\n');
      fs::resize_file(log_path, keep == std::string::npos ? 0 : keep + 1);
    }
  }

  log_file_.open(log_path, std::ios::binary | std::ios::app);
  if (!log_file_) throw Error(Errc::io_error, "cannot open " + log_path.string());
  if (fs::file_size(log_path) == 0) {
    log_file_ << Document{{"format", kLogFormat}}.dump() << '\n' << std::flush;
  }
}

}  // namespace banditd
