#include "banditd/theta_store.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace banditd {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "theta-v1";
constexpr const char* kSnapshotFile = "theta.snapshot";
constexpr const char* kWalFile = "theta.wal";

Document header() { return {{"format", kFormat}}; }

bool is_header(const Document& doc) {
  return doc.is_object() && doc.size() == 1 && doc.contains("format") &&
         doc["format"] == kFormat;
}

std::vector<ThetaRecord> read_snapshot_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open snapshot " + path.string());

  std::vector<ThetaRecord> records;
  std::string line;
  bool saw_header = false;
  std::optional<std::uint64_t> trailer;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trailer) throw Error(Errc::malformed_document, "data after snapshot trailer");
    Document doc = Document::parse(line, nullptr, false);
    if (doc.is_discarded()) {
      throw Error(Errc::malformed_document,
                  "snapshot line " + std::to_string(lineno) + " is not a document");
    }
    if (!saw_header) {
      if (!is_header(doc)) throw Error(Errc::malformed_document, "missing theta-v1 header");
      saw_header = true;
      continue;
    }
    if (doc.is_object() && doc.size() == 1 && doc.contains("records")) {
      trailer = doc["records"].get<std::uint64_t>();
      continue;
    }
    records.push_back(record_from_document(doc));
  }
  if (in.bad()) throw Error(Errc::io_error, "read failure on " + path.string());
  if (!saw_header) throw Error(Errc::malformed_document, "empty snapshot file");
  if (!trailer || *trailer != records.size()) {
    throw Error(Errc::malformed_document, "snapshot is truncated");
  }
  return records;
}

}  // namespace

Timestamp now_micros() {
  using namespace std::chrono;
  return duration_cast<microseconds>(system_clock::now().time_since_epoch()).count();
}

Document to_document(const ThetaRecord& record) {
  return {{"experiment_id", record.key.experiment_id},
          {"name", record.key.name},
          {"key", record.key.key},
          {"value", record.key.value.value_or("")},
          {"state", record.state},
          {"updated_at", record.updated_at}};
}

ThetaRecord record_from_document(const Document& doc) {
  try {
    ThetaRecord r;
    r.key.experiment_id = doc.at("experiment_id").get<ExperimentId>();
    r.key.name = doc.at("name").get<std::string>();
    r.key.key = doc.at("key").get<std::string>();
    r.key.value = doc.at("value").get<std::string>();
    r.state = doc.at("state");
    r.updated_at = doc.at("updated_at").get<Timestamp>();
    deserialize(r.state);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed_document, std::string("bad theta record: ") + e.what());
  }
}

std::size_t ThetaStore::GroupHash::operator()(const GroupKey& g) const noexcept {
  std::size_t h = std::hash<ExperimentId>{}(g.experiment_id);
  h ^= std::hash<std::string>{}(g.name) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= std::hash<std::string>{}(g.key) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

ThetaStore::ThetaStore() : ThetaStore(Options{}) {}

ThetaStore::ThetaStore(Options options) : options_(std::move(options)) {
  if (options_.compact_every == 0) options_.compact_every = 1;
  if (!options_.dir.empty()) {
    fs::create_directories(options_.dir);
    load_from_disk();
  }
}

ThetaStore::~ThetaStore() = default;

std::size_t ThetaStore::shard_of(const GroupKey& g) const { return GroupHash{}(g) % kShards; }

void ThetaStore::register_experiment(ExperimentId id) {
  std::unique_lock lock(experiments_mutex_);
  experiments_.insert(id);
}

void ThetaStore::unregister_experiment(ExperimentId id) {
  reset(id);
  std::unique_lock lock(experiments_mutex_);
  experiments_.erase(id);
}

bool ThetaStore::has_experiment(ExperimentId id) const {
  std::shared_lock lock(experiments_mutex_);
  return experiments_.contains(id);
}

void ThetaStore::check_experiment(ExperimentId id) const {
  if (!has_experiment(id)) {
    throw Error(Errc::unknown_experiment, "unknown experiment " + std::to_string(id));
  }
}

void ThetaStore::check_value_key(const ThetaKey& key) {
  if (key.name.empty() || key.key.empty()) {
    throw Error(Errc::invalid_key, "theta name and key must be non-empty");
  }
  if (!key.value) throw Error(Errc::invalid_key, "theta key needs a value label");
}

std::optional<Document> ThetaStore::get(const ThetaKey& key) const {
  check_value_key(key);
  check_experiment(key.experiment_id);
  GroupKey g{key.experiment_id, key.name, key.key};
  const Shard& shard = shards_[shard_of(g)];
  std::shared_lock lock(shard.mutex);
  auto git = shard.groups.find(g);
  if (git == shard.groups.end()) return std::nullopt;
  auto it = git->second.find(*key.value);
  if (it == git->second.end()) return std::nullopt;
  return it->second.state;
}

std::map<std::string, Document> ThetaStore::get_all(ExperimentId id, const std::string& name,
                                                    const std::string& key) const {
  check_experiment(id);
  GroupKey g{id, name, key};
  const Shard& shard = shards_[shard_of(g)];
  std::shared_lock lock(shard.mutex);
  std::map<std::string, Document> out;
  auto git = shard.groups.find(g);
  if (git == shard.groups.end()) return out;
  for (const auto& [label, entry] : git->second) out.emplace(label, entry.state);
  return out;
}

void ThetaStore::put_locked(Shard& shard, const ThetaKey& key, Document state, Timestamp at) {
  GroupKey g{key.experiment_id, key.name, key.key};
  shard.groups[g].insert_or_assign(*key.value, Entry{std::move(state), at});
}

void ThetaStore::set(const ThetaKey& key, Document state) {
  check_value_key(key);
  check_experiment(key.experiment_id);
  deserialize(state);
  {
    GroupKey g{key.experiment_id, key.name, key.key};
    Shard& shard = shards_[shard_of(g)];
    std::unique_lock lock(shard.mutex);
    const Timestamp at = now_micros();
    if (!options_.dir.empty()) {
      Document line = to_document(ThetaRecord{key, state, at});
      line["op"] = "set";
      append_wal(line);
    }
    put_locked(shard, key, std::move(state), at);
  }
  maybe_compact();
}

Document ThetaStore::atomic_update(const ThetaKey& key, const Transform& transform) {
  std::vector<Document> out = atomic_update(
      std::span<const ThetaKey>(&key, 1),
      [&](const std::vector<std::optional<Document>>& in) {
        return std::vector<Document>{transform(in.front())};
      });
  return std::move(out.front());
}

std::vector<Document> ThetaStore::atomic_update(std::span<const ThetaKey> keys,
                                                const MultiTransform& transform) {
  for (const auto& k : keys) {
    check_value_key(k);
    check_experiment(k.experiment_id);
  }

  std::vector<std::size_t> shard_ids;
  for (const auto& k : keys) shard_ids.push_back(shard_of({k.experiment_id, k.name, k.key}));
  std::vector<std::size_t> lock_order = shard_ids;
  std::sort(lock_order.begin(), lock_order.end());
  lock_order.erase(std::unique(lock_order.begin(), lock_order.end()), lock_order.end());

  std::vector<Document> updated;
  {
    std::vector<std::unique_lock<std::shared_mutex>> locks;
    locks.reserve(lock_order.size());
    for (std::size_t s : lock_order) locks.emplace_back(shards_[s].mutex);

    std::vector<std::optional<Document>> current;
    current.reserve(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const Shard& shard = shards_[shard_ids[i]];
      auto git = shard.groups.find({keys[i].experiment_id, keys[i].name, keys[i].key});
      std::optional<Document> doc;
      if (git != shard.groups.end()) {
        auto it = git->second.find(*keys[i].value);
        if (it != git->second.end()) doc = it->second.state;
      }
      current.push_back(std::move(doc));
    }

    updated = transform(current);
    if (updated.size() != keys.size()) {
      throw Error(Errc::invalid_key, "transform returned the wrong number of documents");
    }
    for (const auto& doc : updated) deserialize(doc);

    const Timestamp at = now_micros();
    if (!options_.dir.empty()) {
      // One line per update, so a crash never leaves half of a multi-key fold.
      Document line;
      if (keys.size() == 1) {
        line = to_document(ThetaRecord{keys[0], updated[0], at});
        line["op"] = "set";
      } else {
        Document batch = Document::array();
        for (std::size_t i = 0; i < keys.size(); ++i) {
          batch.push_back(to_document(ThetaRecord{keys[i], updated[i], at}));
        }
        line = {{"op", "batch"}, {"records", std::move(batch)}};
      }
      append_wal(line);
    }
    for (std::size_t i = 0; i < keys.size(); ++i) {
      put_locked(shards_[shard_ids[i]], keys[i], updated[i], at);
    }
  }
  maybe_compact();
  return updated;
}

void ThetaStore::reset(ExperimentId id) {
  check_experiment(id);
  std::vector<std::unique_lock<std::shared_mutex>> locks;
  for (auto& shard : shards_) locks.emplace_back(shard.mutex);
  if (!options_.dir.empty()) append_wal({{"op", "reset"}, {"experiment_id", id}});
  for (auto& shard : shards_) {
    std::erase_if(shard.groups, [&](const auto& kv) { return kv.first.experiment_id == id; });
  }
}

std::vector<ThetaRecord> ThetaStore::records_locked(std::optional<ExperimentId> id) const {
  std::vector<ThetaRecord> out;
  for (const auto& shard : shards_) {
    for (const auto& [g, group] : shard.groups) {
      if (id && g.experiment_id != *id) continue;
      for (const auto& [label, entry] : group) {
        out.push_back({ThetaKey{g.experiment_id, g.name, g.key, label}, entry.state,
                       entry.updated_at});
      }
    }
  }
  std::sort(out.begin(), out.end(),
            [](const ThetaRecord& a, const ThetaRecord& b) { return a.key < b.key; });
  return out;
}

std::vector<ThetaRecord> ThetaStore::records(std::optional<ExperimentId> id) const {
  std::vector<std::shared_lock<std::shared_mutex>> locks;
  for (const auto& shard : shards_) locks.emplace_back(shard.mutex);
  return records_locked(id);
}

std::size_t ThetaStore::size() const {
  std::size_t n = 0;
  for (const auto& shard : shards_) {
    std::shared_lock lock(shard.mutex);
    for (const auto& [g, group] : shard.groups) n += group.size();
  }
  return n;
}

void ThetaStore::write_snapshot_locked(const fs::path& path) const {
  const std::vector<ThetaRecord> all = records_locked(std::nullopt);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
    out << header().dump() << '\n';
    for (const auto& r : all) out << to_document(r).dump() << '\n';
    out << Document{{"records", all.size()}}.dump() << '\n';
    out.flush();
    if (!out) throw Error(Errc::io_error, "write failure on " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ThetaStore::snapshot(const fs::path& path) const {
  std::vector<std::shared_lock<std::shared_mutex>> locks;
  for (const auto& shard : shards_) locks.emplace_back(shard.mutex);
  write_snapshot_locked(path);
}

void ThetaStore::restore(const fs::path& path) {
  std::vector<ThetaRecord> loaded = read_snapshot_file(path);

  std::vector<std::unique_lock<std::shared_mutex>> locks;
  for (auto& shard : shards_) locks.emplace_back(shard.mutex);
  for (auto& shard : shards_) shard.groups.clear();
  {
    std::unique_lock lock(experiments_mutex_);
    for (const auto& r : loaded) experiments_.insert(r.key.experiment_id);
  }
  for (auto& r : loaded) {
    GroupKey g{r.key.experiment_id, r.key.name, r.key.key};
    shards_[shard_of(g)].groups[g].insert_or_assign(*r.key.value,
                                                    Entry{std::move(r.state), r.updated_at});
  }
  if (!options_.dir.empty()) {
    std::lock_guard wal_lock(wal_mutex_);
    write_snapshot_locked(options_.dir / kSnapshotFile);
    wal_.close();
    wal_.open(options_.dir / kWalFile, std::ios::binary | std::ios::trunc);
    wal_ << header().dump() << '\n' << std::flush;
    writes_since_compact_ = 0;
  }
}

void ThetaStore::append_wal(const Document& line) {
  std::lock_guard lock(wal_mutex_);
  wal_ << line.dump() << '\n' << std::flush;
  if (!wal_) throw Error(Errc::io_error, "write-ahead log append failed");
  ++writes_since_compact_;
}

void ThetaStore::maybe_compact() {
  if (!options_.dir.empty() && writes_since_compact_.load() >= options_.compact_every) {
    compact();
  }
}

void ThetaStore::compact() {
  if (options_.dir.empty()) return;
  std::vector<std::shared_lock<std::shared_mutex>> locks;
  for (const auto& shard : shards_) locks.emplace_back(shard.mutex);
  std::lock_guard wal_lock(wal_mutex_);
  // Another thread may have compacted while we waited for the locks.
  if (writes_since_compact_.load() == 0 && fs::exists(options_.dir / kSnapshotFile)) return;
  write_snapshot_locked(options_.dir / kSnapshotFile);
  wal_.close();
  wal_.open(options_.dir / kWalFile, std::ios::binary | std::ios::trunc);
  wal_ << header().dump() << '\n' << std::flush;
  if (!wal_) throw Error(Errc::io_error, "cannot reopen write-ahead log");
  writes_since_compact_ = 0;
}

void ThetaStore::load_from_disk() {
  const fs::path snap = options_.dir / kSnapshotFile;
  const fs::path wal = options_.dir / kWalFile;

  auto put = [&](ThetaRecord r) {
    experiments_.insert(r.key.experiment_id);
    GroupKey g{r.key.experiment_id, r.key.name, r.key.key};
    shards_[shard_of(g)].groups[g].insert_or_assign(*r.key.value,
                                                    Entry{std::move(r.state), r.updated_at});
  };

  if (fs::exists(snap)) {
    for (auto& r : read_snapshot_file(snap)) put(std::move(r));
  }

  if (fs::exists(wal)) {
    std::ifstream in(wal, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::istringstream lines(content);
    std::string line;
    bool saw_header = false;
    std::size_t consumed = 0;
    while (std::getline(lines, line)) {
      consumed += line.size() + 1;
      // A final line without its newline is a write torn by a crash.
      if (consumed > content.size()) break;
      Document doc = Document::parse(line, nullptr, false);
      if (doc.is_discarded()) throw Error(Errc::malformed_document, "corrupt write-ahead log");
      if (!saw_header) {
        if (!is_header(doc)) throw Error(Errc::malformed_document, "missing theta-v1 header");
        saw_header = true;
        continue;
      }
      const std::string op = doc.value("op", "");
      if (op == "set") {
        put(record_from_document(doc));
      } else if (op == "batch") {
        for (const auto& r : doc.at("records")) put(record_from_document(r));
      } else if (op == "reset") {
        const auto id = doc.at("experiment_id").get<ExperimentId>();
        for (auto& shard : shards_) {
          std::erase_if(shard.groups,
                        [&](const auto& kv) { return kv.first.experiment_id == id; });
        }
      } else {
        throw Error(Errc::malformed_document, "unknown write-ahead log op '" + op + "'");
      }
    }
  }

  write_snapshot_locked(snap);
  wal_.open(wal, std::ios::binary | std::ios::trunc);
  wal_ << header().dump() << '\n' << std::flush;
  if (!wal_) throw Error(Errc::io_error, "cannot open write-ahead log " + wal.string());
}

}  // namespace banditd
