#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "banditd/stats.hpp"

namespace banditd {

using ExperimentId = std::uint64_t;

// Microseconds since the Unix epoch.
using Timestamp = std::int64_t;
Timestamp now_micros();

// Addresses one summary document: (name, key, value) inside an experiment.
// `value` may only be omitted when listing a whole family.
struct ThetaKey {
  ExperimentId experiment_id = 0;
  std::string name = "default";
  std::string key;
  std::optional<std::string> value;

  auto operator<=>(const ThetaKey&) const = default;
};

struct ThetaRecord {
  ThetaKey key;
  Document state;
  Timestamp updated_at = 0;

  bool operator==(const ThetaRecord&) const = default;
};

Document to_document(const ThetaRecord& record);
ThetaRecord record_from_document(const Document& doc);

// In-memory summary store with an append-only write-ahead log that is
// periodically compacted into a snapshot.
//
// Records sharing (experiment, name, key) live in the same shard, so listing
// a family and updating one of its members cost O(family size), independent
// of the total number of keys.  Updates to a key are serialised by the shard
// lock; readers take the lock shared and never see a torn document.
//
// On-disk layout under `dir`: `theta.snapshot` and `theta.wal`, both
// line-delimited canonical documents headed by {"format":"theta-v1"}.
class ThetaStore {
 public:
  struct Options {
    // Empty means volatile: nothing is written to disk.
    std::filesystem::path dir;
    std::size_t compact_every = 10'000;
  };

  using Transform = std::function<Document(const std::optional<Document>&)>;
  using MultiTransform =
      std::function<std::vector<Document>(const std::vector<std::optional<Document>>&)>;

  ThetaStore();
  explicit ThetaStore(Options options);
  ~ThetaStore();

  ThetaStore(const ThetaStore&) = delete;
  ThetaStore& operator=(const ThetaStore&) = delete;

  // Known experiment namespaces.  Operations on unregistered ids fail with
  // unknown_experiment.
  void register_experiment(ExperimentId id);
  void unregister_experiment(ExperimentId id);
  bool has_experiment(ExperimentId id) const;

  std::optional<Document> get(const ThetaKey& key) const;
  // Every record of the family keyed by its value label.
  std::map<std::string, Document> get_all(ExperimentId id, const std::string& name,
                                          const std::string& key) const;
  void set(const ThetaKey& key, Document state);

  // get -> transform -> set with no other writer on the key in between.  The
  // stored value is untouched when the transform throws.
  Document atomic_update(const ThetaKey& key, const Transform& transform);
  // Same contract across several keys at once; locks are taken in a fixed
  // global order.
  std::vector<Document> atomic_update(std::span<const ThetaKey> keys,
                                      const MultiTransform& transform);

  void reset(ExperimentId id);

  // Sorted by key.  With an id, only that experiment's records.
  std::vector<ThetaRecord> records(std::optional<ExperimentId> id = std::nullopt) const;
  std::size_t size() const;

  // Writes a consistent point-in-time image of every record.
  void snapshot(const std::filesystem::path& path) const;
  // Replaces the whole content with the file's; the store is untouched when
  // the file is unreadable or malformed.
  void restore(const std::filesystem::path& path);
  // Folds the write-ahead log into the snapshot.  No-op when volatile.
  void compact();

 private:
  struct GroupKey {
    ExperimentId experiment_id;
    std::string name;
    std::string key;
    bool operator==(const GroupKey&) const = default;
  };
  struct GroupHash {
    std::size_t operator()(const GroupKey& g) const noexcept;
  };
  struct Entry {
    Document state;
    Timestamp updated_at = 0;
  };
  using Group = std::map<std::string, Entry>;
  struct Shard {
    mutable std::shared_mutex mutex;
    std::unordered_map<GroupKey, Group, GroupHash> groups;
  };
  static constexpr std::size_t kShards = 64;

  std::size_t shard_of(const GroupKey& g) const;
  void check_experiment(ExperimentId id) const;
  static void check_value_key(const ThetaKey& key);
  void put_locked(Shard& shard, const ThetaKey& key, Document state, Timestamp at);
  void append_wal(const Document& line);
  void maybe_compact();
  void write_snapshot_locked(const std::filesystem::path& path) const;
  void load_from_disk();
  std::vector<ThetaRecord> records_locked(std::optional<ExperimentId> id) const;

  Options options_;
  std::array<Shard, kShards> shards_;

  mutable std::shared_mutex experiments_mutex_;
  std::set<ExperimentId> experiments_;

  std::mutex wal_mutex_;
  std::ofstream wal_;
  std::atomic<std::size_t> writes_since_compact_{0};
};

}  // namespace banditd
