#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <thread>

#include "banditd/theta_store.hpp"
#include "errc.hpp"
#include "support.hpp"

using namespace banditd;

namespace {

ThetaKey key(ExperimentId id, std::string value, std::string name = "default") {
  return ThetaKey{id, std::move(name), "weather-uid", std::move(value)};
}

Document mean_doc(std::uint64_t n, double mean) { return serialize(RunningMean(n, mean)); }

Document increment(const std::optional<Document>& current) {
  RunningMean m = current ? deserialize_as<RunningMean>(*current) : RunningMean{};
  m.update(1.0);
  return serialize(m);
}

// Records compared by key and state; write times differ between runs.
std::map<ThetaKey, Document> content(const std::vector<ThetaRecord>& records) {
  std::map<ThetaKey, Document> out;
  for (const auto& r : records) out.emplace(r.key, r.state);
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(ThetaStore, FreshKeyIsAbsent) {
  ThetaStore store;
  store.register_experiment(1);
  EXPECT_FALSE(store.get(key(1, "sunny12")));
  EXPECT_TRUE(store.get_all(1, "default", "weather-uid").empty());
}

TEST(ThetaStore, UnknownExperiment) {
  ThetaStore store;
  EXPECT_ERRC(store.get(key(4, "x")), Errc::unknown_experiment);
  EXPECT_ERRC(store.set(key(4, "x"), mean_doc(1, 1)), Errc::unknown_experiment);
  EXPECT_ERRC(store.get_all(4, "default", "k"), Errc::unknown_experiment);
}

TEST(ThetaStore, ReadYourWrites) {
  ThetaStore store;
  store.register_experiment(1);
  store.set(key(1, "sunny12"), mean_doc(1, 8));
  EXPECT_EQ(*store.get(key(1, "sunny12")), mean_doc(1, 8));
  store.set(key(1, "sunny12"), mean_doc(2, 7));
  EXPECT_EQ(*store.get(key(1, "sunny12")), mean_doc(2, 7));
  EXPECT_EQ(store.size(), 1u);
}

TEST(ThetaStore, ValuesAndNamesAreIndependent) {
  ThetaStore store;
  store.register_experiment(1);
  store.set(key(1, "A"), mean_doc(1, 1));
  store.set(key(1, "B"), mean_doc(1, 2));
  store.set(key(1, "A", "mean"), mean_doc(1, 3));
  const auto all = store.get_all(1, "default", "weather-uid");
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all.at("A"), mean_doc(1, 1));
  EXPECT_EQ(all.at("B"), mean_doc(1, 2));
  EXPECT_EQ(*store.get(key(1, "A", "mean")), mean_doc(1, 3));
}

TEST(ThetaStore, KeyValidation) {
  ThetaStore store;
  store.register_experiment(1);
  EXPECT_ERRC(store.set(ThetaKey{1, "default", "k", std::nullopt}, mean_doc(1, 1)),
              Errc::invalid_key);
  EXPECT_ERRC(store.set(ThetaKey{1, "", "k", "v"}, mean_doc(1, 1)), Errc::invalid_key);
  EXPECT_ERRC(store.set(key(1, "v"), Document::parse(R"({"kind":"mean"})")),
              Errc::malformed_document);
  EXPECT_EQ(store.size(), 0u);
}

TEST(ThetaStore, GetAllMatchesSetOracle) {
  ThetaStore store;
  store.register_experiment(1);
  store.register_experiment(2);
  std::mt19937_64 gen(4);
  std::map<std::string, Document> want;
  std::vector<std::string> labels;
  for (int i = 0; i < 50; ++i) labels.push_back("L" + std::to_string(i));
  std::shuffle(labels.begin(), labels.end(), gen);
  for (const auto& l : labels) {
    const Document d = mean_doc(1, static_cast<double>(gen() % 100));
    store.set(key(1, l), d);
    store.set(key(2, l), mean_doc(9, 9));
    want[l] = d;
  }
  EXPECT_EQ(store.get_all(1, "default", "weather-uid"), want);
}

TEST(ThetaStore, InterleavedUpsertsMatchSequentialOracle) {
  ThetaStore store;
  store.register_experiment(1);
  std::mt19937_64 gen(6);
  std::map<std::string, Document> oracle_state;
  for (int i = 0; i < 10000; ++i) {
    const std::string label = "k" + std::to_string(gen() % 97);
    const Document d = mean_doc(static_cast<std::uint64_t>(i + 1), static_cast<double>(i));
    store.set(key(1, label), d);
    oracle_state[label] = d;
  }
  for (const auto& [label, d] : oracle_state) EXPECT_EQ(*store.get(key(1, label)), d);
  EXPECT_EQ(store.size(), oracle_state.size());
}

TEST(ThetaStore, AtomicUpdateCreatesAndFails) {
  ThetaStore store;
  store.register_experiment(1);
  EXPECT_EQ(store.atomic_update(key(1, "a"), increment), mean_doc(1, 1));
  EXPECT_THROW(store.atomic_update(key(1, "a"),
                                   [](const std::optional<Document>&) -> Document {
                                     throw std::runtime_error("boom");
                                   }),
               std::runtime_error);
  EXPECT_EQ(*store.get(key(1, "a")), mean_doc(1, 1));
  // A transform producing an invalid state is a failure too.
  EXPECT_ERRC(store.atomic_update(key(1, "a"),
                                  [](const std::optional<Document>&) { return Document(3); }),
              Errc::malformed_document);
  EXPECT_EQ(*store.get(key(1, "a")), mean_doc(1, 1));
}

TEST(ThetaStore, ConcurrentIncrementsAreLinearizable) {
  for (int trial = 0; trial < 20; ++trial) {
    ThetaStore store;
    store.register_experiment(1);
    store.set(key(1, "hot"), mean_doc(5, 1.0));
    std::vector<std::thread> threads;
    for (int t = 0; t < 10; ++t) {
      threads.emplace_back([&] {
        for (int i = 0; i < 10; ++i) store.atomic_update(key(1, "hot"), increment);
      });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(deserialize_as<RunningMean>(*store.get(key(1, "hot"))).count(), 105u);
  }
}

TEST(ThetaStore, MultiKeyUpdateIsAtomic) {
  ThetaStore store;
  store.register_experiment(1);
  const std::array<ThetaKey, 2> keys{key(1, "x"), key(1, "x", "mean")};
  std::atomic<bool> stop{false};
  std::atomic<int> torn{0};
  std::thread reader([&] {
    while (!stop) {
      // Both halves are written under one critical section; a reader taking
      // the same locks through a no-op update never sees them disagree.
      store.atomic_update(keys, [&](const std::vector<std::optional<Document>>& in) {
        const auto a = in[0] ? deserialize_as<RunningMean>(*in[0]).count() : 0;
        const auto b = in[1] ? deserialize_as<RunningMean>(*in[1]).count() : 0;
        if (a != b) ++torn;
        return std::vector<Document>{in[0] ? *in[0] : serialize(RunningMean{}),
                                     in[1] ? *in[1] : serialize(RunningMean{})};
      });
    }
  });
  std::vector<std::thread> writers;
  for (int t = 0; t < 4; ++t) {
    writers.emplace_back([&] {
      for (int i = 0; i < 500; ++i) {
        store.atomic_update(keys, [](const std::vector<std::optional<Document>>& in) {
          return std::vector<Document>{increment(in[0]), increment(in[1])};
        });
      }
    });
  }
  for (auto& w : writers) w.join();
  stop = true;
  reader.join();
  EXPECT_EQ(torn.load(), 0);
  EXPECT_EQ(deserialize_as<RunningMean>(*store.get(keys[0])).count(), 2000u);
  EXPECT_EQ(deserialize_as<RunningMean>(*store.get(keys[1])).count(), 2000u);
}

TEST(ThetaStore, ResetRemovesOnlyThatExperiment) {
  ThetaStore store;
  store.register_experiment(1);
  store.register_experiment(2);
  store.set(key(1, "a"), mean_doc(1, 1));
  store.set(key(2, "a"), mean_doc(1, 2));
  store.reset(1);
  EXPECT_FALSE(store.get(key(1, "a")));
  EXPECT_EQ(*store.get(key(2, "a")), mean_doc(1, 2));
  EXPECT_TRUE(store.records(1).empty());
}

TEST(ThetaStore, EmptySnapshotRoundTrip) {
  fixture::TempDir dir;
  ThetaStore a;
  a.snapshot(dir.path() / "s");
  ThetaStore b;
  b.restore(dir.path() / "s");
  EXPECT_EQ(b.size(), 0u);
}

TEST(ThetaStore, SnapshotRoundTripIsExact) {
  fixture::TempDir dir;
  ThetaStore a;
  std::mt19937_64 gen(12);
  for (ExperimentId id = 1; id <= 4; ++id) a.register_experiment(id);
  for (int i = 0; i < 1000; ++i) {
    const ExperimentId id = 1 + gen() % 4;
    if (i % 3 == 0) {
      OnlineLinearModel lm(2);
      lm.update(static_cast<double>(gen() % 10), std::vector<double>{0.5 * i, 0.1});
      a.set(ThetaKey{id, "default", "m", std::to_string(i)}, serialize(lm));
    } else {
      a.set(ThetaKey{id, "mean", "k", std::to_string(i)}, mean_doc(i, i / 7.0));
    }
  }
  ASSERT_EQ(a.size(), 1000u);
  a.snapshot(dir.path() / "s");

  ThetaStore b;
  b.restore(dir.path() / "s");
  EXPECT_EQ(b.records(), a.records());  // keys, states and timestamps

  // Canonical re-serialisation is byte-identical.
  b.snapshot(dir.path() / "t");
  EXPECT_EQ(read_file(dir.path() / "s"), read_file(dir.path() / "t"));
}

TEST(ThetaStore, SnapshotFormat) {
  fixture::TempDir dir;
  ThetaStore a;
  a.register_experiment(1);
  a.set(key(1, "v"), mean_doc(1, 2));
  a.snapshot(dir.path() / "s");
  std::ifstream in(dir.path() / "s");
  std::string header, record;
  std::getline(in, header);
  std::getline(in, record);
  EXPECT_EQ(header, R"({"format":"theta-v1"})");
  const Document doc = Document::parse(record);
  EXPECT_EQ(doc.dump(), record);  // sorted keys, compact
  EXPECT_EQ(doc.at("state"), mean_doc(1, 2));
}

TEST(ThetaStore, TruncatedSnapshotIsRejectedWholesale) {
  fixture::TempDir dir;
  ThetaStore a;
  a.register_experiment(1);
  for (int i = 0; i < 20; ++i) a.set(key(1, std::to_string(i)), mean_doc(1, i));
  a.snapshot(dir.path() / "s");
  const std::string full = read_file(dir.path() / "s");

  ThetaStore b;
  b.register_experiment(9);
  b.set(key(9, "keep"), mean_doc(3, 3));
  const auto before = b.records();
  // Cut at a line boundary (losing the trailer) and mid-line.
  for (std::size_t cut : {full.rfind('\n', full.size() - 2) + 1, full.size() / 2}) {
    std::ofstream(dir.path() / "cut", std::ios::binary) << full.substr(0, cut);
    EXPECT_ERRC(b.restore(dir.path() / "cut"), Errc::malformed_document);
    EXPECT_EQ(b.records(), before);
  }
  EXPECT_ERRC(b.restore(dir.path() / "missing"), Errc::io_error);
  EXPECT_EQ(b.records(), before);
}

TEST(ThetaStore, SurvivesReopen) {
  fixture::TempDir dir;
  std::vector<ThetaRecord> before;
  {
    ThetaStore a({dir.path(), 7});  // forces several compactions
    a.register_experiment(1);
    a.register_experiment(2);
    for (int i = 0; i < 40; ++i) a.atomic_update(key(1 + i % 2, std::to_string(i % 5)), increment);
    a.reset(2);
    a.set(key(2, "after"), mean_doc(1, 4));
    before = a.records();
  }
  ThetaStore b({dir.path(), 7});
  EXPECT_EQ(b.records(), before);
  EXPECT_TRUE(b.has_experiment(1));
}

TEST(ThetaStore, ReplaysWalAndIgnoresTornTail) {
  fixture::TempDir dir;
  std::vector<ThetaRecord> before;
  {
    ThetaStore a({dir.path(), 1'000'000});
    a.register_experiment(1);
    for (int i = 0; i < 25; ++i) a.atomic_update(key(1, std::to_string(i % 3)), increment);
    const std::array<ThetaKey, 2> keys{key(1, "p"), key(1, "p", "mean")};
    a.atomic_update(keys, [](const std::vector<std::optional<Document>>& in) {
      return std::vector<Document>{increment(in[0]), increment(in[1])};
    });
    before = a.records();
  }
  // Simulate a crash in the middle of the next append.
  std::ofstream(dir.path() / "theta.wal", std::ios::app) << R"({"experiment_id":1,"key":"wea)";
  ThetaStore b({dir.path(), 1'000'000});
  EXPECT_EQ(b.records(), before);
}

TEST(ThetaStore, RestoreReplacesContentDurably) {
  fixture::TempDir dir, other;
  ThetaStore src;
  src.register_experiment(3);
  src.set(key(3, "a"), mean_doc(2, 2));
  src.snapshot(other.path() / "s");
  {
    ThetaStore a({dir.path(), 100});
    a.register_experiment(1);
    a.set(key(1, "gone"), mean_doc(1, 1));
    a.restore(other.path() / "s");
    EXPECT_EQ(content(a.records()), content(src.records()));
  }
  ThetaStore b({dir.path(), 100});
  EXPECT_EQ(b.records(), src.records());
}

TEST(ThetaStore, ConcurrentReadersSeeWholeDocuments) {
  ThetaStore store;
  store.register_experiment(1);
  std::atomic<bool> stop{false};
  std::thread writer([&] {
    for (int i = 0; i < 5000; ++i) store.atomic_update(key(1, "k"), increment);
    stop = true;
  });
  std::uint64_t last = 0;
  while (!stop) {
    if (auto d = store.get(key(1, "k"))) {
      const auto m = deserialize_as<RunningMean>(*d);
      EXPECT_GE(m.count(), last);
      EXPECT_EQ(m.value(), 1.0);
      last = m.count();
    }
  }
  writer.join();
}
