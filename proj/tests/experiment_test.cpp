#include <gtest/gtest.h>

#include <chrono>
#include <regex>
#include <set>
#include <thread>

#include "banditd/experiment.hpp"
#include "errc.hpp"
#include "support.hpp"

using namespace banditd;

namespace {

PolicyConfig config(const std::string& text) {
  return policy_config_from_document(Document::parse(text));
}

const PolicyConfig kMeanGoal = config(R"({"kind":"mean_goal"})");

PolicyConfig nested(std::vector<ExperimentId> ids) {
  PolicyConfig c{"nested", Document::object(), std::move(ids)};
  return c;
}

}  // namespace

TEST(ExperimentKey, ShapeAndSpread) {
  const std::regex hex("[0-9a-f]{10}");
  std::set<std::string> keys;
  for (int i = 0; i < 2000; ++i) {
    const auto k = generate_experiment_key();
    EXPECT_TRUE(std::regex_match(k, hex)) << k;
    keys.insert(k);
  }
  EXPECT_EQ(keys.size(), 2000u);
}

TEST(ConstantTimeEqual, Basics) {
  EXPECT_TRUE(constant_time_equal("36207d46df", "36207d46df"));
  EXPECT_FALSE(constant_time_equal("36207d46df", "36207d46de"));
  EXPECT_FALSE(constant_time_equal("36207d46df", "36207d46d"));
  EXPECT_FALSE(constant_time_equal("", "a"));
  EXPECT_TRUE(constant_time_equal("", ""));
}

TEST(Registry, CreateIssuesIdAndKey) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("runsmart", kMeanGoal);
  EXPECT_EQ(e.id, 1u);
  EXPECT_TRUE(std::regex_match(e.key, std::regex("[0-9a-f]{10}")));
  EXPECT_EQ(reg.create("second", kMeanGoal).id, 2u);
  EXPECT_TRUE(store.has_experiment(1));
  EXPECT_EQ(reg.list().size(), 2u);

  const Document doc = to_document(e, false);
  EXPECT_FALSE(doc.contains("key"));
  EXPECT_EQ(doc.at("name"), "runsmart");
  EXPECT_EQ(doc.at("config"), to_document(kMeanGoal));
  EXPECT_EQ(to_document(e, true).at("key"), e.key);
}

TEST(Registry, CreateValidates) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  EXPECT_ERRC(reg.create("", kMeanGoal), Errc::invalid_config);
  EXPECT_ERRC(reg.create("x", config(R"({"kind":"nope"})")), Errc::invalid_config);
  EXPECT_ERRC(reg.create("x", nested({99})), Errc::invalid_config);
  // Own id is the next one to be issued.
  EXPECT_ERRC(reg.create("self", nested({1})), Errc::cycle_detected);
  EXPECT_TRUE(reg.list().empty());
  EXPECT_EQ(reg.create("ok", kMeanGoal).id, 1u);
}

TEST(Registry, TwoCycleRejected) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto a = reg.create("A", kMeanGoal);
  const auto b = reg.create("B", nested({a.id}));
  EXPECT_ERRC(reg.update(a.id, nested({b.id})), Errc::cycle_detected);
  EXPECT_EQ(reg.find(a.id)->config, kMeanGoal);

  const auto c = reg.create("C", nested({b.id}));
  EXPECT_ERRC(reg.update(a.id, nested({c.id})), Errc::cycle_detected);
}

TEST(Registry, DepthLimit) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  ExperimentId last = reg.create("leaf", kMeanGoal).id;
  for (int level = 1; level <= kMaxNestingDepth; ++level) {
    last = reg.create("level" + std::to_string(level), nested({last})).id;
  }
  EXPECT_ERRC(reg.create("too deep", nested({last})), Errc::invalid_config);
}

TEST(Registry, Authenticate) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("x", kMeanGoal);
  EXPECT_EQ(reg.authenticate(e.id, e.key), e);
  EXPECT_ERRC(reg.authenticate(e.id, "0000000000"), Errc::auth_failure);
  EXPECT_ERRC(reg.authenticate(e.id, ""), Errc::auth_failure);
  EXPECT_ERRC(reg.authenticate(42, e.key), Errc::unknown_experiment);
}

// Unknown ids and wrong keys cost the same comparison; compare medians of
// many timed calls and allow generous slack for scheduler noise.
TEST(Registry, AuthenticationTimingGivesNoEarlyExit) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("x", kMeanGoal);
  std::string wrong = e.key;
  wrong[0] = wrong[0] == '0' ? '1' : '0';
  auto median_ns = [&](ExperimentId id, const std::string& key) {
    std::vector<long> samples;
    for (int i = 0; i < 2001; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        reg.authenticate(id, key);
      } catch (const Error&) {
      }
      samples.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(
                            std::chrono::steady_clock::now() - t0)
                            .count());
    }
    std::nth_element(samples.begin(), samples.begin() + 1000, samples.end());
    return static_cast<double>(samples[1000]);
  };
  const double unknown = median_ns(e.id + 100, e.key);
  const double bad_key = median_ns(e.id, wrong);
  EXPECT_LT(std::max(unknown, bad_key) / std::min(unknown, bad_key), 3.0)
      << unknown << "ns vs " << bad_key << "ns";
}

TEST(Registry, RemoveDropsThetaAndRefusesWhileNested) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto child = reg.create("child", kMeanGoal);
  const auto parent = reg.create("parent", nested({child.id}));
  store.set({child.id, "default", "weather-uid", "sunny1"}, serialize(RunningMean(1, 2)));
  EXPECT_ERRC(reg.remove(child.id), Errc::in_use);
  reg.remove(parent.id);
  reg.remove(child.id);
  EXPECT_FALSE(reg.find(child.id));
  EXPECT_FALSE(store.has_experiment(child.id));
  EXPECT_EQ(store.size(), 0u);
  EXPECT_ERRC(reg.remove(child.id), Errc::unknown_experiment);
  // Ids are never reused.
  EXPECT_EQ(reg.create("next", kMeanGoal).id, 3u);
}

TEST(Registry, LogPaging) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("x", kMeanGoal);
  EXPECT_TRUE(reg.get_logs(e.id, 10).empty());
  for (int i = 0; i < 3; ++i) {
    reg.append_log(e.id, RecordKind::decision, {{"i", i}}, Document{{"a", i}}, std::nullopt);
  }
  const auto page = reg.get_logs(e.id, 2);
  ASSERT_EQ(page.size(), 2u);
  EXPECT_EQ(page[0].t, 3u);
  EXPECT_EQ(page[1].t, 2u);
  const auto rest = reg.get_logs(e.id, 2, 2);
  ASSERT_EQ(rest.size(), 1u);
  EXPECT_EQ(rest[0].t, 1u);
  EXPECT_TRUE(reg.get_logs(e.id, 2, 3).empty());
  EXPECT_ERRC(reg.get_logs(77, 1), Errc::unknown_experiment);
}

TEST(Registry, TenThousandAppendsReadBackInOrder) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("x", kMeanGoal);
  std::vector<InteractionRecord> appended;
  for (int i = 0; i < 10000; ++i) {
    const auto kind = i % 3 == 0 ? RecordKind::custom : (i % 3 == 1 ? RecordKind::decision : RecordKind::reward);
    appended.push_back(reg.append_log(e.id, kind, {{"i", i}},
                                      kind == RecordKind::custom ? std::nullopt : std::optional<Document>(Document{{"a", i}}),
                                      kind == RecordKind::reward ? std::optional<Document>(Document{{"r", i}}) : std::nullopt));
  }
  std::vector<InteractionRecord> read;
  for (std::size_t offset = 0;; offset += 777) {
    const auto page = reg.get_logs(e.id, 777, offset);
    read.insert(read.end(), page.begin(), page.end());
    if (page.size() < 777) break;
  }
  std::reverse(read.begin(), read.end());
  EXPECT_EQ(read, appended);
  EXPECT_EQ(reg.get_logs(e.id, 1'000'000).size(), ExperimentRegistry::kMaxLogPage);
}

TEST(Registry, ConcurrentAppendsHaveNoGapsOrDuplicates) {
  ThetaStore store;
  ExperimentRegistry reg(store);
  const auto e = reg.create("x", kMeanGoal);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 250; ++i) reg.append_log(e.id, RecordKind::custom, {}, std::nullopt, std::nullopt);
    });
  }
  for (auto& t : threads) t.join();
  const auto all = reg.get_logs(e.id, 10000);
  ASSERT_EQ(all.size(), 2000u);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i].t, 2000 - i);
}

TEST(InteractionRecord, DocumentRoundTrip) {
  InteractionRecord r{3, 7, RecordKind::reward, {{"weather", "sunny"}}, Document{{"type", "run"}},
                      Document{{"km", 8}}, std::nullopt, 1234};
  const Document doc = to_document(r);
  EXPECT_EQ(doc.at("kind"), "reward");
  EXPECT_FALSE(doc.contains("hint"));
  EXPECT_EQ(interaction_from_document(doc), r);

  InteractionRecord custom{3, 8, RecordKind::custom, {{"note", "x"}}, std::nullopt, std::nullopt,
                           std::nullopt, 99};
  EXPECT_FALSE(to_document(custom).contains("action"));
  EXPECT_EQ(interaction_from_document(to_document(custom)), custom);
  EXPECT_ERRC(interaction_from_document(Document::parse(R"({"kind":"other"})")), Errc::malformed_document);
}

TEST(Registry, PersistsAcrossRestart) {
  fixture::TempDir dir;
  std::vector<Experiment> before;
  std::vector<InteractionRecord> logs_before;
  {
    ThetaStore store({dir.path()});
    ExperimentRegistry reg(store, {dir.path()});
    const auto a = reg.create("a", kMeanGoal);
    const auto b = reg.create("b", kMeanGoal);
    const auto c = reg.create("c", nested({a.id}));
    reg.append_log(a.id, RecordKind::decision, {{"x", 1}}, Document{{"y", 2}}, std::nullopt,
                   Document{{"h", 3}});
    reg.append_log(b.id, RecordKind::custom, {{"x", 1}}, std::nullopt, std::nullopt);
    reg.append_log(a.id, RecordKind::reward, {{"x", 1}}, Document{{"y", 2}}, Document{{"km", 4}});
    reg.remove(b.id);
    (void)c;
    before = reg.list();
    logs_before = reg.get_logs(a.id, 100);
  }
  ThetaStore store({dir.path()});
  ExperimentRegistry reg(store, {dir.path()});
  EXPECT_EQ(reg.list(), before);
  EXPECT_EQ(reg.get_logs(1, 100), logs_before);
  EXPECT_ERRC(reg.get_logs(2, 100), Errc::unknown_experiment);
  EXPECT_TRUE(store.has_experiment(1));
  EXPECT_NE(reg.policy_of(3), nullptr);
  EXPECT_EQ(reg.create("d", kMeanGoal).id, 4u);
  // New appends continue the sequence.
  EXPECT_EQ(reg.append_log(1, RecordKind::custom, {}, std::nullopt, std::nullopt).t, 3u);
}
