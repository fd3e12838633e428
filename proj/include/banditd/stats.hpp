#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "banditd/error.hpp"
#include "banditd/random.hpp"

namespace banditd {

using Document = nlohmann::json;

// Online estimators that fold an unbounded stream into constant-size state.
// Scalar updates are O(1); the linear model update is O(d^2).

class RunningMean {
 public:
  RunningMean() = default;
  RunningMean(std::uint64_t n, double mean);

  void update(double x);

  std::uint64_t count() const { return n_; }
  // Zero before the first observation.
  double value() const { return mean_; }

  bool operator==(const RunningMean&) const = default;

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0;
};

class RunningProportion {
 public:
  RunningProportion() = default;
  RunningProportion(std::uint64_t n, std::uint64_t successes);

  // outcome must be exactly 0 or 1.
  void update(int outcome);

  std::uint64_t count() const { return n_; }
  std::uint64_t successes() const { return s_; }
  double value() const;

  bool operator==(const RunningProportion&) const = default;

 private:
  std::uint64_t n_ = 0;
  std::uint64_t s_ = 0;
};

// Welford co-moments of a paired stream (x, y).
class RunningMoments {
 public:
  struct Fields {
    std::uint64_t n = 0;
    double mean_x = 0.0;
    double mean_y = 0.0;
    double m2_x = 0.0;
    double m2_y = 0.0;
    double cross = 0.0;
  };

  RunningMoments() = default;
  explicit RunningMoments(const Fields& fields);

  void update(double x, double y);

  std::uint64_t count() const { return f_.n; }
  double mean_x() const { return f_.mean_x; }
  double mean_y() const { return f_.mean_y; }
  // Sample (n-1) estimators; absent below two observations.
  std::optional<double> variance_x() const;
  std::optional<double> variance_y() const;
  std::optional<double> covariance() const;
  const Fields& fields() const { return f_; }

  bool operator==(const RunningMoments& other) const;

 private:
  Fields f_;
};

// Ridge-regularised least squares kept as the Gram matrix
//   A = lambda * I + sum x x^T,   b = sum x * y
// with an implicit leading intercept feature.  Coefficients are obtained by a
// Cholesky solve on demand.
class OnlineLinearModel {
 public:
  static constexpr double kDefaultLambda = 0.01;

  // `features` excludes the intercept, so dimension() == features + 1.
  explicit OnlineLinearModel(std::size_t features, double lambda = kDefaultLambda);
  // Rebuilds a model from stored sufficient statistics.
  OnlineLinearModel(std::vector<std::vector<double>> gram,
                    std::vector<double> moment, std::uint64_t n, double lambda);

  void update(double y, std::span<const double> features);
  // Solution of A beta = b, intercept first.  Throws singular_model when A is
  // numerically singular, which can only happen with lambda == 0.
  std::vector<double> coefs() const;

  std::size_t dimension() const { return b_.size(); }
  std::uint64_t count() const { return n_; }
  double lambda() const { return lambda_; }
  const std::vector<std::vector<double>>& gram() const { return a_; }
  const std::vector<double>& moment() const { return b_; }

  bool operator==(const OnlineLinearModel&) const = default;

 private:
  std::vector<std::vector<double>> a_;
  std::vector<double> b_;
  std::uint64_t n_ = 0;
  double lambda_ = kDefaultLambda;
};

using StatState =
    std::variant<RunningMean, RunningProportion, RunningMoments, OnlineLinearModel>;

// Kind tags used in the persisted form.
std::string_view kind_of(const StatState& state);

// {"kind": ..., <fields>}.  Field names are a stable persistence format.
Document serialize(const StatState& state);
StatState deserialize(const Document& doc);

// Deserialises and insists on a particular kind.
template <class Stat>
Stat deserialize_as(const Document& doc) {
  StatState state = deserialize(doc);
  if (auto* typed = std::get_if<Stat>(&state)) return std::move(*typed);
  throw Error(Errc::malformed_document,
              "expected a different statistic kind, got '" +
                  std::string(kind_of(state)) + "'");
}

// A labelled family of homogeneous statistics, e.g. one click proportion per
// interface version.  Labels named up front but never observed are present as
// zero states.
template <class Stat>
class StatList {
 public:
  StatList() = default;

  StatList(const std::map<std::string, Stat>& observed,
           const std::vector<std::string>& labels) {
    for (const auto& label : labels) entries_.emplace(label, Stat{});
    for (const auto& [label, stat] : observed) entries_.insert_or_assign(label, stat);
  }

  void insert(std::string label, Stat stat) {
    entries_.insert_or_assign(std::move(label), std::move(stat));
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Stat>& entries() const { return entries_; }

  std::uint64_t count() const {
    std::uint64_t total = 0;
    for (const auto& [label, stat] : entries_) total += stat.count();
    return total;
  }

  // Highest value(); ties go to the lexicographically smallest label.
  const std::string& max() const {
    if (entries_.empty()) throw Error(Errc::empty_list, "max() of an empty list");
    auto best = entries_.begin();
    for (auto it = std::next(best); it != entries_.end(); ++it) {
      if (it->second.value() > best->second.value()) best = it;
    }
    return best->first;
  }

  const std::string& random(Rng& rng) const {
    if (entries_.empty()) throw Error(Errc::empty_list, "random() of an empty list");
    auto it = entries_.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.uniform_index(entries_.size())));
    return it->first;
  }

 private:
  std::map<std::string, Stat> entries_;
};

}  // namespace banditd
