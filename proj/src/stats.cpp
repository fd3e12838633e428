#include "banditd/stats.hpp"

#include <algorithm>
#include <cmath>

namespace banditd {

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw Error(Errc::invalid_observation, std::string(what) + " must be finite");
  }
}

const Document& field(const Document& doc, const char* name) {
  auto it = doc.find(name);
  if (it == doc.end()) {
    throw Error(Errc::malformed_document, std::string("missing field '") + name + "'");
  }
  return *it;
}

std::uint64_t count_field(const Document& doc, const char* name) {
  const Document& v = field(doc, name);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw Error(Errc::malformed_document,
                std::string("field '") + name + "' must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

double real_field(const Document& doc, const char* name) {
  const Document& v = field(doc, name);
  if (!v.is_number()) {
    throw Error(Errc::malformed_document, std::string("field '") + name + "' must be a number");
  }
  return v.get<double>();
}

std::vector<double> vector_of(const Document& v, const char* name) {
  if (!v.is_array()) {
    throw Error(Errc::malformed_document, std::string("field '") + name + "' must be an array");
  }
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& e : v) {
    if (!e.is_number()) {
      throw Error(Errc::malformed_document,
                  std::string("field '") + name + "' must hold numbers");
    }
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace

// ---- RunningMean -----------------------------------------------------------

RunningMean::RunningMean(std::uint64_t n, double mean) : n_(n), mean_(mean) {
  require_finite(mean, "mean");
  if (n == 0 && mean != 0.0) {
    throw Error(Errc::malformed_document, "an empty mean must be zero");
  }
}

void RunningMean::update(double x) {
  require_finite(x, "observation");
  ++n_;
  mean_ += (x - mean_) / static_cast<double>(n_);
}

// ---- RunningProportion -----------------------------------------------------

RunningProportion::RunningProportion(std::uint64_t n, std::uint64_t successes)
    : n_(n), s_(successes) {
  if (s_ > n_) throw Error(Errc::malformed_document, "successes exceed trials");
}

void RunningProportion::update(int outcome) {
  if (outcome != 0 && outcome != 1) {
    throw Error(Errc::invalid_observation, "proportion outcome must be 0 or 1");
  }
  ++n_;
  s_ += static_cast<std::uint64_t>(outcome);
}

double RunningProportion::value() const {
  return n_ == 0 ? 0.0 : static_cast<double>(s_) / static_cast<double>(n_);
}

// ---- RunningMoments --------------------------------------------------------

RunningMoments::RunningMoments(const Fields& fields) : f_(fields) {
  for (double v : {f_.mean_x, f_.mean_y, f_.m2_x, f_.m2_y, f_.cross}) {
    require_finite(v, "moment");
  }
  if (f_.m2_x < 0.0 || f_.m2_y < 0.0) {
    throw Error(Errc::malformed_document, "sums of squared deviations must be nonnegative");
  }
}

void RunningMoments::update(double x, double y) {
  require_finite(x, "x");
  require_finite(y, "y");
  ++f_.n;
  const double n = static_cast<double>(f_.n);
  const double dx = x - f_.mean_x;
  const double dy = y - f_.mean_y;
  f_.mean_x += dx / n;
  f_.mean_y += dy / n;
  f_.m2_x += dx * (x - f_.mean_x);
  f_.m2_y += dy * (y - f_.mean_y);
  f_.cross += dx * (y - f_.mean_y);
}

std::optional<double> RunningMoments::variance_x() const {
  if (f_.n < 2) return std::nullopt;
  return f_.m2_x / static_cast<double>(f_.n - 1);
}

std::optional<double> RunningMoments::variance_y() const {
  if (f_.n < 2) return std::nullopt;
  return f_.m2_y / static_cast<double>(f_.n - 1);
}

std::optional<double> RunningMoments::covariance() const {
  if (f_.n < 2) return std::nullopt;
  return f_.cross / static_cast<double>(f_.n - 1);
}

bool RunningMoments::operator==(const RunningMoments& other) const {
  const Fields& a = f_;
  const Fields& b = other.f_;
  return a.n == b.n && a.mean_x == b.mean_x && a.mean_y == b.mean_y && a.m2_x == b.m2_x &&
         a.m2_y == b.m2_y && a.cross == b.cross;
}

// ---- OnlineLinearModel -----------------------------------------------------

OnlineLinearModel::OnlineLinearModel(std::size_t features, double lambda)
    : a_(features + 1, std::vector<double>(features + 1, 0.0)),
      b_(features + 1, 0.0),
      lambda_(lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw Error(Errc::invalid_config, "ridge lambda must be finite and nonnegative");
  }
  for (std::size_t i = 0; i < a_.size(); ++i) a_[i][i] = lambda;
}

OnlineLinearModel::OnlineLinearModel(std::vector<std::vector<double>> gram,
                                     std::vector<double> moment, std::uint64_t n,
                                     double lambda)
    : a_(std::move(gram)), b_(std::move(moment)), n_(n), lambda_(lambda) {
  const std::size_t d = b_.size();
  if (d == 0 || a_.size() != d) {
    throw Error(Errc::malformed_document, "Gram matrix and moment vector disagree in size");
  }
  for (const auto& row : a_) {
    if (row.size() != d) throw Error(Errc::malformed_document, "Gram matrix is not square");
    for (double v : row) require_finite(v, "Gram entry");
  }
  for (double v : b_) require_finite(v, "moment entry");
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw Error(Errc::malformed_document, "ridge lambda must be finite and nonnegative");
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (a_[i][j] != a_[j][i]) throw Error(Errc::malformed_document, "Gram matrix is not symmetric");
    }
  }
}

void OnlineLinearModel::update(double y, std::span<const double> features) {
  const std::size_t d = dimension();
  if (features.size() + 1 != d) {
    throw Error(Errc::dimension_mismatch,
                "expected " + std::to_string(d - 1) + " features, got " +
                    std::to_string(features.size()));
  }
  require_finite(y, "response");
  for (double v : features) require_finite(v, "feature");

  auto x = [&](std::size_t i) { return i == 0 ? 1.0 : features[i - 1]; };
  for (std::size_t i = 0; i < d; ++i) {
    const double xi = x(i);
    b_[i] += xi * y;
    for (std::size_t j = 0; j <= i; ++j) {
      a_[i][j] += xi * x(j);
      if (j != i) a_[j][i] = a_[i][j];
    }
  }
  ++n_;
}

std::vector<double> OnlineLinearModel::coefs() const {
  const std::size_t d = dimension();
  double scale = 0.0;
  for (std::size_t i = 0; i < d; ++i) scale = std::max(scale, std::abs(a_[i][i]));
  const double tiny = scale * 1e-13;

  // Lower Cholesky factor, L L^T = A.
  std::vector<std::vector<double>> l(d, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < d; ++j) {
    double diag = a_[j][j];
    for (std::size_t k = 0; k < j; ++k) diag -= l[j][k] * l[j][k];
    if (!(diag > tiny)) {
      throw Error(Errc::singular_model, "Gram matrix is numerically singular");
    }
    l[j][j] = std::sqrt(diag);
    for (std::size_t i = j + 1; i < d; ++i) {
      double v = a_[i][j];
      for (std::size_t k = 0; k < j; ++k) v -= l[i][k] * l[j][k];
      l[i][j] = v / l[j][j];
    }
  }

  std::vector<double> z(d);
  for (std::size_t i = 0; i < d; ++i) {
    double v = b_[i];
    for (std::size_t k = 0; k < i; ++k) v -= l[i][k] * z[k];
    z[i] = v / l[i][i];
  }
  std::vector<double> beta(d);
  for (std::size_t ii = d; ii-- > 0;) {
    double v = z[ii];
    for (std::size_t k = ii + 1; k < d; ++k) v -= l[k][ii] * beta[k];
    beta[ii] = v / l[ii][ii];
  }
  return beta;
}

// ---- serialisation ---------------------------------------------------------

std::string_view kind_of(const StatState& state) {
  struct Visitor {
    std::string_view operator()(const RunningMean&) const { return "mean"; }
    std::string_view operator()(const RunningProportion&) const { return "proportion"; }
    std::string_view operator()(const RunningMoments&) const { return "moments"; }
    std::string_view operator()(const OnlineLinearModel&) const { return "lm"; }
  };
  return std::visit(Visitor{}, state);
}

Document serialize(const StatState& state) {
  struct Visitor {
    Document operator()(const RunningMean& m) const {
      return {{"kind", "mean"}, {"n", m.count()}, {"mean", m.value()}};
    }
    Document operator()(const RunningProportion& p) const {
      return {{"kind", "proportion"}, {"n", p.count()}, {"s", p.successes()}};
    }
    Document operator()(const RunningMoments& m) const {
      const auto& f = m.fields();
      return {{"kind", "moments"}, {"n", f.n},       {"mean_x", f.mean_x},
              {"mean_y", f.mean_y}, {"m2_x", f.m2_x}, {"m2_y", f.m2_y},
              {"cross", f.cross}};
    }
    Document operator()(const OnlineLinearModel& lm) const {
      return {{"kind", "lm"},          {"d", lm.dimension()}, {"A", lm.gram()},
              {"b", lm.moment()},      {"n", lm.count()},     {"lambda", lm.lambda()}};
    }
  };
  return std::visit(Visitor{}, state);
}

StatState deserialize(const Document& doc) {
  if (!doc.is_object()) throw Error(Errc::malformed_document, "statistic must be an object");
  const Document& kind = field(doc, "kind");
  if (!kind.is_string()) throw Error(Errc::malformed_document, "'kind' must be a string");
  const auto& tag = kind.get_ref<const std::string&>();

  if (tag == "mean") {
    return RunningMean(count_field(doc, "n"), real_field(doc, "mean"));
  }
  if (tag == "proportion") {
    return RunningProportion(count_field(doc, "n"), count_field(doc, "s"));
  }
  if (tag == "moments") {
    RunningMoments::Fields f;
    f.n = count_field(doc, "n");
    f.mean_x = real_field(doc, "mean_x");
    f.mean_y = real_field(doc, "mean_y");
    f.m2_x = real_field(doc, "m2_x");
    f.m2_y = real_field(doc, "m2_y");
    f.cross = real_field(doc, "cross");
    return RunningMoments(f);
  }
  if (tag == "lm") {
    const std::uint64_t d = count_field(doc, "d");
    const Document& a = field(doc, "A");
    if (!a.is_array()) throw Error(Errc::malformed_document, "field 'A' must be an array");
    std::vector<std::vector<double>> gram;
    for (const auto& row : a) gram.push_back(vector_of(row, "A"));
    std::vector<double> b = vector_of(field(doc, "b"), "b");
    if (b.size() != d) throw Error(Errc::malformed_document, "'d' disagrees with 'b'");
    return OnlineLinearModel(std::move(gram), std::move(b), count_field(doc, "n"),
                             real_field(doc, "lambda"));
  }
  throw Error(Errc::unknown_kind, "unknown statistic kind '" + tag + "'");
}

}  // namespace banditd
