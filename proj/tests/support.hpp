#pragma once

// Test-side oracles and fixtures.  Nothing here calls into the library's
// estimators: batch statistics are two-pass in long double and least squares
// goes through Householder QR on the design matrix rather than the Gram
// matrix the online model keeps.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace oracle {

using Vec = std::vector<long double>;
using Mat = std::vector<Vec>;  // row major

inline long double mean(const std::vector<double>& xs) {
  long double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<long double>(xs.size());
}

// Sample (n-1) co-moment, second pass around the first-pass means.
inline long double covariance(const std::vector<double>& xs, const std::vector<double>& ys) {
  const long double mx = mean(xs), my = mean(ys);
  long double s = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (xs[i] - mx) * (ys[i] - my);
  return s / static_cast<long double>(xs.size() - 1);
}

inline long double variance(const std::vector<double>& xs) { return covariance(xs, xs); }

// Minimises ||X beta - y||^2 + lambda ||beta||^2 by QR of [X; sqrt(lambda) I].
inline Vec least_squares(Mat x, Vec y, long double lambda = 0) {
  const std::size_t d = x.front().size();
  if (lambda > 0) {
    for (std::size_t j = 0; j < d; ++j) {
      Vec row(d, 0);
      row[j] = std::sqrt(lambda);
      x.push_back(std::move(row));
      y.push_back(0);
    }
  }
  const std::size_t m = x.size();
  for (std::size_t k = 0; k < d; ++k) {
    long double norm = 0;
    for (std::size_t i = k; i < m; ++i) norm += x[i][k] * x[i][k];
    norm = std::sqrt(norm);
    if (norm == 0) throw std::runtime_error("rank deficient design");
    const long double alpha = x[k][k] > 0 ? -norm : norm;
    Vec v(m, 0);
    for (std::size_t i = k; i < m; ++i) v[i] = x[i][k];
    v[k] -= alpha;
    long double vv = 0;
    for (std::size_t i = k; i < m; ++i) vv += v[i] * v[i];
    if (vv == 0) continue;
    for (std::size_t j = k; j < d; ++j) {
      long double dot = 0;
      for (std::size_t i = k; i < m; ++i) dot += v[i] * x[i][j];
      const long double f = 2 * dot / vv;
      for (std::size_t i = k; i < m; ++i) x[i][j] -= f * v[i];
    }
    long double dot = 0;
    for (std::size_t i = k; i < m; ++i) dot += v[i] * y[i];
    const long double f = 2 * dot / vv;
    for (std::size_t i = k; i < m; ++i) y[i] -= f * v[i];
  }
  Vec beta(d, 0);
  for (std::size_t k = d; k-- > 0;) {
    long double s = y[k];
    for (std::size_t j = k + 1; j < d; ++j) s -= x[k][j] * beta[j];
    beta[k] = s / x[k][k];
  }
  return beta;
}

// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
inline Vec symmetric_eigenvalues(Mat a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    long double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30L) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0) continue;
        const long double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const long double t = (theta >= 0 ? 1 : -1) /
                              (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const long double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const long double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const long double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  Vec out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(a[i][i]);
  return out;
}

// Spectral condition number of the design X (square root of that of X^T X).
inline long double condition_number(const Mat& x) {
  const std::size_t d = x.front().size();
  Mat g(d, Vec(d, 0));
  for (const auto& row : x)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i][j] += row[i] * row[j];
  const Vec ev = symmetric_eigenvalues(g);
  const auto [lo, hi] = std::minmax_element(ev.begin(), ev.end());
  return std::sqrt(*hi / *lo);
}

inline double log_beta_pdf(double x, double a, double b) {
  return (a - 1) * std::log(x) + (b - 1) * std::log1p(-x) + std::lgamma(a + b) -
         std::lgamma(a) - std::lgamma(b);
}

// P(X > Y) for independent X ~ Beta(a1, b1), Y ~ Beta(a2, b2), by
// trapezoidal integration of f_Y(y) * (1 - F_X(y)) on a fine grid.
inline double prob_beta_greater(double a1, double b1, double a2, double b2,
                                int steps = 400000) {
  const double h = 1.0 / steps;
  double cdf_x = 0.0, prev_fx = 0.0, prev_term = 0.0, total = 0.0;
  for (int i = 1; i < steps; ++i) {
    const double y = i * h;
    const double fx = std::exp(log_beta_pdf(y, a1, b1));
    cdf_x += 0.5 * (prev_fx + fx) * h;
    prev_fx = fx;
    const double term = std::exp(log_beta_pdf(y, a2, b2)) * (1.0 - std::min(cdf_x, 1.0));
    total += 0.5 * (prev_term + term) * h;
    prev_term = term;
  }
  return total;
}

inline double relative_error(long double got, long double want) {
  if (want == 0) return static_cast<double>(std::fabs(got));
  return static_cast<double>(std::fabs(got - want) / std::fabs(want));
}

}  // namespace oracle

namespace fixture {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "banditd-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// A child process with stdout captured through a pipe.
class Process {
 public:
  explicit Process(std::vector<std::string> argv, const std::string& cwd = "") {
    int fds[2];
    if (pipe(fds) != 0) throw std::runtime_error("pipe failed");
    pid_ = fork();
    if (pid_ < 0) throw std::runtime_error("fork failed");
    if (pid_ == 0) {
      dup2(fds[1], STDOUT_FILENO);
      close(fds[0]);
      close(fds[1]);
      if (!cwd.empty() && chdir(cwd.c_str()) != 0) _exit(127);
      std::vector<char*> args;
      for (auto& a : argv) args.push_back(a.data());
      args.push_back(nullptr);
      execv(args[0], args.data());
      _exit(127);
    }
    close(fds[1]);
    out_ = fdopen(fds[0], "r");
  }

  ~Process() {
    if (pid_ > 0 && !reaped_) {
      ::kill(pid_, SIGKILL);
      wait();
    }
    if (out_) fclose(out_);
  }

  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;

  // One line of stdout without the newline; empty at EOF.
  std::string read_line() {
    std::string line;
    int c;
    while ((c = fgetc(out_)) != EOF && c != '\n') line.push_back(static_cast<char>(c));
    return line;
  }

  std::string read_all() {
    std::string text;
    int c;
    while ((c = fgetc(out_)) != EOF) text.push_back(static_cast<char>(c));
    return text;
  }

  void kill(int sig) {
    if (!reaped_) ::kill(pid_, sig);
  }

  // Exit status, or 128 + signal.
  int wait() {
    if (reaped_) return status_;
    int raw = 0;
    waitpid(pid_, &raw, 0);
    reaped_ = true;
    status_ = WIFEXITED(raw) ? WEXITSTATUS(raw) : 128 + WTERMSIG(raw);
    return status_;
  }

 private:
  pid_t pid_ = -1;
  FILE* out_ = nullptr;
  bool reaped_ = false;
  int status_ = 0;
};

// Runs to completion; returns {exit status, stdout}.
inline std::pair<int, std::string> run(std::vector<std::string> argv, const std::string& cwd = "") {
  Process p(std::move(argv), cwd);
  std::string out = p.read_all();
  return {p.wait(), std::move(out)};
}

// Starts `banditctl serve` on a free port and returns the port.
inline int start_server(Process& p) {
  const std::string line = p.read_line();
  const auto colon = line.rfind(':');
  if (line.rfind("listening on ", 0) != 0 || colon == std::string::npos) {
    throw std::runtime_error("server did not start: '" + line + "'");
  }
  return std::stoi(line.substr(colon + 1));
}

}  // namespace fixture
