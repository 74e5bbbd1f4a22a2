#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpn/rng.hpp"

namespace dpn::hornn {

// Numerical study of the generalized recurrence
//
//   h^k = g^k( sum_{t<k} f_t^k(h^t) ),   h^0 = x^0,
//
// whose sharing policies specialize it to a densely connected network
// (nothing shared), the precondition of the residual rewrite (f shared over
// the step index k), and a higher-order RNN (everything shared, f indexed by
// lag). Under shared f the running sum r^k obeys
//
//   r^k = r^{k-1} + phi^{k-1}(r^{k-1}),   phi^j = f_j o g^j,
//
// i.e. the residual recurrence. Both unrollers below are independent
// implementations of the two sides; the report measures their agreement.
//
// Everything here is plain 64-bit vector arithmetic by default (float
// instantiation exists to demonstrate rounding behavior).

template <typename T>
struct DenseFn {
  // y = act(W x + b); b optional, identity or tanh activation.
  int in = 0, out = 0;
  std::vector<T> w;  // out x in, row-major
  std::vector<T> b;  // empty = no bias
  bool tanh_act = false;

  std::vector<T> operator()(const std::vector<T>& x) const {
    if (static_cast<int>(x.size()) != in) {
      throw std::invalid_argument("DenseFn: input dimension mismatch");
    }
    std::vector<T> y(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
      T acc = b.empty() ? T(0) : b[static_cast<std::size_t>(i)];
      const T* row = w.data() + static_cast<std::size_t>(i) * in;
      for (int j = 0; j < in; ++j) acc += row[j] * x[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = tanh_act ? std::tanh(acc) : acc;
    }
    return y;
  }

  static DenseFn random(int dim, bool tanh_act, bool bias, Rng& rng, double scale) {
    DenseFn f;
    f.in = f.out = dim;
    f.tanh_act = tanh_act;
    f.w.resize(static_cast<std::size_t>(dim) * dim);
    for (auto& v : f.w) v = static_cast<T>(rng.normal(0.0, scale));
    if (bias) {
      f.b.resize(static_cast<std::size_t>(dim));
      for (auto& v : f.b) v = static_cast<T>(rng.normal(0.0, scale));
    }
    return f;
  }
};

enum class Sharing {
  none,            // densely connected: every (k, t) has its own f
  share_f_over_k,  // residual precondition: f_t^k == f_t for all k
  share_all,       // HORNN: f depends only on the lag k - t, g^k == g
};

template <typename T>
struct RecurrenceConfig {
  int steps = 0;      // K
  int state_dim = 0;
  Sharing sharing = Sharing::share_f_over_k;
  std::vector<T> x0;  // h^0

  // Step inputs x^t for t >= 1. The residual rewrite requires them to be
  // zero; they are stored to make that precondition checkable.
  std::vector<std::vector<T>> step_inputs;

  // Function banks; interpretation depends on the sharing policy.
  //   none:            f_bank[k-1][t] is f_t^k
  //   share_f_over_k:  f_bank[0][t] is f_t
  //   share_all:       f_bank[0][lag-1] is f at lag
  // g_bank[k-1] is g^k (share_all uses g_bank[0] only).
  std::vector<std::vector<DenseFn<T>>> f_bank;
  std::vector<DenseFn<T>> g_bank;

  const DenseFn<T>& f_at(int k, int t) const {
    switch (sharing) {
      case Sharing::none:
        return f_bank.at(static_cast<std::size_t>(k - 1)).at(static_cast<std::size_t>(t));
      case Sharing::share_f_over_k:
        return f_bank.at(0).at(static_cast<std::size_t>(t));
      case Sharing::share_all:
        return f_bank.at(0).at(static_cast<std::size_t>(k - t - 1));
    }
    throw std::logic_error("unreachable");
  }

  const DenseFn<T>& g_at(int k) const {
    return sharing == Sharing::share_all ? g_bank.at(0)
                                         : g_bank.at(static_cast<std::size_t>(k - 1));
  }

  void validate() const {
    if (steps < 1) throw std::invalid_argument("recurrence: steps must be >= 1");
    if (static_cast<int>(x0.size()) != state_dim) {
      throw std::invalid_argument("recurrence: x0 dimension mismatch");
    }
    for (const auto& x : step_inputs) {
      for (T v : x) {
        if (v != T(0)) {
          throw std::invalid_argument("recurrence: nonzero step inputs are unsupported (x^k = 0 for k > 1)");
        }
      }
    }
  }

  static RecurrenceConfig random(int steps, int dim, Sharing sharing, Rng& rng) {
    RecurrenceConfig cfg;
    cfg.steps = steps;
    cfg.state_dim = dim;
    cfg.sharing = sharing;
    cfg.x0.resize(static_cast<std::size_t>(dim));
    for (auto& v : cfg.x0) v = static_cast<T>(rng.normal());
    const double scale = 0.5 / std::sqrt(static_cast<double>(dim));
    // f linear without bias, g affine with tanh.
    if (sharing == Sharing::none) {
      for (int k = 1; k <= steps; ++k) {
        std::vector<DenseFn<T>> row;
        for (int t = 0; t < k; ++t) row.push_back(DenseFn<T>::random(dim, false, false, rng, scale));
        cfg.f_bank.push_back(std::move(row));
      }
    } else {
      std::vector<DenseFn<T>> row;
      for (int t = 0; t < steps; ++t) row.push_back(DenseFn<T>::random(dim, false, false, rng, scale));
      cfg.f_bank.push_back(std::move(row));
    }
    const int gs = sharing == Sharing::share_all ? 1 : steps;
    for (int k = 0; k < gs; ++k) cfg.g_bank.push_back(DenseFn<T>::random(dim, true, true, rng, scale));
    return cfg;
  }
};

namespace detail {

template <typename T>
void vec_add(std::vector<T>& a, const std::vector<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace detail

// Literal evaluation of the generalized recurrence: every step re-evaluates
// the full sum over previous states. Returns h^1..h^K.
template <typename T>
std::vector<std::vector<T>> unroll_general(const RecurrenceConfig<T>& cfg) {
  cfg.validate();
  std::vector<std::vector<T>> h;
  h.push_back(cfg.x0);  // h^0
  for (int k = 1; k <= cfg.steps; ++k) {
    std::vector<T> sum(static_cast<std::size_t>(cfg.state_dim), T(0));
    for (int t = 0; t < k; ++t) {
      detail::vec_add(sum, cfg.f_at(k, t)(h[static_cast<std::size_t>(t)]));
    }
    h.push_back(cfg.g_at(k)(sum));
  }
  return std::vector<std::vector<T>>(h.begin() + 1, h.end());
}

// The running sums r^k = sum_{t<k} f_t(h^t) recomputed literally from a state
// sequence (shared-f policies only). Returns r^1..r^K.
template <typename T>
std::vector<std::vector<T>> dense_partial_sums(const RecurrenceConfig<T>& cfg,
                                               const std::vector<std::vector<T>>& h) {
  if (cfg.sharing == Sharing::none) {
    throw std::invalid_argument("dense_partial_sums: requires shared f");
  }
  std::vector<std::vector<T>> r;
  for (int k = 1; k <= cfg.steps; ++k) {
    std::vector<T> sum(static_cast<std::size_t>(cfg.state_dim), T(0));
    for (int t = 0; t < k; ++t) {
      const auto& ht = t == 0 ? cfg.x0 : h[static_cast<std::size_t>(t - 1)];
      detail::vec_add(sum, cfg.f_at(k, t)(ht));
    }
    r.push_back(std::move(sum));
  }
  return r;
}

// Residual recurrence r^k = r^{k-1} + phi^{k-1}(r^{k-1}) with r^1 = f_0(x^0)
// and phi^j = f_j o g^j. Never materializes the h states. Returns r^1..r^K.
template <typename T>
std::vector<std::vector<T>> unroll_residual_form(const RecurrenceConfig<T>& cfg) {
  cfg.validate();
  if (cfg.sharing == Sharing::none) {
    throw std::invalid_argument("unroll_residual_form: f must be shared across steps");
  }
  std::vector<std::vector<T>> r;
  r.push_back(cfg.f_at(1, 0)(cfg.x0));
  for (int k = 2; k <= cfg.steps; ++k) {
    const std::vector<T>& prev = r.back();
    std::vector<T> next = cfg.f_at(k, k - 1)(cfg.g_at(k - 1)(prev));
    detail::vec_add(next, prev);
    r.push_back(std::move(next));
  }
  return r;
}

struct EquivalenceReport {
  int trials = 0;
  int max_steps = 0;
  int state_dim = 0;
  double tolerance = 0.0;
  double max_deviation = 0.0;         // over all trials, steps and components
  std::vector<double> per_step_max;   // indexed by k - 1
  bool pass = false;
};

// Runs both unrollers on matched random shared-f configurations and reports
// the worst per-step disagreement between the dense-path sums and the
// residual recurrence (and between the h states derived from each).
template <typename T = double>
EquivalenceReport equivalence_report(int max_steps, int dim, int trials,
                                     std::uint64_t seed, double tol) {
  if (trials < 1) throw std::invalid_argument("equivalence_report: trials must be >= 1");
  EquivalenceReport rep;
  rep.trials = trials;
  rep.max_steps = max_steps;
  rep.state_dim = dim;
  rep.tolerance = tol;
  rep.per_step_max.assign(static_cast<std::size_t>(max_steps), 0.0);
  Rng rng(seed);
  for (int trial = 0; trial < trials; ++trial) {
    const int steps = max_steps <= 2 ? max_steps : 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_steps - 1)));
    auto cfg = RecurrenceConfig<T>::random(steps, dim, Sharing::share_f_over_k, rng);
    const auto h = unroll_general(cfg);
    const auto r_dense = dense_partial_sums(cfg, h);
    const auto r_res = unroll_residual_form(cfg);
    for (int k = 1; k <= steps; ++k) {
      const auto& a = r_dense[static_cast<std::size_t>(k - 1)];
      const auto& b = r_res[static_cast<std::size_t>(k - 1)];
      double dev = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        dev = std::max(dev, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
      }
      // h^k derived from each side through g^k.
      const auto ha = h[static_cast<std::size_t>(k - 1)];
      const auto hb = cfg.g_at(k)(b);
      for (std::size_t i = 0; i < ha.size(); ++i) {
        dev = std::max(dev, std::abs(static_cast<double>(ha[i]) - static_cast<double>(hb[i])));
      }
      rep.per_step_max[static_cast<std::size_t>(k - 1)] =
          std::max(rep.per_step_max[static_cast<std::size_t>(k - 1)], dev);
      rep.max_deviation = std::max(rep.max_deviation, dev);
    }
  }
  rep.pass = rep.max_deviation <= tol;
  return rep;
}

std::string format_report(const EquivalenceReport& rep);

}  // namespace dpn::hornn
