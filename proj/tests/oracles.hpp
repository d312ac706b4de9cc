#pragma once

// Independent reference implementations used by the unit tests and the acceptance binary.
// Nothing here calls the library's softmax, normalization or advantage code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "grpolab/algorithms.hpp"
#include "grpolab/policy.hpp"

namespace oracle {

using namespace grpolab;

// log pi(o_t) from explicit logit sums and a two-pass softmax.
inline std::vector<double> scalar_logprob(const PolicyParams& p, const TokenSeq& seq) {
  const auto& w = p.weights();
  const int V = p.vocab().size();
  std::vector<double> out;
  std::vector<std::size_t> feats;
  for (std::size_t t = 0; t < seq.output.size(); ++t) {
    feats.clear();
    p.feature_map().active(p.vocab(), seq.question, std::span(seq.output).first(t), feats);
    std::vector<double> z(V, 0.0);
    for (int v = 0; v < V; ++v) {
      for (auto f : feats) z[v] += w.at(v, f);
    }
    double zmax = z[0];
    for (double x : z) zmax = std::max(zmax, x);
    double denom = 0.0;
    for (double x : z) denom += std::exp(x - zmax);
    out.push_back(z[seq.output[t]] - zmax - std::log(denom));
  }
  return out;
}

inline double mean(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

inline double pop_std(std::span<const double> x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return x.empty() ? 0.0 : std::sqrt(s / static_cast<double>(x.size()));
}

// Token t of output i gets the sum of jointly normalized step scores whose end is >= t.
inline AdvantageTensor suffix_sum_advantages(std::span<const StepRewards> rewards, std::span<const std::size_t> lengths) {
  std::vector<double> all;
  for (const auto& r : rewards) {
    for (const auto& [_, s] : r) all.push_back(s);
  }
  const double m = mean(all);
  const double sd = pop_std(all);
  AdvantageTensor out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i].assign(lengths[i], 0.0);
    for (std::size_t t = 0; t < lengths[i]; ++t) {
      for (const auto& [end, s] : rewards[i]) {
        if (end >= t) out[i][t] += sd > 0.0 ? (s - m) / sd : 0.0;
      }
    }
  }
  return out;
}

// GAE by the explicit double sum A_t = sum_l (gamma lambda)^l delta_{t+l}.
inline std::vector<double> gae_double_loop(std::span<const double> r, std::span<const double> v, double gamma,
                                           double lambda) {
  const std::size_t T = r.size();
  std::vector<double> a(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double w = 1.0;
    for (std::size_t l = t; l < T; ++l) {
      const double next = l + 1 < T ? v[l + 1] : 0.0;
      a[t] += w * (r[l] + gamma * next - v[l]);
      w *= gamma * lambda;
    }
  }
  return a;
}

// Micro instances: 8-token vocabulary (2 values, 2 operators), window 2.
inline Vocab micro_vocab() { return Vocab(2, 2); }

inline PolicyParams random_policy(std::mt19937_64& rng, double scale, int window = 2) {
  auto p = PolicyParams::zeros(micro_vocab(), window);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& x : p.weights().flat()) x = n(rng);
  return p;
}

inline TokenSeq random_seq(std::mt19937_64& rng, std::size_t max_out = 5) {
  const Vocab v = micro_vocab();
  std::uniform_int_distribution<int> val(0, v.value_count - 1);
  std::uniform_int_distribution<int> op(0, v.op_count - 1);
  std::uniform_int_distribution<int> tok(0, v.size() - 1);
  std::uniform_int_distribution<std::size_t> len(1, max_out);
  std::vector<TokenId> q{val(rng), v.op(op(rng)), val(rng)};
  std::vector<TokenId> o(len(rng));
  for (auto& t : o) t = tok(rng);
  return TokenSeq::make(v, std::move(q), std::move(o));
}

struct FdResult {
  double rel_error = 0.0;
  double grad_norm = 0.0;
  std::size_t coords = 0;
};

// Central differences of f over every weight in the columns active for `seqs`, plus `extra`
// random coordinates elsewhere. Relative error is ||fd - g|| / max(||g||, floor).
inline FdResult check_gradient(PolicyParams p, const std::function<double(const PolicyParams&)>& f,
                               const ParamArray& g, std::span<const TokenSeq> seqs, std::mt19937_64& rng,
                               double h = 1e-5, std::size_t extra = 16) {
  std::vector<std::size_t> cols;
  std::vector<std::size_t> feats;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t < s.output.size(); ++t) {
      feats.clear();
      p.feature_map().active(p.vocab(), s.question, std::span(s.output).first(t), feats);
      cols.insert(cols.end(), feats.begin(), feats.end());
    }
  }
  std::uniform_int_distribution<std::size_t> any(0, p.weights().features() - 1);
  for (std::size_t i = 0; i < extra; ++i) cols.push_back(any(rng));
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());

  double diff2 = 0.0;
  double norm2 = 0.0;
  FdResult r;
  for (auto c : cols) {
    for (std::size_t v = 0; v < p.weights().vocab(); ++v) {
      double& x = p.weights().at(v, c);
      const double x0 = x;
      x = x0 + h;
      const double fp = f(p);
      x = x0 - h;
      const double fm = f(p);
      x = x0;
      const double fd = (fp - fm) / (2 * h);
      const double an = g.at(v, c);
      diff2 += (fd - an) * (fd - an);
      norm2 += an * an;
      ++r.coords;
    }
  }
  r.grad_norm = std::sqrt(norm2);
  r.rel_error = std::sqrt(diff2) / std::max(r.grad_norm, 1e-6);
  return r;
}

}  // namespace oracle
