#ifndef IEDP_OPTIM_HPP
#define IEDP_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iedp/checkpoint.hpp"
#include "iedp/nn.hpp"

namespace iedp {

// base_lr * (1 - iter/max_iters)^power
inline double poly_lr(std::int64_t iter, double base_lr, std::int64_t max_iters, double power) {
  if (iter < 0 || iter >= max_iters)
    throw Error("poly_lr: iteration " + std::to_string(iter) + " outside schedule of " +
                std::to_string(max_iters));
  double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iters);
  return base_lr * std::pow(frac, power);
}

// Decoupled weight decay: theta <- theta - lr*(mhat/(sqrt(vhat)+eps) + wd*theta)
template <class S>
class AdamW {
 public:
  AdamW(S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter<S>*>& params, S lr, S weight_decay) {
    ++t_;
    S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
    S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
    for (auto* p : params) {
      if (p->frozen) continue;
      const ArrayX<S>& g = p->value.grad();
      if (g.size() != p->value.numel()) continue;  // never touched by a graph
      if (!g.allFinite()) {
        ++skipped_nonfinite_;
        continue;
      }
      auto& st = state_[p->name];
      if (st.m.size() != g.size()) {
        st.m = ArrayX<S>::Zero(g.size());
        st.v = ArrayX<S>::Zero(g.size());
      }
      st.m = beta1_ * st.m + (S(1) - beta1_) * g;
      st.v = beta2_ * st.v + (S(1) - beta2_) * g.square();
      ArrayX<S> mhat = st.m / bc1;
      ArrayX<S> vhat = st.v / bc2;
      p->value.array() -= lr * (mhat / (vhat.sqrt() + eps_) + weight_decay * p->value.array());
    }
  }

  std::int64_t step_count() const { return t_; }
  std::int64_t skipped_nonfinite() const { return skipped_nonfinite_; }
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }
  std::size_t state_size() const { return state_.size(); }

  void save_state(NamedTensors& nt) const {
    nt.put_scalar("opt.t", static_cast<float>(t_));
    for (const auto& [name, st] : state_) {
      std::vector<float> m(static_cast<std::size_t>(st.m.size())),
          v(static_cast<std::size_t>(st.v.size()));
      for (Index i = 0; i < st.m.size(); ++i) {
        m[static_cast<std::size_t>(i)] = static_cast<float>(st.m[i]);
        v[static_cast<std::size_t>(i)] = static_cast<float>(st.v[i]);
      }
      nt.put("opt.m." + name, {st.m.size()}, std::move(m));
      nt.put("opt.v." + name, {st.v.size()}, std::move(v));
    }
  }

  void load_state(const NamedTensors& nt) {
    t_ = static_cast<std::int64_t>(nt.get_scalar("opt.t"));
    state_.clear();
    for (const auto& [name, entry] : nt.entries) {
      if (name.rfind("opt.m.", 0) != 0) continue;
      std::string pname = name.substr(6);
      const auto& m = entry.second;
      const auto& v = nt.get("opt.v." + pname).second;
      auto& st = state_[pname];
      st.m.resize(static_cast<Index>(m.size()));
      st.v.resize(static_cast<Index>(v.size()));
      for (std::size_t i = 0; i < m.size(); ++i) {
        st.m[static_cast<Index>(i)] = static_cast<S>(m[i]);
        st.v[static_cast<Index>(i)] = static_cast<S>(v[i]);
      }
    }
  }

 private:
  struct State {
    ArrayX<S> m, v;
  };
  S beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::int64_t skipped_nonfinite_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace iedp

#endif  // IEDP_OPTIM_HPP
