#ifndef IEDP_GRADCHECK_HPP
#define IEDP_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "iedp/nn.hpp"
#include "iedp/tensor.hpp"

namespace iedp {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  Index entries_checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  double h = 1e-5;
  double tol = 1e-4;
  std::vector<GradCheckEntry> params;
  bool pass = true;

  double worst() const {
    double w = 0;
    for (const auto& e : params) w = std::max(w, e.max_rel_err);
    return w;
  }
};

// Central-difference check of reverse-mode gradients at 64-bit.
// f must be a deterministic scalar function of the given parameters.
// max_entries < 0 checks every element; otherwise a seeded subset per tensor.
inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                         const std::vector<Parameter<double>*>& params,
                                         double h = 1e-5, double tol = 1e-4,
                                         Index max_entries = -1,
                                         std::uint64_t sample_seed = 12345) {
  GradCheckReport report;
  report.h = h;
  report.tol = tol;

  for (auto* p : params) p->value.zero_grad();
  auto loss = f();
  if (!std::isfinite(loss.item())) throw Error("finite_diff_check: loss is not finite");
  backward(loss);

  std::vector<ArrayX<double>> analytic;
  for (auto* p : params) analytic.push_back(p->value.grad());

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    if (p->frozen) continue;  // frozen parameters are excluded from the report
    GradCheckEntry entry;
    entry.name = p->name;

    Index n = p->value.numel();
    std::vector<Index> picks;
    if (max_entries < 0 || n <= max_entries) {
      picks.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) picks[static_cast<std::size_t>(i)] = i;
    } else {
      Rng rng(mix_seed(sample_seed, fnv1a(p->name)));
      for (Index i = 0; i < max_entries; ++i)
        picks.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    }

    for (Index i : picks) {
      double orig = p->value.array()[i];
      p->value.array()[i] = orig + h;
      double fp = f().item();
      p->value.array()[i] = orig - h;
      double fm = f().item();
      p->value.array()[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw Error("finite_diff_check: non-finite output while perturbing " + p->name);
      double g_fd = (fp - fm) / (2 * h);
      double g_ad = analytic[pi][i];
      double rel = std::abs(g_ad - g_fd) / (std::abs(g_ad) + std::abs(g_fd) + 1e-12);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.entries_checked;
    }
    entry.pass = entry.max_rel_err <= tol;
    if (!entry.pass) report.pass = false;
    report.params.push_back(entry);
  }
  return report;
}

}  // namespace iedp

#endif  // IEDP_GRADCHECK_HPP
