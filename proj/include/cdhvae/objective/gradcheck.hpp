#pragma once

// Finite-difference check of the beta-ELBO gradient on a double model.

#include <cmath>
#include <string>

#include "cdhvae/objective/objective.hpp"

namespace cdhvae::objective {

struct GradCheckResult {
  double max_relative_error = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
  std::size_t checked = 0;
};

/// Compares the tape gradient of the batch loss with central differences for
/// every parameter scalar. Relative error is |a - n| / max(|a|, |n|, floor);
/// the floor keeps entries whose true gradient is zero from dividing by
/// round-off.
inline GradCheckResult gradient_check(model::Cdhvae<double>& m, const Tensor<double>& x,
                                      const std::vector<SpeakerId>& y, double beta, std::uint64_t seed,
                                      double step = 1e-5, double floor = 1e-3) {
  auto loss_at = [&] {
    ad::Tape<double> tape(false);
    Rng rng(seed);
    return elbo_graph(m, tape, x, y, beta, rng).loss.value()[0];
  };
  auto& params = m.parameters();
  params.zero_grad();
  {
    ad::Tape<double> tape(true);
    Rng rng(seed);
    auto g = elbo_graph(m, tape, x, y, beta, rng);
    tape.backward(g.loss);
  }
  GradCheckResult r;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& prm = params[p];
    for (std::size_t i = 0; i < prm.value.size(); ++i) {
      const double saved = prm.value[i];
      prm.value[i] = saved + step;
      const double up = loss_at();
      prm.value[i] = saved - step;
      const double down = loss_at();
      prm.value[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = prm.grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++r.checked;
      if (rel > r.max_relative_error) {
        r.max_relative_error = rel;
        r.worst_parameter = prm.name;
        r.worst_index = i;
        r.worst_analytic = analytic;
        r.worst_numeric = numeric;
      }
    }
  }
  return r;
}

}  // namespace cdhvae::objective
