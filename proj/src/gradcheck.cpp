#include "mimdet/gradcheck.hpp"

#include <cmath>

#include "mimdet/random.hpp"

namespace mimdet {

GradCheckResult finite_difference_check(TrainState& state, const Tensor& batch,
                                        long n_samples, std::uint64_t seed, double step) {
  ParamStore grads = loss_gradients(state, batch);

  // Flatten the parameter universe so every scalar is equally likely.
  long total = 0;
  for (const std::string& name : state.params.names()) total += state.params.at(name).numel();
  Rng rng(seed);

  GradCheckResult result;
  for (long s = 0; s < n_samples; ++s) {
    long pick = rng.below(total);
    std::string name;
    for (const std::string& n : state.params.names()) {
      const long sz = state.params.at(n).numel();
      if (pick < sz) {
        name = n;
        break;
      }
      pick -= sz;
    }
    Tensor& w = state.params.at(name);
    const double saved = w[pick];
    w[pick] = saved + step;
    const double up = training_loss(state, batch);
    w[pick] = saved - step;
    const double down = training_loss(state, batch);
    w[pick] = saved;

    const double fd = (up - down) / (2.0 * step);
    const double an = grads.at(name)[pick];
    const double denom = std::max(std::abs(fd), std::abs(an));
    double err;
    if (denom < 1e-6)
      err = std::abs(fd - an) < 1e-10 ? 0.0 : 1.0;
    else
      err = std::abs(fd - an) / denom;
    if (err > result.max_rel_err) {
      result.max_rel_err = err;
      result.worst_param = name + "[" + std::to_string(pick) + "]";
    }
    ++result.checked;
  }
  return result;
}

}  // namespace mimdet
