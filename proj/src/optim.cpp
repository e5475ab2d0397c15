#include "auditlm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace auditlm {

namespace {

template <typename Scalar>
void check_shapes(const ParameterList<Scalar>& params, const ParameterList<Scalar>& grads,
                  const OptimState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.second.size())
    throw ContractViolation("optimizer: parameter and gradient lists differ in length");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols() ||
        params[i].rows() != state.m[i].rows() || params[i].cols() != state.m[i].cols())
      throw ContractViolation("optimizer: shape mismatch at tensor " + std::to_string(i));
  }
}

}  // namespace

std::string_view optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::AdamW ? "adamw" : "sophia"; }

OptimizerKind optimizer_from_name(std::string_view name) {
  if (name == "adamw") return OptimizerKind::AdamW;
  if (name == "sophia") return OptimizerKind::Sophia;
  throw ConfigError("unknown optimizer: " + std::string(name));
}

template <typename Scalar>
void adamw_step(ParameterList<Scalar>& params, const ParameterList<Scalar>& grads, OptimState<Scalar>& state,
                const AdamWConfig& config) {
  check_shapes(params, grads, state);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(config.beta1), b2 = static_cast<Scalar>(config.beta2);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(config.beta1, t));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(config.beta2, t));
  const Scalar lr = static_cast<Scalar>(config.lr), wd = static_cast<Scalar>(config.weight_decay);
  const Scalar eps = static_cast<Scalar>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i].array();
    auto m = state.m[i].array();
    auto v = state.second[i].array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    auto theta = params[i].array();
    theta -= lr * ((m / bc1) / ((v / bc2).sqrt() + eps) + wd * theta);
  }
}

template <typename Scalar>
SophiaStepReport sophia_step(ParameterList<Scalar>& params, const ParameterList<Scalar>& grads,
                             OptimState<Scalar>& state, const SophiaConfig& config) {
  check_shapes(params, grads, state);
  ++state.step;
  SophiaStepReport report;
  report.stale_hessian = state.step - state.last_hessian_step > 2 * static_cast<std::int64_t>(config.hessian_interval);

  const Scalar b1 = static_cast<Scalar>(config.beta1);
  const Scalar lr = static_cast<Scalar>(config.lr), wd = static_cast<Scalar>(config.weight_decay);
  const Scalar rho = static_cast<Scalar>(config.rho), eps = static_cast<Scalar>(config.eps);
  const double ulp = std::numeric_limits<Scalar>::epsilon();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i].array();
    auto m = state.m[i].array();
    m = b1 * m + (Scalar(1) - b1) * g;
    const auto& h = state.second[i];
    Scalar* theta = params[i].data();
    const Scalar* mp = state.m[i].data();
    const Scalar* hp = h.data();
    for (Eigen::Index j = 0; j < params[i].size(); ++j) {
      const Scalar old = theta[j];
      const Scalar ratio = mp[j] / std::max(rho * hp[j], eps);
      const Scalar clipped = std::clamp(ratio, Scalar(-1), Scalar(1));
      if (std::abs(ratio) >= Scalar(1)) ++report.clipped;
      theta[j] = old - lr * wd * old - lr * clipped;
      const double delta = std::abs(static_cast<double>(theta[j]) - static_cast<double>(old));
      const double bound = static_cast<double>(lr) * (1.0 + static_cast<double>(wd) * std::abs(static_cast<double>(old)));
      // Allow for one rounding of theta itself.
      if (delta > bound * (1.0 + 4 * ulp) + 2 * ulp * std::abs(static_cast<double>(old))) ++report.bound_violations;
    }
    report.coordinates += static_cast<std::size_t>(params[i].size());
  }
  return report;
}

template <typename Scalar>
void merge_hessian_sample(OptimState<Scalar>& state, const ParameterList<Scalar>& sampled_grad, double batch_size,
                          double beta2) {
  if (sampled_grad.size() != state.second.size()) throw ContractViolation("Hessian sample has the wrong length");
  const Scalar b2 = static_cast<Scalar>(beta2), bs = static_cast<Scalar>(batch_size);
  for (std::size_t i = 0; i < state.second.size(); ++i)
    state.second[i].array() = b2 * state.second[i].array() + (Scalar(1) - b2) * bs * sampled_grad[i].array().square();
  state.last_hessian_step = state.step;
  ++state.hessian_updates;
}

template <typename Scalar>
void estimate_hessian_diag(const ModelState<Scalar>& model, std::span<const std::vector<TokenId>> batch,
                           OptimState<Scalar>& state, const SophiaConfig& config, std::mt19937_64& rng) {
  ParameterList<Scalar> g_hat;
  LossOptions opts;
  opts.sample_targets = &rng;
  const auto loss = loss_and_grads(model, batch, &g_hat, opts);
  const double scale = config.hessian_scale_tokens ? static_cast<double>(loss.count) : static_cast<double>(batch.size());
  merge_hessian_sample(state, g_hat, scale, config.beta2);
}

double scheduled_lr(std::int64_t step, double base_lr, std::int64_t warmup, std::int64_t total_steps,
                    double min_ratio) {
  if (warmup > 0 && step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::int64_t span = std::max<std::int64_t>(1, total_steps - warmup);
  const double progress = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(span), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base_lr * (min_ratio + (1.0 - min_ratio) * cosine);
}

#define AUDITLM_INSTANTIATE(S)                                                                                \
  template void adamw_step<S>(ParameterList<S>&, const ParameterList<S>&, OptimState<S>&, const AdamWConfig&); \
  template SophiaStepReport sophia_step<S>(ParameterList<S>&, const ParameterList<S>&, OptimState<S>&,         \
                                           const SophiaConfig&);                                              \
  template void merge_hessian_sample<S>(OptimState<S>&, const ParameterList<S>&, double, double);             \
  template void estimate_hessian_diag<S>(const ModelState<S>&, std::span<const std::vector<TokenId>>,         \
                                         OptimState<S>&, const SophiaConfig&, std::mt19937_64&);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
