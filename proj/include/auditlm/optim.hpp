#pragma once

#include "auditlm/model.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace auditlm {

enum class OptimizerKind { AdamW, Sophia };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(std::string_view name);

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct SophiaConfig {
  double lr = 3e-4;
  double beta1 = 0.965;
  double beta2 = 0.99;
  double rho = 0.04;
  double weight_decay = 0.1;
  double eps = 1e-12;
  int hessian_interval = 10;  // optimizer steps between Hessian refreshes
  // GNB scale B: sequences in the batch, or scored target tokens.
  bool hessian_scale_tokens = false;
};

// m: first moment. second: v for AdamW, Hessian-diagonal EMA h for Sophia.
template <typename Scalar>
struct OptimState {
  OptimizerKind kind = OptimizerKind::Sophia;
  ParameterList<Scalar> m;
  ParameterList<Scalar> second;
  std::int64_t step = 0;
  std::int64_t last_hessian_step = 0;
  std::int64_t hessian_updates = 0;
};

template <typename Scalar>
OptimState<Scalar> make_optim_state(OptimizerKind kind, const ParameterList<Scalar>& params) {
  return OptimState<Scalar>{kind, zeros_like(params), zeros_like(params), 0, 0, 0};
}

// Decoupled weight decay, bias-corrected moments:
// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <typename Scalar>
void adamw_step(ParameterList<Scalar>& params, const ParameterList<Scalar>& grads, OptimState<Scalar>& state,
                const AdamWConfig& config);

struct SophiaStepReport {
  bool stale_hessian = false;       // h older than 2 * hessian_interval steps
  std::size_t clipped = 0;          // coordinates where |m / max(rho h, eps)| >= 1
  std::size_t bound_violations = 0; // coordinates with |delta| > lr * (1 + wd |theta|)
  std::size_t coordinates = 0;
};

// m <- b1 m + (1 - b1) g;  theta <- theta - lr * wd * theta - lr * clip(m / max(rho h, eps), -1, 1).
template <typename Scalar>
SophiaStepReport sophia_step(ParameterList<Scalar>& params, const ParameterList<Scalar>& grads,
                             OptimState<Scalar>& state, const SophiaConfig& config);

// h <- beta2 h + (1 - beta2) * batch_size * g_hat^2, where g_hat is a gradient of the
// loss against labels sampled from the model itself.
template <typename Scalar>
void merge_hessian_sample(OptimState<Scalar>& state, const ParameterList<Scalar>& sampled_grad, double batch_size,
                          double beta2);

// Gauss-Newton-Bartlett estimate on a batch of token sequences; refreshes state.second.
template <typename Scalar>
void estimate_hessian_diag(const ModelState<Scalar>& model, std::span<const std::vector<TokenId>> batch,
                           OptimState<Scalar>& state, const SophiaConfig& config, std::mt19937_64& rng);

// Linear warmup to base_lr over `warmup` steps, then cosine decay to min_ratio * base_lr at total_steps.
double scheduled_lr(std::int64_t step, double base_lr, std::int64_t warmup, std::int64_t total_steps,
                    double min_ratio = 0.1);

}  // namespace auditlm
