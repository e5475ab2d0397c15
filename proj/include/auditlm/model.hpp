#pragma once

#include "auditlm/common.hpp"
#include "auditlm/model_config.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace auditlm {

enum class ParameterInit { Normal, ResidualNormal, Zeros, Ones };

struct ParameterSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  ParameterInit init = ParameterInit::Normal;
};

// Named tensor layout for a config, in the order ModelState::params stores them.
std::vector<ParameterSpec> parameter_specs(const ModelConfig& config);

template <typename Scalar>
struct ModelState {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  ParameterList<Scalar> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.size());
    return n;
  }
  bool all_finite() const {
    for (const auto& p : params)
      if (!p.allFinite()) return false;
    return true;
  }
};

// N(0, 0.02) weights, residual projections scaled by 1/sqrt(2 * n_layers),
// zero biases, unit norm gains. Same (config, seed) gives identical parameters.
template <typename Scalar>
ModelState<Scalar> init_model(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash = 0);

template <typename To, typename From>
ModelState<To> cast_model(const ModelState<From>& from) {
  ModelState<To> to{from.config, from.vocab_hash, {}};
  to.params.reserve(from.params.size());
  for (const auto& p : from.params) to.params.push_back(p.template cast<To>());
  return to;
}

template <typename Scalar>
ParameterList<Scalar> zeros_like(const ParameterList<Scalar>& params) {
  ParameterList<Scalar> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(MatrixX<Scalar>::Zero(p.rows(), p.cols()));
  return out;
}

template <typename Scalar>
struct ForwardResult {
  MatrixX<Scalar> logits;  // positions x vocab_size
  MatrixX<Scalar> hidden;  // positions x d_model, after the final norm
};

// Causal forward pass. Throws ContractViolation for empty or overlong input.
template <typename Scalar>
ForwardResult<Scalar> forward(const ModelState<Scalar>& state, std::span<const TokenId> tokens);

// True when the token at `position` is scored: it lies inside the block of the field
// that position predicts. PAD, BOS and the UNK/OOV specials are never scored.
bool is_scored_target(const FieldLayout& layout, std::span<const TokenId> tokens, std::size_t position);

struct LossReport {
  double loss = 0.0;  // mean NLL over scored positions (nats)
  std::array<double, kNumFields> field_loss{};
  std::array<double, kNumFields> field_nll_sum{};
  std::array<std::size_t, kNumFields> field_count{};
  std::size_t count = 0;
};

struct LossOptions {
  double grad_scale = 1.0;
  bool accumulate = false;  // add into *grads instead of overwriting
  // When set, targets are drawn from the model's own field-masked distribution
  // at every scored position (Gauss-Newton-Bartlett estimator).
  std::mt19937_64* sample_targets = nullptr;
};

// Field-masked cross-entropy over a batch. PAD marks padding: a position whose
// target is PAD (or any unscored token) contributes nothing. Gradients are exact
// for the reported mean loss; pass grads == nullptr for loss only.
template <typename Scalar>
LossReport loss_and_grads(const ModelState<Scalar>& state, std::span<const std::vector<TokenId>> batch,
                          ParameterList<Scalar>* grads, const LossOptions& options = {});

// NLL of each token given everything before it; NaN where unscored (including position 0).
template <typename Scalar>
std::vector<double> token_nll(const ModelState<Scalar>& state, std::span<const TokenId> tokens);

// log softmax over one field block of a logit row.
template <typename Scalar>
VectorX<double> masked_log_softmax(const Eigen::Ref<const RowVectorX<Scalar>>& logits, const TokenBlock& block);

}  // namespace auditlm
