#pragma once

#include "auditlm/model.hpp"

#include <array>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace auditlm {

enum class StrategyKind { Greedy, TopK, Contrastive };

struct DecodeStrategy {
  StrategyKind kind = StrategyKind::Greedy;
  int k = 5;                  // candidates for top-k sampling and contrastive search
  double temperature = 1.0;   // top-k sampling only
  double alpha = 0.6;         // contrastive degeneration penalty

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy top_k(int k, double temperature = 1.0) {
    return {StrategyKind::TopK, k, temperature, 0.6};
  }
  static DecodeStrategy contrastive(int k = 5, double alpha = 0.6) {
    return {StrategyKind::Contrastive, k, 1.0, alpha};
  }
};

std::string_view strategy_name(StrategyKind kind);
StrategyKind strategy_from_name(std::string_view name);

// Probabilities over the full vocabulary for the token after `context`; every id
// outside the predicted field's block has probability exactly 0.
struct FieldDistribution {
  Field field = Field::MetricName;
  TokenBlock block;
  VectorX<double> probs;
};

template <typename Scalar>
FieldDistribution next_field_distribution(const ModelState<Scalar>& state, std::span<const TokenId> context);

// Keeps BOS, any partial trailing row, and as many of the most recent complete rows
// as fit in context_len - reserve tokens.
std::vector<TokenId> fit_context(std::span<const TokenId> tokens, int context_len, int reserve);

// Three field-constrained selections (MN, PID, AT) after a context ending on a row boundary.
template <typename Scalar>
std::array<TokenId, kTokensPerRow> decode_row(const ModelState<Scalar>& state, std::span<const TokenId> context,
                                              const DecodeStrategy& strategy, std::mt19937_64& rng);

// Appends n_rows decoded rows to `prompt` and returns only the generated tokens.
template <typename Scalar>
std::vector<TokenId> generate_rows(const ModelState<Scalar>& state, std::span<const TokenId> prompt, std::size_t n_rows,
                                   const DecodeStrategy& strategy, std::mt19937_64& rng);

// Mean of the three field NLLs (nats) of each row given all preceding tokens.
// Row 0 has no value. Rows past the context window are scored with a trailing
// window of the most recent complete rows.
template <typename Scalar>
std::vector<std::optional<double>> per_row_entropy(const ModelState<Scalar>& state, std::span<const TokenId> tokens);

}  // namespace auditlm
