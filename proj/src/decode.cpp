#include "auditlm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace auditlm {

namespace {

std::vector<Eigen::Index> top_indices(const VectorX<double>& logp, int k) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(logp.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return logp[a] > logp[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(k, 1))));
  return order;
}

template <typename Scalar>
double max_cosine(const RowVectorX<Scalar>& candidate, const MatrixX<Scalar>& prior, Eigen::Index n_prior) {
  const Eigen::Matrix<double, 1, Eigen::Dynamic> c = candidate.template cast<double>();
  const double cn = c.norm();
  double best = -1.0;
  for (Eigen::Index j = 0; j < n_prior; ++j) {
    const Eigen::Matrix<double, 1, Eigen::Dynamic> h = prior.row(j).template cast<double>();
    const double denom = cn * h.norm();
    const double cos = denom > 0.0 ? c.dot(h) / denom : 0.0;
    best = std::max(best, cos);
  }
  return best;
}

template <typename Scalar>
TokenId select_next(const ModelState<Scalar>& state, std::vector<TokenId>& ctx, const DecodeStrategy& strategy,
                    std::mt19937_64& rng) {
  const int C = state.config.context_len;
  const int reserve = strategy.kind == StrategyKind::Contrastive ? 1 : 0;
  if (static_cast<int>(ctx.size()) + reserve > C) ctx = fit_context(ctx, C, reserve);

  const auto fwd = forward(state, ctx);
  const Eigen::Index last = static_cast<Eigen::Index>(ctx.size()) - 1;
  const auto& block = state.config.fields.block(*field_of(ctx.size()));
  const VectorX<double> logp = masked_log_softmax<Scalar>(fwd.logits.row(last), block);

  switch (strategy.kind) {
    case StrategyKind::Greedy: {
      Eigen::Index best = 0;
      logp.maxCoeff(&best);
      return block.begin + static_cast<TokenId>(best);
    }
    case StrategyKind::TopK: {
      if (!(strategy.temperature > 0.0)) throw ContractViolation("sampling temperature must be positive");
      const auto cand = top_indices(logp, strategy.k);
      std::vector<double> w;
      const double top = logp[cand.front()];
      for (auto i : cand) w.push_back(std::exp((logp[i] - top) / strategy.temperature));
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      return block.begin + static_cast<TokenId>(cand[pick(rng)]);
    }
    case StrategyKind::Contrastive: {
      const auto cand = top_indices(logp, strategy.k);
      if (cand.size() == 1) return block.begin + static_cast<TokenId>(cand.front());
      double best_score = -std::numeric_limits<double>::infinity();
      Eigen::Index best = cand.front();
      std::vector<TokenId> extended = ctx;
      extended.push_back(0);
      for (auto i : cand) {
        extended.back() = block.begin + static_cast<TokenId>(i);
        const auto ext = forward(state, extended);
        const RowVectorX<Scalar> h = ext.hidden.row(last + 1);
        const double penalty = max_cosine<Scalar>(h, ext.hidden, last + 1);
        const double score = (1.0 - strategy.alpha) * std::exp(logp[i]) - strategy.alpha * penalty;
        if (score > best_score) {
          best_score = score;
          best = i;
        }
      }
      return block.begin + static_cast<TokenId>(best);
    }
  }
  throw ContractViolation("unknown decoding strategy");
}

}  // namespace

std::string_view strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::Greedy:
      return "greedy";
    case StrategyKind::TopK:
      return "topk";
    case StrategyKind::Contrastive:
      return "contrastive";
  }
  return "?";
}

StrategyKind strategy_from_name(std::string_view name) {
  if (name == "greedy") return StrategyKind::Greedy;
  if (name == "topk" || name == "sample") return StrategyKind::TopK;
  if (name == "contrastive") return StrategyKind::Contrastive;
  throw ConfigError("unknown decoding strategy: " + std::string(name));
}

std::vector<TokenId> fit_context(std::span<const TokenId> tokens, int context_len, int reserve) {
  if (tokens.empty() || tokens[0] != kBos) throw ContractViolation("context must start with BOS");
  const std::size_t n = tokens.size();
  const std::size_t partial = (n - 1) % kTokensPerRow;
  const std::size_t rows = (n - 1) / kTokensPerRow;
  const int budget = context_len - reserve - 1 - static_cast<int>(partial);
  if (budget < 0) throw ContractViolation("context window too small");
  const std::size_t keep = std::min(rows, static_cast<std::size_t>(budget / kTokensPerRow));
  std::vector<TokenId> out;
  out.reserve(1 + keep * kTokensPerRow + partial);
  out.push_back(kBos);
  out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(1 + (rows - keep) * kTokensPerRow),
             tokens.end());
  return out;
}

template <typename Scalar>
FieldDistribution next_field_distribution(const ModelState<Scalar>& state, std::span<const TokenId> context) {
  if (context.empty()) throw ContractViolation("context must contain at least BOS");
  std::vector<TokenId> ctx(context.begin(), context.end());
  if (static_cast<int>(ctx.size()) > state.config.context_len) ctx = fit_context(ctx, state.config.context_len, 0);
  const auto fwd = forward(state, ctx);
  FieldDistribution d;
  d.field = *field_of(ctx.size());
  d.block = state.config.fields.block(d.field);
  const auto logp = masked_log_softmax<Scalar>(fwd.logits.row(static_cast<Eigen::Index>(ctx.size()) - 1), d.block);
  d.probs = VectorX<double>::Zero(state.config.vocab_size());
  d.probs.segment(d.block.begin, d.block.size) = logp.array().exp().matrix();
  return d;
}

template <typename Scalar>
std::array<TokenId, kTokensPerRow> decode_row(const ModelState<Scalar>& state, std::span<const TokenId> context,
                                              const DecodeStrategy& strategy, std::mt19937_64& rng) {
  if (context.empty() || (context.size() - 1) % kTokensPerRow != 0)
    throw ContractViolation("decode_row needs a context that ends on a row boundary");
  std::vector<TokenId> ctx(context.begin(), context.end());
  std::array<TokenId, kTokensPerRow> row{};
  for (int f = 0; f < kTokensPerRow; ++f) {
    row[static_cast<std::size_t>(f)] = select_next(state, ctx, strategy, rng);
    ctx.push_back(row[static_cast<std::size_t>(f)]);
  }
  return row;
}

template <typename Scalar>
std::vector<TokenId> generate_rows(const ModelState<Scalar>& state, std::span<const TokenId> prompt, std::size_t n_rows,
                                   const DecodeStrategy& strategy, std::mt19937_64& rng) {
  std::vector<TokenId> ctx(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  out.reserve(n_rows * kTokensPerRow);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto row = decode_row(state, ctx, strategy, rng);
    ctx.insert(ctx.end(), row.begin(), row.end());
    out.insert(out.end(), row.begin(), row.end());
    if (static_cast<int>(ctx.size()) >= state.config.context_len)
      ctx = fit_context(ctx, state.config.context_len, kTokensPerRow + 1);
  }
  return out;
}

template <typename Scalar>
std::vector<std::optional<double>> per_row_entropy(const ModelState<Scalar>& state, std::span<const TokenId> tokens) {
  if (tokens.empty() || tokens[0] != kBos || (tokens.size() - 1) % kTokensPerRow != 0)
    throw ContractViolation("per_row_entropy needs a tokenized session");
  const std::size_t rows = (tokens.size() - 1) / kTokensPerRow;
  std::vector<std::optional<double>> out(rows);
  if (rows < 2) return out;

  auto row_mean = [](const std::vector<double>& nll, std::size_t first) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (std::size_t q = first; q < first + kTokensPerRow; ++q) {
      if (std::isnan(nll[q])) continue;
      sum += nll[q];
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
  };

  const int C = state.config.context_len;
  const std::size_t fit_rows = std::min(rows, static_cast<std::size_t>(state.config.max_rows()));
  const auto head = token_nll(state, tokens.subspan(0, 1 + fit_rows * kTokensPerRow));
  for (std::size_t r = 1; r < fit_rows; ++r) out[r] = row_mean(head, 1 + r * kTokensPerRow);

  const std::size_t window = static_cast<std::size_t>((C - 1) / kTokensPerRow);
  std::vector<TokenId> buf;
  for (std::size_t r = fit_rows; r < rows; ++r) {
    const std::size_t first_row = r + 1 - window;
    buf.assign(1, kBos);
    buf.insert(buf.end(), tokens.begin() + static_cast<std::ptrdiff_t>(1 + first_row * kTokensPerRow),
               tokens.begin() + static_cast<std::ptrdiff_t>(1 + (r + 1) * kTokensPerRow));
    const auto nll = token_nll(state, buf);
    out[r] = row_mean(nll, 1 + (window - 1) * kTokensPerRow);
  }
  return out;
}

#define AUDITLM_INSTANTIATE(S)                                                                                   \
  template FieldDistribution next_field_distribution<S>(const ModelState<S>&, std::span<const TokenId>);        \
  template std::array<TokenId, kTokensPerRow> decode_row<S>(const ModelState<S>&, std::span<const TokenId>,     \
                                                            const DecodeStrategy&, std::mt19937_64&);           \
  template std::vector<TokenId> generate_rows<S>(const ModelState<S>&, std::span<const TokenId>, std::size_t,   \
                                                 const DecodeStrategy&, std::mt19937_64&);                      \
  template std::vector<std::optional<double>> per_row_entropy<S>(const ModelState<S>&, std::span<const TokenId>);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
