#pragma once

#include "auditlm/dataset.hpp"
#include "auditlm/decode.hpp"
#include "auditlm/model.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace auditlm {

// Index order for the four-way reports: M, P, A, All.
inline constexpr int kReportColumns = 4;
inline constexpr int kAllColumn = 3;
const std::array<std::string, kReportColumns>& report_column_names();

double perplexity_from_nll(double mean_nll);

struct PerplexityReport {
  std::array<double, kNumFields> perplexity{};
  std::array<double, kNumFields> mean_nll{};
  std::array<std::size_t, kNumFields> count{};
};

// exp(mean NLL) per field over every scored position. Throws on an empty dataset.
template <typename Scalar>
PerplexityReport per_field_perplexity(const ModelState<Scalar>& state, const TokenizedDataset& data);

struct AccuracyReport {
  std::array<double, kReportColumns> accuracy{};
  std::size_t events = 0;
};

// Exact-match rates per field plus the all-fields rate.
AccuracyReport tally_accuracy(std::span<const std::array<TokenId, kTokensPerRow>> predicted,
                              std::span<const std::array<TokenId, kTokensPerRow>> truth);

// Teacher-forced: one decoded row per event after a session's first.
template <typename Scalar>
AccuracyReport next_action_accuracy(const ModelState<Scalar>& state, std::span<const TokenizedSession> sessions,
                                    const DecodeStrategy& strategy, std::uint64_t seed = 0);

struct Rouge1 {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

// Clipped unigram overlap.
Rouge1 rouge1(std::span<const TokenId> candidate, std::span<const TokenId> reference);

struct RougeReport {
  std::array<Rouge1, kReportColumns> scores{};  // corpus means
  std::size_t sessions = 0;
};

// Row-split helpers: prompt = first ceil(R * fraction) rows, clamped to [1, R - 1].
std::size_t prompt_rows(std::size_t rows, double prompt_fraction);
std::vector<TokenId> field_tokens(std::span<const TokenId> row_tokens, Field field);

// Scores one generated continuation against its reference (both without BOS).
std::array<Rouge1, kReportColumns> rouge_by_field(std::span<const TokenId> generated, std::span<const TokenId> reference);

// Sessions with fewer than 2 rows are skipped.
template <typename Scalar>
RougeReport rouge_eval(const ModelState<Scalar>& state, std::span<const TokenizedSession> sessions,
                       const DecodeStrategy& strategy, std::uint64_t seed = 0, double prompt_fraction = 0.5);

struct EntropyRow {
  std::string metric_name;
  int patient_index = kNoPatient;
  std::string at_label;
  std::optional<double> entropy;
};

struct EntropySession {
  Provenance provenance;
  std::vector<EntropyRow> rows;
};

struct EntropyReport {
  std::vector<EntropySession> sessions;
};

std::string session_id(const Provenance& p);

// Throws VocabMismatch when the model was trained on another vocabulary.
template <typename Scalar>
EntropyReport entropy_report(const ModelState<Scalar>& state, const GlobalVocab& vocab,
                             std::span<const TokenizedSession> sessions);

// session_id,row_index,metric_name,pat_index,at_label,entropy_nats (empty cell for no value).
void write_entropy_csv(std::ostream& out, const EntropyReport& report);
// Aligned plain-text table per session; missing entropies render as "-".
void render_entropy_table(std::ostream& out, const EntropyReport& report);

template <typename Scalar>
EntropyReport emit_entropy_report(const ModelState<Scalar>& state, const GlobalVocab& vocab,
                                  std::span<const TokenizedSession> sessions, std::ostream& csv,
                                  std::ostream* table = nullptr);

struct EvalReport {
  PerplexityReport perplexity;
  AccuracyReport accuracy;
  RougeReport rouge;
  std::string strategy;
  std::uint64_t seed = 0;
  std::string vocab_hash;
  std::string model_config;  // JSON text

  std::string to_json() const;
};

}  // namespace auditlm
