#include "auditlm/eval.hpp"

#include "auditlm/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace auditlm {

using nlohmann::json;

const std::array<std::string, kReportColumns>& report_column_names() {
  static const std::array<std::string, kReportColumns> names{"M", "P", "A", "All"};
  return names;
}

double perplexity_from_nll(double mean_nll) { return std::exp(mean_nll); }

template <typename Scalar>
PerplexityReport per_field_perplexity(const ModelState<Scalar>& state, const TokenizedDataset& data) {
  if (data.sequences.empty()) throw ContractViolation("perplexity needs a nonempty dataset");
  if (data.vocab_hash != state.vocab_hash)
    throw VocabMismatch("dataset vocabulary " + hash_hex(data.vocab_hash) + " differs from the model's " +
                        hash_hex(state.vocab_hash));
  const auto loss = dataset_loss(state, data);
  if (loss.count == 0) throw ContractViolation("dataset has no scored positions");
  PerplexityReport r;
  for (int f = 0; f < kNumFields; ++f) {
    r.count[f] = loss.field_count[f];
    r.mean_nll[f] = r.count[f] ? loss.field_nll_sum[f] / static_cast<double>(r.count[f]) : std::nan("");
    r.perplexity[f] = perplexity_from_nll(r.mean_nll[f]);
  }
  return r;
}

AccuracyReport tally_accuracy(std::span<const std::array<TokenId, kTokensPerRow>> predicted,
                              std::span<const std::array<TokenId, kTokensPerRow>> truth) {
  if (predicted.size() != truth.size()) throw ContractViolation("prediction and truth counts differ");
  std::array<std::size_t, kReportColumns> hits{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    bool all = true;
    for (int f = 0; f < kTokensPerRow; ++f) {
      const bool ok = predicted[i][f] == truth[i][f];
      hits[f] += ok;
      all = all && ok;
    }
    hits[kAllColumn] += all;
  }
  AccuracyReport report;
  report.events = truth.size();
  if (report.events)
    for (int c = 0; c < kReportColumns; ++c)
      report.accuracy[c] = static_cast<double>(hits[c]) / static_cast<double>(report.events);
  return report;
}

template <typename Scalar>
AccuracyReport next_action_accuracy(const ModelState<Scalar>& state, std::span<const TokenizedSession> sessions,
                                    const DecodeStrategy& strategy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::array<TokenId, kTokensPerRow>> predicted, truth;
  const int C = state.config.context_len;
  for (const auto& s : sessions) {
    for (std::size_t r = 1; r < s.rows(); ++r) {
      const std::span<const TokenId> prefix(s.ids.data(), 1 + r * kTokensPerRow);
      predicted.push_back(decode_row(state, fit_context(prefix, C, kTokensPerRow), strategy, rng));
      std::array<TokenId, kTokensPerRow> t{};
      std::copy_n(s.ids.begin() + static_cast<std::ptrdiff_t>(1 + r * kTokensPerRow), kTokensPerRow, t.begin());
      truth.push_back(t);
    }
  }
  return tally_accuracy(predicted, truth);
}

Rouge1 rouge1(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  std::unordered_map<TokenId, std::size_t> ref_counts;
  for (TokenId t : reference) ++ref_counts[t];
  std::size_t matches = 0;
  for (TokenId t : candidate) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++matches;
    }
  }
  Rouge1 r;
  if (!reference.empty()) r.recall = static_cast<double>(matches) / static_cast<double>(reference.size());
  if (!candidate.empty()) r.precision = static_cast<double>(matches) / static_cast<double>(candidate.size());
  if (r.recall + r.precision > 0) r.f1 = 2 * r.recall * r.precision / (r.recall + r.precision);
  return r;
}

std::size_t prompt_rows(std::size_t rows, double prompt_fraction) {
  if (rows < 2) throw ContractViolation("need at least 2 rows to split into prompt and reference");
  const auto p = static_cast<std::size_t>(std::ceil(static_cast<double>(rows) * prompt_fraction - 1e-9));
  return std::clamp<std::size_t>(p, 1, rows - 1);
}

std::vector<TokenId> field_tokens(std::span<const TokenId> row_tokens, Field field) {
  std::vector<TokenId> out;
  for (std::size_t i = static_cast<std::size_t>(field); i < row_tokens.size(); i += kTokensPerRow)
    out.push_back(row_tokens[i]);
  return out;
}

std::array<Rouge1, kReportColumns> rouge_by_field(std::span<const TokenId> generated, std::span<const TokenId> reference) {
  std::array<Rouge1, kReportColumns> out;
  for (int f = 0; f < kNumFields; ++f) {
    const auto g = field_tokens(generated, static_cast<Field>(f));
    const auto r = field_tokens(reference, static_cast<Field>(f));
    out[f] = rouge1(g, r);
  }
  out[kAllColumn] = rouge1(generated, reference);
  return out;
}

template <typename Scalar>
RougeReport rouge_eval(const ModelState<Scalar>& state, std::span<const TokenizedSession> sessions,
                       const DecodeStrategy& strategy, std::uint64_t seed, double prompt_fraction) {
  std::mt19937_64 rng(seed);
  RougeReport report;
  for (const auto& s : sessions) {
    const std::size_t rows = s.rows();
    if (rows < 2) continue;
    const std::size_t p = prompt_rows(rows, prompt_fraction);
    const std::span<const TokenId> prompt(s.ids.data(), 1 + p * kTokensPerRow);
    const std::span<const TokenId> reference(s.ids.data() + 1 + p * kTokensPerRow, (rows - p) * kTokensPerRow);
    const auto ctx = fit_context(prompt, state.config.context_len, kTokensPerRow);
    const auto generated = generate_rows(state, ctx, rows - p, strategy, rng);
    const auto scores = rouge_by_field(generated, reference);
    for (int c = 0; c < kReportColumns; ++c) {
      report.scores[c].recall += scores[c].recall;
      report.scores[c].precision += scores[c].precision;
      report.scores[c].f1 += scores[c].f1;
    }
    ++report.sessions;
  }
  if (report.sessions) {
    const auto n = static_cast<double>(report.sessions);
    for (auto& sc : report.scores) {
      sc.recall /= n;
      sc.precision /= n;
      sc.f1 /= n;
    }
  }
  return report;
}

std::string session_id(const Provenance& p) {
  return p.user_id + "/" + std::to_string(p.shift_index) + "/" + std::to_string(p.session_index) + "/" +
         std::to_string(p.chunk_index);
}

template <typename Scalar>
EntropyReport entropy_report(const ModelState<Scalar>& state, const GlobalVocab& vocab,
                             std::span<const TokenizedSession> sessions) {
  if (vocab.hash() != state.vocab_hash)
    throw VocabMismatch("vocabulary " + hash_hex(vocab.hash()) + " differs from the model's " +
                        hash_hex(state.vocab_hash));
  const auto quantizer = QuantizerSpec::standard();
  EntropyReport report;
  for (const auto& s : sessions) {
    const auto decoded = decode_tokens(s.ids, vocab);
    const auto entropy = per_row_entropy(state, std::span<const TokenId>(s.ids));
    EntropySession out;
    out.provenance = s.provenance;
    for (std::size_t r = 0; r < decoded.rows.size(); ++r) {
      const auto& row = decoded.rows[r];
      out.rows.push_back(EntropyRow{row.metric_name, row.patient_index,
                                    quantizer.labels[static_cast<std::size_t>(row.delta_bin)], entropy[r]});
    }
    report.sessions.push_back(std::move(out));
  }
  return report;
}

void write_entropy_csv(std::ostream& out, const EntropyReport& report) {
  out << "session_id,row_index,metric_name,pat_index,at_label,entropy_nats\n";
  std::ostringstream num;
  for (const auto& s : report.sessions) {
    const auto id = csv_escape(session_id(s.provenance));
    for (std::size_t r = 0; r < s.rows.size(); ++r) {
      const auto& row = s.rows[r];
      out << id << ',' << r << ',' << csv_escape(row.metric_name) << ',' << patient_label(row.patient_index) << ','
          << csv_escape(row.at_label) << ',';
      if (row.entropy) {
        num.str("");
        num << std::setprecision(10) << *row.entropy;
        out << num.str();
      }
      out << '\n';
    }
  }
}

namespace {

// Display width of UTF-8 text (code points, not bytes).
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

void pad_cell(std::ostream& out, const std::string& s, std::size_t width) {
  out << s;
  for (std::size_t i = display_width(s); i < width; ++i) out << ' ';
}

}  // namespace

void render_entropy_table(std::ostream& out, const EntropyReport& report) {
  const std::array<std::string, 4> header{"METRIC_NAME", "PAT_ID", "ACCESS_TIME", "Row Entropy"};
  for (const auto& s : report.sessions) {
    std::vector<std::array<std::string, 4>> cells;
    for (const auto& row : s.rows) {
      std::string ent = "-";
      if (row.entropy) {
        std::ostringstream e;
        e << std::fixed << std::setprecision(4) << *row.entropy;
        ent = e.str();
      }
      cells.push_back({row.metric_name, patient_label(row.patient_index), row.at_label, ent});
    }
    std::array<std::size_t, 4> width{};
    for (int c = 0; c < 4; ++c) width[c] = display_width(header[c]);
    for (const auto& r : cells)
      for (int c = 0; c < 4; ++c) width[c] = std::max(width[c], display_width(r[c]));

    out << "session " << session_id(s.provenance) << '\n';
    for (int c = 0; c < 4; ++c) {
      pad_cell(out, header[c], width[c]);
      out << (c < 3 ? "  " : "\n");
    }
    for (const auto& r : cells) {
      for (int c = 0; c < 4; ++c) {
        pad_cell(out, r[c], width[c]);
        out << (c < 3 ? "  " : "\n");
      }
    }
    out << '\n';
  }
}

template <typename Scalar>
EntropyReport emit_entropy_report(const ModelState<Scalar>& state, const GlobalVocab& vocab,
                                  std::span<const TokenizedSession> sessions, std::ostream& csv, std::ostream* table) {
  auto report = entropy_report(state, vocab, sessions);
  write_entropy_csv(csv, report);
  if (table) render_entropy_table(*table, report);
  return report;
}

std::string EvalReport::to_json() const {
  const auto& cols = report_column_names();
  json ppl = json::object(), acc = json::object(), rouge = json::object();
  for (int f = 0; f < kNumFields; ++f) {
    const auto name = std::string(field_name(static_cast<Field>(f)));
    ppl[name] = {{"perplexity", perplexity.perplexity[f]},
                 {"mean_nll", perplexity.mean_nll[f]},
                 {"count", perplexity.count[f]}};
  }
  for (int c = 0; c < kReportColumns; ++c) {
    acc[cols[c]] = accuracy.accuracy[c];
    rouge[cols[c]] = {{"recall", this->rouge.scores[c].recall},
                      {"precision", this->rouge.scores[c].precision},
                      {"f1", this->rouge.scores[c].f1}};
  }
  json j = {{"perplexity", ppl},
            {"next_action_accuracy", {{"values", acc}, {"events", accuracy.events}}},
            {"rouge1", {{"values", rouge}, {"sessions", this->rouge.sessions}}},
            {"strategy", strategy},
            {"seed", seed},
            {"vocab_hash", vocab_hash}};
  if (!model_config.empty()) j["model"] = json::parse(model_config);
  return j.dump(2);
}

#define AUDITLM_INSTANTIATE(S)                                                                                   \
  template PerplexityReport per_field_perplexity<S>(const ModelState<S>&, const TokenizedDataset&);             \
  template AccuracyReport next_action_accuracy<S>(const ModelState<S>&, std::span<const TokenizedSession>,      \
                                                  const DecodeStrategy&, std::uint64_t);                        \
  template RougeReport rouge_eval<S>(const ModelState<S>&, std::span<const TokenizedSession>,                   \
                                     const DecodeStrategy&, std::uint64_t, double);                             \
  template EntropyReport entropy_report<S>(const ModelState<S>&, const GlobalVocab&,                            \
                                           std::span<const TokenizedSession>);                                  \
  template EntropyReport emit_entropy_report<S>(const ModelState<S>&, const GlobalVocab&,                       \
                                                std::span<const TokenizedSession>, std::ostream&, std::ostream*);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
