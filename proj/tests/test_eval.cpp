#include "auditlm/eval.hpp"
#include "auditlm/trainer.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace auditlm;
using namespace auditlm::testing;

namespace {

std::vector<TokenId> toks(std::initializer_list<TokenId> l) { return std::vector<TokenId>(l); }

TokenizedDataset random_dataset(const GlobalVocab& vocab, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenizedDataset d;
  d.vocab_hash = vocab.hash();
  for (int i = 0; i < n; ++i) {
    TokenizedSession s;
    s.ids = random_sequence(rng, vocab.layout(), 2 + rng() % 6);
    d.sequences.push_back(s);
  }
  return d;
}

}  // namespace

TEST_CASE("perplexity is exp of mean NLL") {
  CHECK(perplexity_from_nll(1.4640) == doctest::Approx(4.3230).epsilon(1e-4));
  CHECK(perplexity_from_nll(0.0) == 1.0);
  CHECK(perplexity_from_nll(std::log(4037.0)) == doctest::Approx(4037.0));
}

TEST_CASE("a zero model is uniform inside each field block") {
  const auto vocab = small_vocab(7);
  auto m = init_model<double>(tiny_config(Architecture::DecoderAbsolute, vocab.layout()), 1, vocab.hash());
  for (auto& p : m.params) p.setZero();
  const auto r = per_field_perplexity(m, random_dataset(vocab, 5, 2));
  CHECK(r.perplexity[0] == doctest::Approx(7.0).epsilon(1e-12));
  CHECK(r.perplexity[1] == doctest::Approx(129.0).epsilon(1e-12));
  CHECK(r.perplexity[2] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("per-field perplexity agrees with the loss components") {
  const auto vocab = small_vocab(5);
  auto m = init_model<double>(tiny_config(Architecture::DecoderRotary, vocab.layout()), 3, vocab.hash());
  randomize(m, 4, 0.3);
  const auto data = random_dataset(vocab, 9, 5);
  const auto r = per_field_perplexity(m, data);
  std::vector<std::vector<TokenId>> batch;
  for (const auto& s : data.sequences) batch.push_back(s.ids);
  const auto loss = loss_and_grads<double>(m, batch, nullptr);
  for (int f = 0; f < 3; ++f) {
    CHECK(r.count[f] == loss.field_count[f]);
    CHECK(r.perplexity[f] == doctest::Approx(std::exp(loss.field_loss[f])).epsilon(1e-9));
    CHECK(r.perplexity[f] >= 1.0);
  }
  CHECK_THROWS_AS(per_field_perplexity(m, TokenizedDataset{vocab.hash(), {}}), ContractViolation);
  auto other = data;
  other.vocab_hash ^= 1;
  CHECK_THROWS_AS(per_field_perplexity(m, other), VocabMismatch);
}

TEST_CASE("accuracy tally") {
  using Row = std::array<TokenId, 3>;
  const std::vector<Row> truth{{1, 2, 3}, {4, 5, 6}};
  CHECK(tally_accuracy(truth, truth).accuracy == std::array<double, 4>{1, 1, 1, 1});
  const std::vector<Row> mn_wrong{{9, 2, 3}, {9, 5, 6}};
  const auto r = tally_accuracy(mn_wrong, truth);
  CHECK(r.accuracy == std::array<double, 4>{0, 1, 1, 0});
  const std::vector<Row> mixed{{1, 0, 3}, {4, 5, 0}};
  const auto m = tally_accuracy(mixed, truth);
  CHECK(m.accuracy == std::array<double, 4>{1, 0.5, 0.5, 0});
  CHECK(m.events == 2);
}

TEST_CASE("next-action accuracy keeps All at or below every field") {
  const auto vocab = small_vocab(5);
  auto m = init_model<double>(tiny_config(Architecture::DecoderAbsolute, vocab.layout()), 5, vocab.hash());
  randomize(m, 6, 0.3);
  const auto data = random_dataset(vocab, 6, 7);
  const auto r = next_action_accuracy(m, std::span<const TokenizedSession>(data.sequences), DecodeStrategy::greedy());
  std::size_t expected = 0;
  for (const auto& s : data.sequences) expected += s.rows() - 1;
  CHECK(r.events == expected);
  CHECK(r.accuracy[3] <= std::min({r.accuracy[0], r.accuracy[1], r.accuracy[2]}));
}

TEST_CASE("ROUGE-1 hand cases") {
  const auto same = rouge1(toks({1, 2, 3}), toks({1, 2, 3}));
  CHECK(same.recall == 1.0);
  CHECK(same.precision == 1.0);
  CHECK(same.f1 == 1.0);
  const auto clip = rouge1(toks({1, 2, 2}), toks({1, 2, 3}));
  CHECK(clip.recall == doctest::Approx(2.0 / 3));
  CHECK(clip.precision == doctest::Approx(2.0 / 3));
  CHECK(clip.f1 == doctest::Approx(2.0 / 3));
  const auto disjoint = rouge1(toks({1, 2}), toks({3, 4}));
  CHECK(disjoint.f1 == 0.0);
  const auto empty = rouge1({}, {});
  CHECK(empty.f1 == 0.0);
  const auto longer = rouge1(toks({1}), toks({1, 1, 2, 3}));
  CHECK(longer.recall == 0.25);
  CHECK(longer.precision == 1.0);
  CHECK(longer.f1 == doctest::Approx(0.4));
}

TEST_CASE("ROUGE-1 is permutation and relabeling invariant") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenId> a(1 + rng() % 12), b(1 + rng() % 12);
    for (auto& t : a) t = static_cast<TokenId>(rng() % 6);
    for (auto& t : b) t = static_cast<TokenId>(rng() % 6);
    const auto base = rouge1(a, b);
    auto pa = a, pb = b;
    std::shuffle(pa.begin(), pa.end(), rng);
    std::shuffle(pb.begin(), pb.end(), rng);
    const auto perm = rouge1(pa, pb);
    CHECK(perm.f1 == base.f1);
    CHECK(perm.recall == base.recall);
    for (auto& t : pa) t = 100 - t;
    for (auto& t : pb) t = 100 - t;
    CHECK(rouge1(pa, pb).f1 == base.f1);
  }
}

TEST_CASE("prompt split and per-field ROUGE") {
  CHECK(prompt_rows(2, 0.5) == 1);
  CHECK(prompt_rows(4, 0.5) == 2);
  CHECK(prompt_rows(5, 0.5) == 3);
  CHECK_THROWS_AS(prompt_rows(1, 0.5), ContractViolation);
  const auto row_tokens = toks({10, 20, 30, 11, 21, 31});
  CHECK(field_tokens(row_tokens, Field::PatientId) == toks({20, 21}));
  const auto by = rouge_by_field(row_tokens, row_tokens);
  for (const auto& r : by) CHECK(r.f1 == 1.0);
  const auto swapped = rouge_by_field(toks({11, 21, 31, 10, 20, 30}), row_tokens);
  for (const auto& r : swapped) CHECK(r.f1 == 1.0);
  const auto mn_off = rouge_by_field(toks({12, 20, 30, 13, 21, 31}), row_tokens);
  CHECK(mn_off[0].f1 == 0.0);
  CHECK(mn_off[1].f1 == 1.0);
  CHECK(mn_off[3].f1 == doctest::Approx(2.0 / 3));
}

TEST_CASE("ROUGE evaluation generates the reference length") {
  const auto vocab = small_vocab(5);
  auto m = init_model<double>(tiny_config(Architecture::DecoderRotary, vocab.layout()), 8, vocab.hash());
  randomize(m, 9, 0.3);
  auto data = random_dataset(vocab, 4, 10);
  data.sequences[0].ids.resize(4);  // 1 row: skipped
  const auto r = rouge_eval(m, std::span<const TokenizedSession>(data.sequences), DecodeStrategy::greedy());
  CHECK(r.sessions == 3);
  for (const auto& s : r.scores) {
    CHECK(s.f1 >= 0.0);
    CHECK(s.f1 <= 1.0);
  }
}

TEST_CASE("entropy report: first row blank, appendix labels, vocab check") {
  const auto vocab = small_vocab(4);
  auto m = init_model<double>(tiny_config(Architecture::DecoderAbsolute, vocab.layout()), 11, vocab.hash());
  Session s;
  s.provenance = Provenance{"u7", 1, 2, 0};
  s.rows = {{"act10", -1, 0}, {"act11", 0, 1}, {"act12", kOovPatient, 2}};
  const std::vector<TokenizedSession> sessions{encode_session(s, vocab)};
  std::ostringstream csv, table;
  const auto rep = emit_entropy_report(m, vocab, std::span<const TokenizedSession>(sessions), csv, &table);
  REQUIRE(rep.sessions.size() == 1);
  CHECK_FALSE(rep.sessions[0].rows[0].entropy.has_value());
  CHECK(rep.sessions[0].rows[1].entropy.has_value());
  CHECK(rep.sessions[0].rows[1].at_label == "3.936");
  CHECK(rep.sessions[0].rows[2].at_label == "15.492");

  std::istringstream lines(csv.str());
  std::string header, first, second, third;
  std::getline(lines, header);
  std::getline(lines, first);
  std::getline(lines, second);
  std::getline(lines, third);
  CHECK(header == "session_id,row_index,metric_name,pat_index,at_label,entropy_nats");
  CHECK(first == "u7/1/2/0,0,act10,-1,≤ 1,");
  CHECK(second.rfind("u7/1/2/0,1,act11,0,3.936,", 0) == 0);
  CHECK(second.size() > std::string("u7/1/2/0,1,act11,0,3.936,").size());
  CHECK(third.find(",OOV,15.492,") != std::string::npos);

  const auto text = table.str();
  CHECK(text.find("Row Entropy") != std::string::npos);
  std::istringstream tl(text);
  std::string l;
  std::getline(tl, l);
  std::getline(tl, l);
  std::getline(tl, l);  // first data row
  CHECK(l.rfind("act10", 0) == 0);
  CHECK(l.find(" - ") != std::string::npos);

  CHECK_THROWS_AS(entropy_report(m, small_vocab(5), std::span<const TokenizedSession>(sessions)), VocabMismatch);
}

TEST_CASE("eval report serializes every section") {
  EvalReport r;
  r.perplexity.perplexity = {4.3230, 2.0, 1.5};
  r.accuracy.accuracy = {0.9, 0.8, 0.7, 0.6};
  r.strategy = "greedy";
  r.seed = 42;
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["perplexity"]["METRIC_NAME"]["perplexity"].get<double>() == doctest::Approx(4.3230));
  CHECK(j["next_action_accuracy"]["values"]["All"].get<double>() == doctest::Approx(0.6));
  CHECK(j["rouge1"]["values"].contains("P"));
  CHECK(j["seed"].get<int>() == 42);
}
