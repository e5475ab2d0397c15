#include "auditlm/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

namespace auditlm {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'T', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("dataset file is truncated");
  return value;
}

}  // namespace

std::size_t TokenizedDataset::total_rows() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.rows();
  return n;
}

TokenizedDataset tokenize_sessions(const std::vector<Session>& sessions, const GlobalVocab& vocab,
                                   const std::vector<std::string>& clinician_order) {
  std::unordered_map<std::string, std::uint32_t> index;
  for (std::size_t i = 0; i < clinician_order.size(); ++i)
    index.emplace(clinician_order[i], static_cast<std::uint32_t>(i));
  TokenizedDataset data;
  data.vocab_hash = vocab.hash();
  data.sequences.reserve(sessions.size());
  for (const auto& s : sessions) {
    auto t = encode_session(s, vocab);
    auto it = index.find(s.provenance.user_id);
    if (it == index.end()) throw ContractViolation("session from unknown clinician " + s.provenance.user_id);
    t.clinician = it->second;
    data.sequences.push_back(std::move(t));
  }
  return data;
}

TokenizedDataset rechunk(const TokenizedDataset& data, std::size_t max_rows) {
  if (max_rows < 1) throw ContractViolation("chunk size must be at least one row");
  TokenizedDataset out;
  out.vocab_hash = data.vocab_hash;
  for (const auto& s : data.sequences) {
    const std::size_t rows = s.rows();
    if (rows <= max_rows) {
      out.sequences.push_back(s);
      continue;
    }
    for (std::size_t first = 0, k = 0; first < rows; first += max_rows, ++k) {
      const std::size_t n = std::min(max_rows, rows - first);
      TokenizedSession piece;
      piece.provenance = s.provenance;
      piece.provenance.chunk_index = s.provenance.chunk_index + k;
      piece.clinician = s.clinician;
      piece.ids.push_back(kBos);
      const auto begin = s.ids.begin() + static_cast<std::ptrdiff_t>(1 + first * kTokensPerRow);
      piece.ids.insert(piece.ids.end(), begin, begin + static_cast<std::ptrdiff_t>(n * kTokensPerRow));
      out.sequences.push_back(std::move(piece));
    }
  }
  return out;
}

void save_dataset(const TokenizedDataset& data, std::ostream& out) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, data.vocab_hash);
  put<std::uint64_t>(out, data.sequences.size());
  for (const auto& s : data.sequences) {
    put<std::uint32_t>(out, s.clinician);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.ids.size()));
    for (TokenId id : s.ids) put<std::uint32_t>(out, static_cast<std::uint32_t>(id));
  }
  if (!out) throw Error("failed writing dataset");
}

void save_dataset(const TokenizedDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset: " + path);
  save_dataset(data, out);
}

TokenizedDataset load_dataset(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a dataset file (bad magic)");
  if (get<std::uint32_t>(in) != kVersion) throw FormatError("unsupported dataset version");
  TokenizedDataset data;
  data.vocab_hash = get<std::uint64_t>(in);
  if (expected_vocab_hash && *expected_vocab_hash != data.vocab_hash)
    throw VocabMismatch("dataset vocabulary " + hash_hex(data.vocab_hash) + " does not match " +
                        hash_hex(*expected_vocab_hash));
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    TokenizedSession s;
    s.clinician = get<std::uint32_t>(in);
    const auto len = get<std::uint32_t>(in);
    if (len > (1u << 24)) throw FormatError("sequence length is implausible");
    s.ids.resize(len);
    for (auto& id : s.ids) id = static_cast<TokenId>(get<std::uint32_t>(in));
    data.sequences.push_back(std::move(s));
  }
  return data;
}

TokenizedDataset load_dataset(const std::string& path, std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset: " + path);
  return load_dataset(in, expected_vocab_hash);
}

}  // namespace auditlm
