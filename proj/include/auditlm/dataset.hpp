#pragma once

#include "auditlm/vocab.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace auditlm {

// Tokenized sequences, one per session chunk.
struct TokenizedDataset {
  std::uint64_t vocab_hash = 0;
  std::vector<TokenizedSession> sequences;

  std::size_t total_rows() const;
};

// Clinician index = position of the session's user id in `clinician_order`.
TokenizedDataset tokenize_sessions(const std::vector<Session>& sessions, const GlobalVocab& vocab,
                                   const std::vector<std::string>& clinician_order);

// Splits every sequence longer than max_rows rows at row boundaries; each piece starts with BOS.
TokenizedDataset rechunk(const TokenizedDataset& data, std::size_t max_rows);

// "ALTK" | u32 version | u64 vocab hash | u64 sequence count |
// per sequence: u32 clinician index, u32 length, u32 token ids (little-endian).
void save_dataset(const TokenizedDataset& data, std::ostream& out);
void save_dataset(const TokenizedDataset& data, const std::string& path);
TokenizedDataset load_dataset(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);
TokenizedDataset load_dataset(const std::string& path, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace auditlm
