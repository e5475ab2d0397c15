#pragma once

#include "auditlm/common.hpp"
#include "auditlm/sessionize.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace auditlm {

enum class Field : int { MetricName = 0, PatientId = 1, TimeBin = 2 };
inline constexpr int kNumFields = 3;
inline constexpr int kTokensPerRow = 3;

std::string_view field_name(Field f);
std::optional<Field> field_from_name(std::string_view name);

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kUnkMetric = 2;
inline constexpr TokenId kPatientOov = 3;
inline constexpr int kNumSpecials = 4;

// Contiguous range of global ids.
struct TokenBlock {
  TokenId begin = 0;
  TokenId size = 0;

  TokenId end() const { return begin + size; }
  bool contains(TokenId id) const { return id >= begin && id < end(); }
  bool operator==(const TokenBlock&) const = default;
};

// Global id ranges of the three field blocks; enough for the model to mask its softmax.
struct FieldLayout {
  std::array<TokenBlock, kNumFields> blocks{};
  TokenId vocab_size = 0;

  const TokenBlock& block(Field f) const { return blocks[static_cast<int>(f)]; }
  bool operator==(const FieldLayout&) const = default;
};

// Field predicted at a sequence position. Position 0 holds BOS and has no field.
std::optional<Field> field_of(std::size_t position);

struct FieldVocab {
  Field field = Field::MetricName;
  std::vector<std::string> tokens;
  TokenId offset = 0;
};

struct TokenizedSession {
  std::vector<TokenId> ids;
  Provenance provenance;
  std::uint32_t clinician = 0;

  std::size_t rows() const { return ids.empty() ? 0 : (ids.size() - 1) / kTokensPerRow; }
  bool operator==(const TokenizedSession&) const = default;
};

class GlobalVocab {
 public:
  static constexpr int kVersion = 1;
  static constexpr int kPatientTokens = 129;  // -1, 0..127

  // METRIC_NAME tokens are used as given (callers pass them sorted).
  explicit GlobalVocab(std::vector<std::string> metric_names);

  const std::vector<FieldVocab>& fields() const { return fields_; }
  const FieldVocab& field(Field f) const { return fields_[static_cast<int>(f)]; }
  TokenId size() const { return size_; }
  std::uint64_t hash() const { return hash_; }
  FieldLayout layout() const;

  TokenId metric_id(std::string_view name) const;  // UNK_MN when unknown
  TokenId patient_id(int patient_index) const;     // PAT_OOV for kOovPatient
  TokenId bin_id(int bin) const;

  std::string token_text(TokenId id) const;

  // Canonical JSON without the hash field; the hash is FNV-1a 64 over this text.
  std::string canonical_json() const;
  std::string to_json() const;
  static GlobalVocab from_json(std::string_view text);

  static const std::array<std::string, kNumSpecials>& special_names();

 private:
  std::vector<FieldVocab> fields_;
  std::unordered_map<std::string, TokenId> metric_lookup_;
  TokenId size_ = 0;
  std::uint64_t hash_ = 0;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::uint64_t h);

// Distinct training action names, sorted lexicographically.
GlobalVocab build_vocab(const std::vector<Session>& training_sessions);

// [BOS, (mn, pid, at) x R]
TokenizedSession encode_session(const Session& session, const GlobalVocab& vocab);
Session decode_tokens(const std::vector<TokenId>& ids, const GlobalVocab& vocab);

// Throws LayoutError when a token sits outside its position's field block.
void validate_layout(const std::vector<TokenId>& ids, const FieldLayout& layout);

void save_vocab(const GlobalVocab& vocab, const std::string& path);
GlobalVocab load_vocab(const std::string& path);

}  // namespace auditlm
