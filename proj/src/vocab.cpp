#include "auditlm/vocab.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace auditlm {

using nlohmann::json;

namespace {

constexpr std::string_view kFieldNames[kNumFields] = {"METRIC_NAME", "PAT_ID", "AT_BIN"};
constexpr std::string_view kUnkMetricText = "[UNK_MN]";

bool is_permitted_special(Field f, TokenId id) {
  return (f == Field::MetricName && id == kUnkMetric) || (f == Field::PatientId && id == kPatientOov);
}

}  // namespace

std::string_view field_name(Field f) { return kFieldNames[static_cast<int>(f)]; }

std::optional<Field> field_from_name(std::string_view name) {
  for (int i = 0; i < kNumFields; ++i)
    if (kFieldNames[i] == name) return static_cast<Field>(i);
  return std::nullopt;
}

std::optional<Field> field_of(std::size_t position) {
  if (position == 0) return std::nullopt;
  return static_cast<Field>((position - 1) % kTokensPerRow);
}

const std::array<std::string, kNumSpecials>& GlobalVocab::special_names() {
  static const std::array<std::string, kNumSpecials> names = {"[PAD]", "[BOS]", "[UNK_MN]", "[PAT_OOV]"};
  return names;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GlobalVocab::GlobalVocab(std::vector<std::string> metric_names) {
  std::set<std::string_view> seen;
  for (const auto& name : metric_names) {
    if (name.empty()) throw ConfigError("empty METRIC_NAME token");
    if (!seen.insert(name).second) throw ConfigError("duplicate METRIC_NAME token: " + name);
  }

  TokenId offset = kNumSpecials;
  FieldVocab mn{Field::MetricName, std::move(metric_names), offset};
  offset += static_cast<TokenId>(mn.tokens.size());

  FieldVocab pid{Field::PatientId, {}, offset};
  for (int p = -1; p < kPatientTokens - 1; ++p) pid.tokens.push_back(std::to_string(p));
  offset += static_cast<TokenId>(pid.tokens.size());

  FieldVocab at{Field::TimeBin, {}, offset};
  for (int b = 0; b < kNumDeltaBins; ++b) at.tokens.push_back(std::to_string(b));
  offset += static_cast<TokenId>(at.tokens.size());

  fields_ = {std::move(mn), std::move(pid), std::move(at)};
  size_ = offset;
  for (std::size_t i = 0; i < fields_[0].tokens.size(); ++i)
    metric_lookup_.emplace(fields_[0].tokens[i], fields_[0].offset + static_cast<TokenId>(i));
  hash_ = fnv1a64(canonical_json());
}

FieldLayout GlobalVocab::layout() const {
  FieldLayout layout;
  for (int f = 0; f < kNumFields; ++f)
    layout.blocks[f] = TokenBlock{fields_[f].offset, static_cast<TokenId>(fields_[f].tokens.size())};
  layout.vocab_size = size_;
  return layout;
}

TokenId GlobalVocab::metric_id(std::string_view name) const {
  auto it = metric_lookup_.find(std::string(name));
  return it == metric_lookup_.end() ? kUnkMetric : it->second;
}

TokenId GlobalVocab::patient_id(int patient_index) const {
  if (patient_index == kOovPatient) return kPatientOov;
  if (patient_index < kNoPatient || patient_index >= kPatientTokens - 1)
    throw ContractViolation("patient index out of range: " + std::to_string(patient_index));
  return fields_[1].offset + static_cast<TokenId>(patient_index + 1);
}

TokenId GlobalVocab::bin_id(int bin) const {
  if (bin < 0 || bin >= kNumDeltaBins) throw ContractViolation("delta bin out of range: " + std::to_string(bin));
  return fields_[2].offset + static_cast<TokenId>(bin);
}

std::string GlobalVocab::token_text(TokenId id) const {
  if (id >= 0 && id < kNumSpecials) return special_names()[static_cast<std::size_t>(id)];
  for (const auto& f : fields_) {
    if (id >= f.offset && id < f.offset + static_cast<TokenId>(f.tokens.size()))
      return f.tokens[static_cast<std::size_t>(id - f.offset)];
  }
  throw ContractViolation("token id out of range: " + std::to_string(id));
}

std::string GlobalVocab::canonical_json() const {
  json j;
  j["version"] = kVersion;
  j["specials"] = special_names();
  json fields = json::array();
  for (const auto& f : fields_) fields.push_back({{"name", field_name(f.field)}, {"tokens", f.tokens}});
  j["fields"] = std::move(fields);
  return j.dump();
}

std::string GlobalVocab::to_json() const {
  auto j = json::parse(canonical_json());
  j["hash"] = hash_hex(hash_);
  return j.dump(1);
}

GlobalVocab GlobalVocab::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("vocab file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kVersion) throw FormatError("unsupported vocab version");
    if (j.at("specials").get<std::vector<std::string>>() !=
        std::vector<std::string>(special_names().begin(), special_names().end()))
      throw FormatError("unexpected special tokens");
    const auto& fields = j.at("fields");
    if (!fields.is_array() || fields.size() != kNumFields) throw FormatError("vocab must list three fields");
    for (int f = 0; f < kNumFields; ++f)
      if (fields[f].at("name").get<std::string>() != field_name(static_cast<Field>(f)))
        throw FormatError("fields out of order");
    GlobalVocab vocab(fields[0].at("tokens").get<std::vector<std::string>>());
    if (fields[1].at("tokens") != json(vocab.fields_[1].tokens) ||
        fields[2].at("tokens") != json(vocab.fields_[2].tokens))
      throw FormatError("PAT_ID/AT_BIN blocks differ from the fixed token sets");
    if (j.contains("hash") && j["hash"].get<std::string>() != hash_hex(vocab.hash()))
      throw FormatError("vocab hash does not match its content");
    return vocab;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed vocab file: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed vocab file: ") + e.what());
  }
}

GlobalVocab build_vocab(const std::vector<Session>& training_sessions) {
  std::set<std::string> names;
  for (const auto& s : training_sessions)
    for (const auto& r : s.rows) names.insert(r.metric_name);
  if (names.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  return GlobalVocab(std::vector<std::string>(names.begin(), names.end()));
}

TokenizedSession encode_session(const Session& session, const GlobalVocab& vocab) {
  TokenizedSession out;
  out.provenance = session.provenance;
  out.ids.reserve(1 + kTokensPerRow * session.rows.size());
  out.ids.push_back(kBos);
  for (const auto& row : session.rows) {
    out.ids.push_back(vocab.metric_id(row.metric_name));
    out.ids.push_back(vocab.patient_id(row.patient_index));
    out.ids.push_back(vocab.bin_id(row.delta_bin));
  }
  return out;
}

void validate_layout(const std::vector<TokenId>& ids, const FieldLayout& layout) {
  if (ids.empty() || ids[0] != kBos) throw LayoutError(0, "sequence must start with BOS");
  if ((ids.size() - 1) % kTokensPerRow != 0) throw LayoutError(ids.size(), "sequence ends mid-row");
  for (std::size_t p = 1; p < ids.size(); ++p) {
    const Field f = *field_of(p);
    const TokenId id = ids[p];
    if (!layout.block(f).contains(id) && !is_permitted_special(f, id))
      throw LayoutError(p, "token " + std::to_string(id) + " is not a " + std::string(field_name(f)) +
                               " token");
  }
}

Session decode_tokens(const std::vector<TokenId>& ids, const GlobalVocab& vocab) {
  const auto layout = vocab.layout();
  validate_layout(ids, layout);
  Session s;
  for (std::size_t p = 1; p < ids.size(); p += kTokensPerRow) {
    SessionRow row;
    const TokenId mn = ids[p], pid = ids[p + 1], at = ids[p + 2];
    row.metric_name = mn == kUnkMetric ? std::string(kUnkMetricText) : vocab.token_text(mn);
    row.patient_index = pid == kPatientOov ? kOovPatient : (pid - layout.block(Field::PatientId).begin) - 1;
    row.delta_bin = at - layout.block(Field::TimeBin).begin;
    s.rows.push_back(std::move(row));
  }
  return s;
}

void save_vocab(const GlobalVocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocab file: " + path);
  out << vocab.to_json() << '\n';
}

GlobalVocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open vocab file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return GlobalVocab::from_json(ss.str());
}

}  // namespace auditlm
