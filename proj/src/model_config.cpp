#include "auditlm/model_config.hpp"

#include <json.hpp>

#include <map>

namespace auditlm {

using nlohmann::json;

namespace {

struct Preset {
  Architecture arch;
  int layers;
  int heads;
  int d_model;
  int d_ff;
};

const std::map<std::string, Preset, std::less<>>& presets() {
  static const std::map<std::string, Preset, std::less<>> table = {
      {"gpt2-3layer", {Architecture::DecoderAbsolute, 3, 6, 768, 3072}},
      {"gpt2-6layer", {Architecture::DecoderAbsolute, 6, 6, 768, 3072}},
      {"gpt2-12layer", {Architecture::DecoderAbsolute, 12, 6, 768, 3072}},
      {"gpt2-18layer", {Architecture::DecoderAbsolute, 18, 6, 768, 3072}},
      {"llama-3layer", {Architecture::DecoderRotary, 3, 32, 512, 11008}},
      {"llama-6layer", {Architecture::DecoderRotary, 6, 32, 512, 11008}},
      {"llama-12layer", {Architecture::DecoderRotary, 12, 32, 512, 11008}},
  };
  return table;
}

const std::map<std::string, std::string, std::less<>>& aliases() {
  static const std::map<std::string, std::string, std::less<>> table = {
      {"gpt2-25.3M", "gpt2-3layer"},   {"gpt2-46.5M", "gpt2-6layer"},   {"gpt2-89.0M", "gpt2-12layer"},
      {"gpt2-131.6M", "gpt2-18layer"}, {"llama-58.1M", "llama-3layer"}, {"llama-112.0M", "llama-6layer"},
      {"llama-219.8M", "llama-12layer"},
  };
  return table;
}

}  // namespace

std::string_view architecture_name(Architecture a) {
  return a == Architecture::DecoderAbsolute ? "decoder-absolute" : "decoder-rotary";
}

Architecture architecture_from_name(std::string_view name) {
  if (name == "decoder-absolute" || name == "gpt2") return Architecture::DecoderAbsolute;
  if (name == "decoder-rotary" || name == "llama") return Architecture::DecoderRotary;
  throw ConfigError("unknown architecture: " + std::string(name));
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (n_heads < 1 || d_model < 1) throw ConfigError("n_heads and d_model must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  if (arch == Architecture::DecoderRotary && head_dim() % 2 != 0)
    throw ConfigError("rotary encoding needs an even head dimension");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (context_len < 4) throw ConfigError("context_len must be at least 4");
  if (fields.vocab_size <= kNumSpecials) throw ConfigError("vocabulary layout is empty");
  for (const auto& b : fields.blocks)
    if (b.size < 1 || b.begin < kNumSpecials || b.end() > fields.vocab_size)
      throw ConfigError("field block outside the vocabulary");
}

std::string ModelConfig::to_json() const {
  json blocks = json::array();
  for (const auto& b : fields.blocks) blocks.push_back({b.begin, b.size});
  json j = {{"arch", architecture_name(arch)},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_model", d_model},
            {"d_ff", d_ff},
            {"context_len", context_len},
            {"vocab_size", fields.vocab_size},
            {"field_blocks", blocks},
            {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  try {
    auto j = json::parse(text);
    ModelConfig c;
    c.arch = architecture_from_name(j.at("arch").get<std::string>());
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.fields.vocab_size = j.at("vocab_size").get<TokenId>();
    const auto& blocks = j.at("field_blocks");
    if (blocks.size() != kNumFields) throw FormatError("field_blocks must have three entries");
    for (int f = 0; f < kNumFields; ++f)
      c.fields.blocks[f] = TokenBlock{blocks[f].at(0).get<TokenId>(), blocks[f].at(1).get<TokenId>()};
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

ModelConfig preset_config(std::string_view name, const FieldLayout& fields) {
  std::string key(name);
  if (auto a = aliases().find(name); a != aliases().end()) key = a->second;
  auto it = presets().find(key);
  if (it == presets().end()) throw ConfigError("unknown preset: " + std::string(name));
  const auto& p = it->second;
  ModelConfig c;
  c.arch = p.arch;
  c.n_layers = p.layers;
  c.n_heads = p.heads;
  c.d_model = p.d_model;
  c.d_ff = p.d_ff;
  c.context_len = 1024;
  c.fields = fields;
  return c;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : presets()) names.push_back(k);
  return names;
}

}  // namespace auditlm
