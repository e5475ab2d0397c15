#pragma once

#include "auditlm/vocab.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace auditlm {

enum class Architecture {
  DecoderAbsolute,  // GPT-2 style: learned positions, pre-LayerNorm, GELU MLP
  DecoderRotary,    // LLaMA style: RMSNorm, rotary positions, gated SiLU MLP
};

std::string_view architecture_name(Architecture a);
Architecture architecture_from_name(std::string_view name);

struct ModelConfig {
  Architecture arch = Architecture::DecoderAbsolute;
  int n_layers = 3;
  int n_heads = 6;
  int d_model = 768;
  int d_ff = 3072;
  int context_len = 1024;
  FieldLayout fields;
  std::uint64_t seed = 0;

  int vocab_size() const { return fields.vocab_size; }
  int head_dim() const { return d_model / n_heads; }
  // Complete rows that fit after BOS: (context_len - 1) / 3.
  int max_rows() const { return (context_len - 1) / kTokensPerRow; }

  // Throws ConfigError.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

// gpt2-{3,6,12,18}layer: 6 heads, d_model 768, d_ff 3072.
// llama-{3,6,12}layer: 32 heads, d_model 512, d_ff 11008.
// The published parameter counts are accepted as aliases (gpt2-25.3M, llama-112.0M, ...).
ModelConfig preset_config(std::string_view name, const FieldLayout& fields);
std::vector<std::string> preset_names();

}  // namespace auditlm
