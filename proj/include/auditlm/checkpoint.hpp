#pragma once

#include "auditlm/model.hpp"
#include "auditlm/vocab.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace auditlm {

// Binary container shared by model and training checkpoints:
//   "ALCK" | u32 version | u64 header length | header (UTF-8 JSON)
//   u32 tensor count | per tensor: u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//   u32 rank, u64 dims[rank], raw little-endian data (row-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::uint8_t dtype = 0;
  std::vector<std::uint64_t> dims;
  std::vector<char> bytes;

  template <typename Scalar>
  MatrixX<Scalar> to_matrix() const;
};

template <typename Scalar>
TensorRecord make_tensor_record(std::string name, const MatrixX<Scalar>& m);

struct TensorContainer {
  std::string header_json;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const;
};

void write_container(std::ostream& out, const TensorContainer& container);
// Throws FormatError on bad magic/version or truncation.
TensorContainer read_container(std::istream& in);

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, std::ostream& out);
template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, const std::string& path);

// With expected_vocab_hash set, a mismatching checkpoint is refused (VocabMismatch).
template <typename Scalar>
ModelState<Scalar> load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);
template <typename Scalar>
ModelState<Scalar> load_checkpoint(const std::string& path,
                                   std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

// Model tensors <-> container under a name prefix ("" for plain model checkpoints).
template <typename Scalar>
void append_model_tensors(const ModelState<Scalar>& state, const std::string& prefix, TensorContainer& out);
template <typename Scalar>
ModelState<Scalar> model_from_container(const TensorContainer& container, const std::string& prefix);

template <typename Scalar>
void require_vocab(const ModelState<Scalar>& state, const GlobalVocab& vocab) {
  if (state.vocab_hash != vocab.hash())
    throw VocabMismatch("model was trained with vocabulary " + hash_hex(state.vocab_hash) + ", got " +
                        hash_hex(vocab.hash()));
}

}  // namespace auditlm
