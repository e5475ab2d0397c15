#include "auditlm/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace auditlm {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("checkpoint is truncated");
  return value;
}

std::string get_bytes(std::istream& in, std::uint64_t n, std::uint64_t limit) {
  if (n > limit) throw FormatError("checkpoint field length is implausible");
  std::string s(static_cast<std::size_t>(n), '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint is truncated");
  return s;
}

template <typename Scalar>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<Scalar, float> ? 0 : 1;
}

std::size_t dtype_size(std::uint8_t code) {
  if (code == 0) return 4;
  if (code == 1) return 8;
  throw FormatError("unknown tensor dtype code " + std::to_string(code));
}

}  // namespace

template <typename Scalar>
MatrixX<Scalar> TensorRecord::to_matrix() const {
  if (dims.size() != 2) throw FormatError("tensor " + name + " must be rank 2");
  const auto rows = static_cast<Eigen::Index>(dims[0]), cols = static_cast<Eigen::Index>(dims[1]);
  if (dtype == dtype_code<Scalar>()) {
    MatrixX<Scalar> m(rows, cols);
    std::memcpy(m.data(), bytes.data(), bytes.size());
    return m;
  }
  if (dtype == 0) {
    MatrixX<float> m(rows, cols);
    std::memcpy(m.data(), bytes.data(), bytes.size());
    return m.template cast<Scalar>();
  }
  MatrixX<double> m(rows, cols);
  std::memcpy(m.data(), bytes.data(), bytes.size());
  return m.template cast<Scalar>();
}

template <typename Scalar>
TensorRecord make_tensor_record(std::string name, const MatrixX<Scalar>& m) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = dtype_code<Scalar>();
  r.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  r.bytes.resize(static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  std::memcpy(r.bytes.data(), m.data(), r.bytes.size());
  return r;
}

const TensorRecord* TensorContainer::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_container(std::ostream& out, const TensorContainer& c) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, c.header_json.size());
  out.write(c.header_json.data(), static_cast<std::streamsize>(c.header_json.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint8_t>(out, t.dtype);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint64_t>(out, d);
    out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
  }
  if (!out) throw Error("failed writing checkpoint");
}

TensorContainer read_container(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  TensorContainer c;
  c.header_json = get_bytes(in, get<std::uint64_t>(in), 1ULL << 30);
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = get_bytes(in, get<std::uint32_t>(in), 1 << 16);
    t.dtype = get<std::uint8_t>(in);
    const auto rank = get<std::uint32_t>(in);
    if (rank > 8) throw FormatError("tensor rank is implausible");
    std::uint64_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(get<std::uint64_t>(in));
      elements *= t.dims.back();
    }
    const std::uint64_t nbytes = elements * dtype_size(t.dtype);
    if (nbytes > (1ULL << 34)) throw FormatError("tensor size is implausible");
    t.bytes.resize(static_cast<std::size_t>(nbytes));
    if (nbytes && !in.read(t.bytes.data(), static_cast<std::streamsize>(nbytes)))
      throw FormatError("checkpoint is truncated");
    c.tensors.push_back(std::move(t));
  }
  return c;
}

template <typename Scalar>
void append_model_tensors(const ModelState<Scalar>& state, const std::string& prefix, TensorContainer& out) {
  const auto specs = parameter_specs(state.config);
  for (std::size_t i = 0; i < specs.size(); ++i)
    out.tensors.push_back(make_tensor_record<Scalar>(prefix + specs[i].name, state.params[i]));
}

template <typename Scalar>
ModelState<Scalar> model_from_container(const TensorContainer& c, const std::string& prefix) {
  json header;
  try {
    header = json::parse(c.header_json);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  ModelState<Scalar> state;
  try {
    state.config = ModelConfig::from_json(header.at("model").dump());
    state.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is incomplete: ") + e.what());
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint vocab hash is malformed");
  }
  try {
    state.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  for (const auto& spec : parameter_specs(state.config)) {
    const auto* t = c.find(prefix + spec.name);
    if (!t) throw FormatError("checkpoint lacks tensor " + prefix + spec.name);
    if (t->dims.size() != 2 || t->dims[0] != static_cast<std::uint64_t>(spec.rows) ||
        t->dims[1] != static_cast<std::uint64_t>(spec.cols))
      throw FormatError("tensor " + spec.name + " has the wrong shape");
    state.params.push_back(t->template to_matrix<Scalar>());
  }
  if (!state.all_finite()) throw FormatError("checkpoint contains non-finite parameters");
  return state;
}

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, std::ostream& out) {
  TensorContainer c;
  json header = {{"model", json::parse(state.config.to_json())}, {"vocab_hash", hash_hex(state.vocab_hash)}};
  c.header_json = header.dump();
  append_model_tensors(state, "", c);
  write_container(out, c);
}

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  save_checkpoint(state, out);
}

template <typename Scalar>
ModelState<Scalar> load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash) {
  auto state = model_from_container<Scalar>(read_container(in), "");
  if (expected_vocab_hash && *expected_vocab_hash != state.vocab_hash)
    throw VocabMismatch("checkpoint vocabulary " + hash_hex(state.vocab_hash) + " does not match " +
                        hash_hex(*expected_vocab_hash));
  return state;
}

template <typename Scalar>
ModelState<Scalar> load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  return load_checkpoint<Scalar>(in, expected_vocab_hash);
}

#define AUDITLM_INSTANTIATE(S)                                                                         \
  template MatrixX<S> TensorRecord::to_matrix<S>() const;                                              \
  template TensorRecord make_tensor_record<S>(std::string, const MatrixX<S>&);                         \
  template void append_model_tensors<S>(const ModelState<S>&, const std::string&, TensorContainer&);   \
  template ModelState<S> model_from_container<S>(const TensorContainer&, const std::string&);          \
  template void save_checkpoint<S>(const ModelState<S>&, std::ostream&);                               \
  template void save_checkpoint<S>(const ModelState<S>&, const std::string&);                          \
  template ModelState<S> load_checkpoint<S>(std::istream&, std::optional<std::uint64_t>);              \
  template ModelState<S> load_checkpoint<S>(const std::string&, std::optional<std::uint64_t>);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
