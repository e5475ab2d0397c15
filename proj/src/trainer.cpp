#include "auditlm/trainer.hpp"

#include "auditlm/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace auditlm {

using nlohmann::json;

namespace {

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  // Rejection sampling keeps the draw unbiased and platform independent.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

void say(const TrainConfig& config, const std::string& msg) {
  if (config.log) config.log(msg);
}

}  // namespace

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_below(rng, i)]);
  return p;
}

ClinicianSplit stratified_split(std::vector<std::string> ids, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate clinician id");
  if (ids.size() < 3) throw ConfigError("need at least 3 clinicians to split, got " + std::to_string(ids.size()));

  const auto n = static_cast<double>(ids.size());
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test * n + 1e-9));
  const auto perm = seeded_permutation(ids.size(), spec.seed);

  ClinicianSplit split;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto& id = ids[perm[i]];
    if (i < n_val)
      split.val.push_back(std::move(id));
    else if (i < n_val + n_test)
      split.test.push_back(std::move(id));
    else
      split.train.push_back(std::move(id));
  }
  for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (grad_accum < 1) throw ConfigError("grad_accum must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(base_lr() > 0.0)) throw ConfigError("learning rate must be positive");
  if (sophia.hessian_interval < 1) throw ConfigError("hessian_interval must be at least 1");
  if (!(ewma_alpha > 0.0 && ewma_alpha <= 1.0)) throw ConfigError("ewma alpha must lie in (0, 1]");
}

std::int64_t steps_per_epoch(std::size_t n_sequences, const TrainConfig& config) {
  const auto micro = (n_sequences + static_cast<std::size_t>(config.batch_size) - 1) / static_cast<std::size_t>(config.batch_size);
  return static_cast<std::int64_t>((micro + static_cast<std::size_t>(config.grad_accum) - 1) /
                                   static_cast<std::size_t>(config.grad_accum));
}

std::vector<double> ewma(const std::vector<double>& values, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("ewma alpha must lie in (0, 1]");
  if (values.empty()) throw ContractViolation("ewma needs at least one value");
  std::vector<double> out(values.size());
  out[0] = values[0];
  for (std::size_t t = 1; t < values.size(); ++t) out[t] = (1.0 - alpha) * out[t - 1] + alpha * values[t];
  return out;
}

void write_loss_trace(std::ostream& out, const std::vector<LossPoint>& trace) {
  out << "step,raw_loss,ewma_loss\n";
  out.precision(17);
  for (const auto& p : trace) out << p.step << ',' << p.raw << ',' << p.smoothed << '\n';
}

template <typename Scalar>
LossReport dataset_loss(const ModelState<Scalar>& model, const TokenizedDataset& data, std::size_t batch) {
  LossReport total;
  std::vector<std::vector<TokenId>> chunk;
  auto flush = [&] {
    const auto r = loss_and_grads<Scalar>(model, chunk, nullptr);
    for (int f = 0; f < kNumFields; ++f) {
      total.field_nll_sum[f] += r.field_nll_sum[f];
      total.field_count[f] += r.field_count[f];
    }
    total.count += r.count;
    chunk.clear();
  };
  for (const auto& s : data.sequences) {
    chunk.push_back(s.ids);
    if (chunk.size() == batch) flush();
  }
  if (!chunk.empty()) flush();
  double sum = 0.0;
  for (int f = 0; f < kNumFields; ++f) {
    sum += total.field_nll_sum[f];
    total.field_loss[f] = total.field_count[f] ? total.field_nll_sum[f] / static_cast<double>(total.field_count[f]) : 0.0;
  }
  total.loss = total.count ? sum / static_cast<double>(total.count) : 0.0;
  return total;
}

template <typename Scalar>
void save_training_checkpoint(const ModelState<Scalar>& model, const OptimState<Scalar>& optim, int epoch,
                              const std::string& path) {
  TensorContainer c;
  json header = {{"model", json::parse(model.config.to_json())},
                 {"vocab_hash", hash_hex(model.vocab_hash)},
                 {"train",
                  {{"epoch", epoch},
                   {"optimizer", optimizer_name(optim.kind)},
                   {"step", optim.step},
                   {"last_hessian_step", optim.last_hessian_step},
                   {"hessian_updates", optim.hessian_updates}}}};
  c.header_json = header.dump();
  append_model_tensors(model, "", c);
  const auto specs = parameter_specs(model.config);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    c.tensors.push_back(make_tensor_record<Scalar>("optim.m/" + specs[i].name, optim.m[i]));
    c.tensors.push_back(make_tensor_record<Scalar>("optim.second/" + specs[i].name, optim.second[i]));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint: " + path);
    write_container(out, c);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
TrainingCheckpoint<Scalar> load_training_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  const auto c = read_container(in);
  TrainingCheckpoint<Scalar> out;
  out.model = model_from_container<Scalar>(c, "");
  try {
    const auto header = json::parse(c.header_json);
    const auto& t = header.at("train");
    out.epoch = t.at("epoch").get<int>();
    out.optim.kind = optimizer_from_name(t.at("optimizer").get<std::string>());
    out.optim.step = t.at("step").get<std::int64_t>();
    out.optim.last_hessian_step = t.at("last_hessian_step").get<std::int64_t>();
    out.optim.hessian_updates = t.at("hessian_updates").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("not a training checkpoint: ") + e.what());
  }
  for (const auto& spec : parameter_specs(out.model.config)) {
    const auto* m = c.find("optim.m/" + spec.name);
    const auto* s = c.find("optim.second/" + spec.name);
    if (!m || !s) throw FormatError("training checkpoint lacks optimizer state for " + spec.name);
    out.optim.m.push_back(m->template to_matrix<Scalar>());
    out.optim.second.push_back(s->template to_matrix<Scalar>());
  }
  return out;
}

template <typename Scalar>
TrainResult train(ModelState<Scalar>& model, const TokenizedDataset& train_set, const TokenizedDataset* val_set,
                  const TrainConfig& config) {
  config.validate();
  if (train_set.sequences.empty()) throw ContractViolation("training set is empty");
  if (train_set.vocab_hash != model.vocab_hash)
    throw VocabMismatch("training data vocabulary " + hash_hex(train_set.vocab_hash) + " differs from the model's " +
                        hash_hex(model.vocab_hash));
  for (const auto& s : train_set.sequences)
    if (static_cast<int>(s.ids.size()) > model.config.context_len)
      throw ContractViolation("training sequence longer than the context window; chunk sessions first");

  const std::size_t n = train_set.sequences.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto accum = static_cast<std::size_t>(config.grad_accum);
  const std::int64_t per_epoch = steps_per_epoch(n, config);
  const std::int64_t total_steps = per_epoch * config.epochs;

  auto optim = make_optim_state(config.optimizer, model.params);
  std::mt19937_64 hessian_rng(config.shuffle_seed ^ 0x9e3779b97f4a7c15ULL);
  ParameterList<Scalar> grads = zeros_like(model.params);
  std::vector<std::vector<TokenId>> micro;

  TrainResult result;
  std::vector<double> raw_losses;
  say(config, "training " + std::to_string(n) + " sequences, " + std::to_string(per_epoch) +
                  " steps/epoch, effective batch " + std::to_string(config.effective_batch()));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = seeded_permutation(n, config.shuffle_seed + static_cast<std::uint64_t>(epoch));
    const std::size_t n_micro = (n + bs - 1) / bs;
    double epoch_loss = 0.0;
    std::int64_t epoch_steps = 0;

    for (std::size_t first_micro = 0; first_micro < n_micro; first_micro += accum) {
      const std::size_t in_step = std::min(accum, n_micro - first_micro);
      double step_loss = 0.0;
      for (std::size_t mb = 0; mb < in_step; ++mb) {
        micro.clear();
        const std::size_t begin = (first_micro + mb) * bs;
        for (std::size_t i = begin; i < std::min(n, begin + bs); ++i) micro.push_back(train_set.sequences[order[i]].ids);
        LossOptions opts;
        opts.grad_scale = 1.0 / static_cast<double>(in_step);
        opts.accumulate = mb > 0;
        const auto r = loss_and_grads<Scalar>(model, micro, &grads, opts);
        step_loss += r.loss / static_cast<double>(in_step);
      }
      if (!std::isfinite(step_loss))
        throw TrainingDiverged("non-finite loss at step " + std::to_string(optim.step) + " (epoch " +
                               std::to_string(epoch) + ")");

      const double lr = scheduled_lr(optim.step, config.base_lr(), config.warmup_steps, total_steps, config.min_lr_ratio);
      if (config.optimizer == OptimizerKind::AdamW) {
        auto cfg = config.adamw;
        cfg.lr = lr;
        adamw_step(model.params, grads, optim, cfg);
      } else {
        auto cfg = config.sophia;
        cfg.lr = lr;
        if (optim.step % config.sophia.hessian_interval == 0) estimate_hessian_diag(model, micro, optim, cfg, hessian_rng);
        const auto rep = sophia_step(model.params, grads, optim, cfg);
        result.sophia_bound_violations += rep.bound_violations;
        if (rep.stale_hessian) {
          ++result.stale_hessian_warnings;
          say(config, "warning: Hessian estimate is stale at step " + std::to_string(optim.step));
        }
      }

      raw_losses.push_back(step_loss);
      const double smoothed =
          result.trace.empty() ? step_loss
                               : (1.0 - config.ewma_alpha) * result.trace.back().smoothed + config.ewma_alpha * step_loss;
      result.trace.push_back(LossPoint{optim.step, step_loss, smoothed});
      epoch_loss += step_loss;
      ++epoch_steps;
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.train_loss = epoch_loss / static_cast<double>(std::max<std::int64_t>(1, epoch_steps));
    if (val_set && !val_set->sequences.empty()) {
      const auto v = dataset_loss(model, *val_set);
      summary.val_loss = v.loss;
      summary.val_field_loss = v.field_loss;
    }
    if (!config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      summary.checkpoint_path = (std::filesystem::path(config.checkpoint_dir) / ("epoch_" + std::to_string(epoch) + ".ckpt")).string();
      save_training_checkpoint(model, optim, epoch, summary.checkpoint_path);
    }
    std::ostringstream msg;
    msg << "epoch " << epoch << " train_loss " << summary.train_loss;
    if (summary.val_loss) msg << " val_loss " << *summary.val_loss;
    say(config, msg.str());
    result.epochs.push_back(std::move(summary));
  }
  result.optimizer_steps = optim.step;
  return result;
}

#define AUDITLM_INSTANTIATE(S)                                                                               \
  template TrainResult train<S>(ModelState<S>&, const TokenizedDataset&, const TokenizedDataset*,           \
                                const TrainConfig&);                                                        \
  template LossReport dataset_loss<S>(const ModelState<S>&, const TokenizedDataset&, std::size_t);          \
  template void save_training_checkpoint<S>(const ModelState<S>&, const OptimState<S>&, int, const std::string&); \
  template TrainingCheckpoint<S> load_training_checkpoint<S>(const std::string&);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
