#pragma once

#include "auditlm/dataset.hpp"
#include "auditlm/model.hpp"
#include "auditlm/optim.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace auditlm {

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;
};

struct ClinicianSplit {
  std::vector<std::string> train, val, test;
};

// val/test sizes are floor(fraction * n); the remainder goes to train.
// Ids are sorted before the seeded shuffle, so input order does not matter.
ClinicianSplit stratified_split(std::vector<std::string> clinician_ids, const SplitSpec& spec);

// Seeded Fisher-Yates permutation of [0, n); identical across platforms.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

struct TrainConfig {
  int batch_size = 2;
  int grad_accum = 4;
  int epochs = 5;
  OptimizerKind optimizer = OptimizerKind::Sophia;
  AdamWConfig adamw;
  SophiaConfig sophia;
  int warmup_steps = 100;
  double min_lr_ratio = 0.1;
  std::uint64_t shuffle_seed = 0;
  double ewma_alpha = 0.01;
  std::string checkpoint_dir;  // empty: keep nothing on disk
  std::function<void(std::string_view)> log;

  double base_lr() const { return optimizer == OptimizerKind::AdamW ? adamw.lr : sophia.lr; }
  int effective_batch() const { return batch_size * grad_accum; }
  void validate() const;
};

struct LossPoint {
  std::int64_t step = 0;
  double raw = 0.0;
  double smoothed = 0.0;
};

struct EpochSummary {
  int epoch = 0;
  double train_loss = 0.0;  // mean raw loss over the epoch's steps
  std::optional<double> val_loss;
  std::array<double, kNumFields> val_field_loss{};
  std::string checkpoint_path;
};

struct TrainResult {
  std::vector<LossPoint> trace;
  std::vector<EpochSummary> epochs;
  std::int64_t optimizer_steps = 0;
  std::size_t sophia_bound_violations = 0;
  std::size_t stale_hessian_warnings = 0;
};

// Raised on a non-finite loss; checkpoints written for earlier epochs stay on disk.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

std::int64_t steps_per_epoch(std::size_t n_sequences, const TrainConfig& config);

template <typename Scalar>
TrainResult train(ModelState<Scalar>& model, const TokenizedDataset& train_set, const TokenizedDataset* val_set,
                  const TrainConfig& config);

// Mean loss over a dataset, evaluated in batches (no gradients).
template <typename Scalar>
LossReport dataset_loss(const ModelState<Scalar>& model, const TokenizedDataset& data, std::size_t batch = 16);

// s_0 = x_0; s_t = (1 - alpha) s_{t-1} + alpha x_t. alpha must lie in (0, 1].
std::vector<double> ewma(const std::vector<double>& values, double alpha = 0.01);

void write_loss_trace(std::ostream& out, const std::vector<LossPoint>& trace);

// Model tensors plus "optim.m/<name>" and "optim.second/<name>" in one checkpoint container.
template <typename Scalar>
void save_training_checkpoint(const ModelState<Scalar>& model, const OptimState<Scalar>& optim, int epoch,
                              const std::string& path);

template <typename Scalar>
struct TrainingCheckpoint {
  ModelState<Scalar> model;
  OptimState<Scalar> optim;
  int epoch = 0;
};

template <typename Scalar>
TrainingCheckpoint<Scalar> load_training_checkpoint(const std::string& path);

}  // namespace auditlm
