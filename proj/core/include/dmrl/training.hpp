#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "dmrl/data.hpp"
#include "dmrl/model.hpp"
#include "dmrl/numerics.hpp"

namespace dmrl {

struct TrainConfig {
  std::size_t batch_size = 1024;
  double learning_rate = 1e-4;
  std::size_t n_candidates = 4;
  std::size_t max_epochs = 1000;
  std::size_t patience_epochs = 50;
  std::size_t checkpoint_every = 10;
  std::size_t eval_k = 20;
  std::uint64_t seed = 42;
  double grad_clip = 0.0; ///< global-norm clip; 0 disables
  std::size_t workers = 1;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Optimizer and early-stopping bookkeeping. `adam[t]` pairs with
/// `params.named_tensors()[t]`.
struct TrainState {
  std::size_t epoch = 0; ///< completed epochs
  double best_val_recall = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  std::vector<numerics::AdamState> adam;

  static TrainState fresh(const ModelParams& params, double learning_rate);
  std::uint64_t step_count() const { return adam.empty() ? 0 : adam.front().step_count; }
  void set_learning_rate(double learning_rate);
};

struct EpochMetrics {
  double loss = 0.0;
  double bpr = 0.0;
  double l2 = 0.0;
  double ld = 0.0;
  std::size_t batches = 0;
};

enum class StopDecision { proceed, stop };

/// Strict improvement resets the patience counter; otherwise it grows and
/// the loop stops once it reaches `patience`.
StopDecision early_stop_check(TrainState& state, double current_val_recall, std::size_t patience);

/// argmax over candidates of <p_u, q_i> on the ID embeddings; ties go to the
/// lowest item index.
Index select_hard_negative(Index user, std::span<const Index> candidates, const ModelParams& params);

/// Independent RNG stream for one epoch, so resumed runs replay exactly.
std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch);

/// One (u, i+, i-) per training positive, shuffled.
std::vector<Triple> build_epoch_triples(const InteractionDataset& dataset,
                                        const ModelParams& params,
                                        const TrainConfig& config,
                                        std::mt19937_64& rng);

/// Rounds every parameter (and Adam moment) to f32 so that checkpoints are
/// lossless.
void round_to_storage(ModelParams& params);
void round_to_storage(TrainState& state);

/// Runs one epoch of mini-batch Adam updates and advances `state.epoch`.
/// Throws NonFiniteError (term + batch index in the message) on divergence.
EpochMetrics train_epoch(const InteractionDataset& dataset,
                         const ItemFeatures& features,
                         ModelParams& params,
                         TrainState& state,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config);

struct EpochRecord {
  std::size_t epoch = 0;
  EpochMetrics metrics;
  double val_recall = 0.0;
  double val_ndcg = 0.0;
  double seconds = 0.0;
};

/// `epoch<TAB>loss<TAB>bpr<TAB>l2<TAB>ld<TAB>val_recall@K<TAB>val_ndcg@K<TAB>seconds`
void write_log_line(std::ostream& out, const EpochRecord& record);

struct TrainOptions {
  std::filesystem::path out_dir; ///< empty: no files written
  std::ostream* log = nullptr;   ///< optional extra sink for log lines
  bool restore_best = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_recall = 0.0;
  bool early_stopped = false;
};

/// Full loop: epochs, validation Recall@K every epoch, early stopping,
/// periodic checkpoints (`last.ckpt`), best checkpoint (`best.ckpt`) and the
/// TSV training log (`train_log.tsv`) under `options.out_dir`.
TrainResult train(const InteractionDataset& dataset,
                  const ItemFeatures& features,
                  const ModelConfig& model_config,
                  const TrainConfig& train_config,
                  ModelParams& params,
                  TrainState& state,
                  const TrainOptions& options = {});

} // namespace dmrl
