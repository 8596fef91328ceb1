#include "dmrl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>

#include "dmrl/checkpoint.hpp"
#include "dmrl/error.hpp"
#include "dmrl/evaluation.hpp"

namespace dmrl {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

void round_tensor(Tensor& t) {
  for (double& v : t.values()) {
    v = static_cast<double>(static_cast<float>(v));
  }
}

bool has_validation(const InteractionDataset& dataset) {
  return std::any_of(dataset.validation.begin(), dataset.validation.end(),
                     [](const auto& v) { return !v.empty(); });
}

Checkpoint make_checkpoint(const InteractionDataset& dataset,
                           const ModelConfig& config,
                           const ModelParams& params,
                           const TrainState& state,
                           const ItemScorer& scorer) {
  Checkpoint ck;
  ck.config = config;
  ck.params = params;
  ck.state = state;
  ck.user_keys = dataset.users.keys();
  ck.item_keys = dataset.items.keys();
  if (config.use_text) {
    ck.refined_text = scorer.refined_text();
  }
  if (config.use_visual) {
    ck.refined_visual = scorer.refined_visual();
  }
  return ck;
}

} // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) {
    throw ConfigError("batch_size must be at least 2");
  }
  if (patience_epochs < 1) {
    throw ConfigError("patience_epochs must be at least 1");
  }
  if (n_candidates < 1) {
    throw ConfigError("n_candidates must be at least 1");
  }
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (eval_k < 1) {
    throw ConfigError("eval_k must be at least 1");
  }
  if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) {
    throw ConfigError("grad_clip must be finite and non-negative");
  }
  if (workers < 1) {
    throw ConfigError("workers must be at least 1");
  }
}

TrainState TrainState::fresh(const ModelParams& params, double learning_rate) {
  TrainState s;
  for (const auto& [name, tensor] : params.named_tensors()) {
    s.adam.push_back(numerics::AdamState::for_shape(tensor->rows(), tensor->cols(), learning_rate));
  }
  return s;
}

void TrainState::set_learning_rate(double learning_rate) {
  for (auto& a : adam) {
    a.learning_rate = learning_rate;
  }
}

StopDecision early_stop_check(TrainState& state, double current_val_recall, std::size_t patience) {
  if (current_val_recall > state.best_val_recall) {
    state.best_val_recall = current_val_recall;
    state.best_epoch = state.epoch;
    state.epochs_since_best = 0;
  } else {
    ++state.epochs_since_best;
  }
  return state.epochs_since_best >= patience ? StopDecision::stop : StopDecision::proceed;
}

Index select_hard_negative(Index user, std::span<const Index> candidates, const ModelParams& params) {
  if (candidates.empty()) {
    throw InvalidInput("select_hard_negative: no candidates");
  }
  if (user >= params.num_users()) {
    throw InvalidInput("select_hard_negative: user index out of range");
  }
  const auto p = params.user_table.row(user);
  Index best = candidates.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (Index c : candidates) {
    if (c >= params.num_items()) {
      throw InvalidInput("select_hard_negative: item index out of range");
    }
    const double s = dot(p, params.item_table.row(c));
    if (s > best_score || (s == best_score && c < best)) {
      best_score = s;
      best = c;
    }
  }
  return best;
}

std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x444d524cU};
  return std::mt19937_64(seq);
}

std::vector<Triple> build_epoch_triples(const InteractionDataset& dataset,
                                        const ModelParams& params,
                                        const TrainConfig& config,
                                        std::mt19937_64& rng) {
  std::vector<Triple> triples;
  triples.reserve(dataset.num_train());
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    const auto user = static_cast<Index>(u);
    for (Index positive : dataset.train[u]) {
      const auto candidates = sample_negative_candidates(dataset, user, config.n_candidates, rng);
      if (candidates.empty()) {
        throw InvalidInput("user '" + dataset.users.key(user) + "' has no eligible negative items");
      }
      triples.push_back({user, positive, select_hard_negative(user, candidates, params)});
    }
  }
  std::shuffle(triples.begin(), triples.end(), rng);
  return triples;
}

void round_to_storage(ModelParams& params) {
  for (auto& [name, tensor] : params.named_tensors()) {
    round_tensor(*tensor);
  }
}

void round_to_storage(TrainState& state) {
  for (auto& a : state.adam) {
    round_tensor(a.first_moment);
    round_tensor(a.second_moment);
  }
}

EpochMetrics train_epoch(const InteractionDataset& dataset,
                         const ItemFeatures& features,
                         ModelParams& params,
                         TrainState& state,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config) {
  train_config.validate();
  auto tensors = params.named_tensors();
  if (state.adam.size() != tensors.size()) {
    throw InvalidInput("train_epoch: optimizer state does not match the parameters");
  }
  state.set_learning_rate(train_config.learning_rate);

  auto rng = epoch_rng(train_config.seed, state.epoch);
  const auto triples = build_epoch_triples(dataset, params, train_config, rng);

  EpochMetrics metrics;
  const std::size_t bs = train_config.batch_size;
  for (std::size_t start = 0; start < triples.size(); start += bs) {
    const std::size_t end = std::min(triples.size(), start + bs);
    const std::span<const Triple> batch(triples.data() + start, end - start);
    LossResult result;
    try {
      result = total_loss(batch, params, features, model_config);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(e.term(), std::string(e.what()) + " (epoch " + std::to_string(state.epoch + 1) +
                                         ", batch " + std::to_string(metrics.batches) + ")");
    }
    auto grads = result.gradients.named_tensors();

    if (train_config.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (const auto& [name, g] : grads) {
        for (double v : g->values()) {
          norm2 += v * v;
        }
      }
      const double norm = std::sqrt(norm2);
      if (norm > train_config.grad_clip) {
        const double scale = train_config.grad_clip / norm;
        for (auto& [name, g] : grads) {
          for (double& v : g->values()) {
            v *= scale;
          }
        }
      }
    }

    for (std::size_t t = 0; t < tensors.size(); ++t) {
      numerics::adam_step(tensors[t].second->values(), grads[t].second->values(), state.adam[t]);
    }
    round_to_storage(params);
    round_to_storage(state);

    metrics.loss += result.terms.total;
    metrics.bpr += result.terms.bpr;
    metrics.l2 += result.terms.l2;
    metrics.ld += result.terms.ld;
    ++metrics.batches;
  }
  if (metrics.batches > 0) {
    const double n = static_cast<double>(metrics.batches);
    metrics.loss /= n;
    metrics.bpr /= n;
    metrics.l2 /= n;
    metrics.ld /= n;
  }
  ++state.epoch;
  return metrics;
}

void write_log_line(std::ostream& out, const EpochRecord& r) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out.precision(17);
  out << r.epoch << '\t' << r.metrics.loss << '\t' << r.metrics.bpr << '\t' << r.metrics.l2 << '\t'
      << r.metrics.ld << '\t' << r.val_recall << '\t' << r.val_ndcg << '\t';
  out.precision(3);
  out << std::fixed << r.seconds << '\n';
  out.flags(flags);
  out.precision(precision);
}

TrainResult train(const InteractionDataset& dataset,
                  const ItemFeatures& features,
                  const ModelConfig& model_config,
                  const TrainConfig& train_config,
                  ModelParams& params,
                  TrainState& state,
                  const TrainOptions& options) {
  model_config.validate();
  train_config.validate();
  if (state.epoch == 0) {
    round_to_storage(params);
  }

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = state.epoch == 0 ? std::ios::trunc : std::ios::app;
    log_file.open(options.out_dir / "train_log.tsv", std::ios::out | mode);
    if (!log_file) {
      throw IoError("cannot write " + (options.out_dir / "train_log.tsv").string());
    }
  }

  const bool validate_each_epoch = has_validation(dataset);
  TrainResult result;
  std::optional<ModelParams> best_params;
  std::optional<TrainState> best_state;

  while (state.epoch < train_config.max_epochs) {
    const auto started = std::chrono::steady_clock::now();
    EpochRecord record;
    record.metrics = train_epoch(dataset, features, params, state, model_config, train_config);
    record.epoch = state.epoch;

    const ItemScorer scorer(params, features, model_config);
    if (validate_each_epoch) {
      const auto report = evaluate(dataset, scorer, EvalTarget::validation, train_config.eval_k, train_config.workers);
      record.val_recall = report.mean_recall;
      record.val_ndcg = report.mean_ndcg;
    }
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (log_file.is_open()) {
      write_log_line(log_file, record);
      log_file.flush();
    }
    if (options.log != nullptr) {
      write_log_line(*options.log, record);
    }
    if (options.on_epoch) {
      options.on_epoch(record);
    }
    result.history.push_back(record);

    const auto decision = early_stop_check(state, record.val_recall, train_config.patience_epochs);
    if (state.epochs_since_best == 0) {
      best_params = params;
      best_state = state;
    }
    if (!options.out_dir.empty() && train_config.checkpoint_every > 0 &&
        state.epoch % train_config.checkpoint_every == 0) {
      save_checkpoint(make_checkpoint(dataset, model_config, params, state, scorer), options.out_dir / "last.ckpt");
    }
    if (decision == StopDecision::stop) {
      result.early_stopped = true;
      break;
    }
  }

  if (!options.out_dir.empty()) {
    const ItemScorer scorer(params, features, model_config);
    save_checkpoint(make_checkpoint(dataset, model_config, params, state, scorer), options.out_dir / "last.ckpt");
  }
  result.best_epoch = state.best_epoch;
  result.best_val_recall = std::max(0.0, state.best_val_recall);
  if (options.restore_best && best_params) {
    params = std::move(*best_params);
    if (!options.out_dir.empty()) {
      const ItemScorer scorer(params, features, model_config);
      save_checkpoint(make_checkpoint(dataset, model_config, params, *best_state, scorer),
                      options.out_dir / "best.ckpt");
    }
  }
  return result;
}

} // namespace dmrl
