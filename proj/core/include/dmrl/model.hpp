#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmrl/data.hpp"
#include "dmrl/tensor.hpp"

namespace dmrl {

enum class AttentionMode : std::uint8_t { full, no_attention, no_user };

/// Item modalities, in the order used by every per-modality array.
enum class Modality : std::uint8_t { item_id = 0, text = 1, visual = 2 };
inline constexpr std::size_t kNumModalities = 3;

struct ModelConfig {
  std::size_t embed_dim = 128;
  std::size_t num_factors = 4;
  std::size_t text_input_dim = 0;
  std::size_t visual_input_dim = 0;
  std::size_t text_hidden = 0;   ///< 0: geometric mean of input and embed dims
  std::size_t visual_hidden = 0; ///< 0: geometric mean of input and embed dims
  std::size_t attention_hidden = 64;
  double lambda_theta = 1e-5;
  double lambda_d = 1e-2;
  bool use_text = true;
  bool use_visual = true;
  AttentionMode attention_mode = AttentionMode::full;

  std::size_t chunk_size() const { return embed_dim / num_factors; }
  std::size_t resolved_text_hidden() const;
  std::size_t resolved_visual_hidden() const;
  std::array<bool, kNumModalities> active_modalities() const { return {true, use_text, use_visual}; }

  /// Throws ConfigError on violated invariants.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

/// Two-layer refinement network: leaky(W0 · leaky(W1 x + b1) + b0).
struct RefinementNet {
  Tensor w1; ///< hidden × input
  Tensor b1; ///< 1 × hidden
  Tensor w0; ///< embed × hidden
  Tensor b0; ///< 1 × embed

  bool empty() const noexcept { return w1.empty(); }
};

/// Factor-shared attention network over [p_u^k; q_i^k; q_t^k; q_v^k].
struct AttentionNet {
  Tensor w;    ///< hidden × 4·chunk
  Tensor b;    ///< 1 × hidden
  Tensor proj; ///< 3 × hidden, bias-free
};

struct ModelParams {
  Tensor user_table; ///< N_u × d
  Tensor item_table; ///< N_i × d
  RefinementNet text;
  RefinementNet visual;
  AttentionNet attention;

  /// Xavier-uniform weights and embedding tables, zero biases.
  static ModelParams initialize(const ModelConfig& config,
                                std::size_t num_users,
                                std::size_t num_items,
                                std::uint64_t seed);

  /// Same shapes, all zeros.
  ModelParams zeros_like() const;

  /// Every non-empty tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  std::size_t num_users() const noexcept { return user_table.rows(); }
  std::size_t num_items() const noexcept { return item_table.rows(); }
};

/// Raw per-item modality inputs (rows indexed by dense item index). A null
/// pointer means the modality is not available.
struct ItemFeatures {
  const Tensor* text = nullptr;
  const Tensor* visual = nullptr;
};

/// Contiguous coordinates [k·d/K, (k+1)·d/K) of `vector`. `k` is 0-based.
std::span<const double> chunk(std::span<const double> vector, std::size_t k, std::size_t num_factors);
std::span<double> chunk(std::span<double> vector, std::size_t k, std::size_t num_factors);

// ---------------------------------------------------------------------------
// Refinement network
// ---------------------------------------------------------------------------

struct RefineTrace {
  std::vector<double> input;
  std::vector<double> hidden_pre;
  std::vector<double> hidden;
  std::vector<double> output_pre;
  std::vector<double> output;
};

RefineTrace refine_forward(std::span<const double> input, const RefinementNet& net);
std::vector<double> refine_features(std::span<const double> input, const RefinementNet& net);

/// Accumulates parameter gradients into `grad_net` and, if non-empty, the
/// input gradient into `grad_input`.
void refine_backward(const RefineTrace& trace,
                     std::span<const double> grad_output,
                     const RefinementNet& net,
                     RefinementNet& grad_net,
                     std::span<double> grad_input = {});

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Weights over (item-ID, text, visual) for one factor. Inactive modalities
/// get weight 0; in `no_attention` mode every active modality gets 1; in
/// `no_user` mode the user chunk is replaced by zeros.
std::array<double, kNumModalities> attention_weights(std::span<const double> user_chunk,
                                                     std::span<const double> item_chunk,
                                                     std::span<const double> text_chunk,
                                                     std::span<const double> visual_chunk,
                                                     const AttentionNet& net,
                                                     const ModelConfig& config);

struct AttentionTrace {
  std::vector<double> input;  ///< concatenated 4·chunk input (zeros where masked)
  std::vector<double> hidden; ///< tanh output
  std::array<double, kNumModalities> weights{};
};

AttentionTrace attention_forward(std::span<const double> user_chunk,
                                 std::span<const double> item_chunk,
                                 std::span<const double> text_chunk,
                                 std::span<const double> visual_chunk,
                                 const AttentionNet& net,
                                 const ModelConfig& config);

/// Backpropagates d loss / d weights. Adds into `grad_net` and into the
/// 4·chunk `grad_input` (user, item, text, visual blocks).
void attention_backward(const AttentionTrace& trace,
                        const std::array<double, kNumModalities>& grad_weights,
                        const AttentionNet& net,
                        const ModelConfig& config,
                        AttentionNet& grad_net,
                        std::span<double> grad_input);

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// a · softplus(<user_chunk, modality_chunk>).
double modality_factor_score(std::span<const double> user_chunk,
                             std::span<const double> modality_chunk,
                             double weight);

struct ScoreBreakdown {
  std::size_t num_factors = 0;
  std::vector<std::array<double, kNumModalities>> attention; ///< [k][m]
  std::vector<std::array<double, kNumModalities>> partial;   ///< [k][m]
  std::vector<double> factor;                                ///< [k]
  double total = 0.0;
};

/// Refined (text, visual) embeddings for one item; zeros when the modality is
/// disabled.
struct RefinedItem {
  std::vector<double> text;
  std::vector<double> visual;
};

RefinedItem refine_item(Index item, const ModelParams& params, const ItemFeatures& features, const ModelConfig& config);

ScoreBreakdown predict(Index user,
                       Index item,
                       const ModelParams& params,
                       const ItemFeatures& features,
                       const ModelConfig& config);

/// Full-catalog scorer. Caches refined item embeddings and the item half of
/// the attention pre-activation so that each (user, item) score costs
/// O(K · attention_hidden).
class ItemScorer {
public:
  ItemScorer(const ModelParams& params, const ItemFeatures& features, const ModelConfig& config);
  /// Uses already refined text/visual embeddings (N_i × d each; may be empty
  /// for disabled modalities), e.g. as stored in a checkpoint.
  ItemScorer(const ModelParams& params, Tensor refined_text, Tensor refined_visual, const ModelConfig& config);

  double score(Index user, Index item) const;
  ScoreBreakdown breakdown(Index user, Index item) const;

  /// Scores every item for `user` into `out` (size num_items).
  void score_all(Index user, std::span<double> out) const;

  const Tensor& refined_text() const noexcept { return refined_text_; }
  const Tensor& refined_visual() const noexcept { return refined_visual_; }

  std::size_t num_items() const noexcept { return params_->num_items(); }
  std::size_t num_users() const noexcept { return params_->num_users(); }

private:
  void build_item_projection();
  void user_projection(Index user, std::vector<double>& out) const;
  ScoreBreakdown evaluate(Index user, Index item, std::span<const double> user_proj) const;

  const ModelParams* params_;
  ModelConfig config_;
  Tensor refined_text_;   ///< N_i × d
  Tensor refined_visual_; ///< N_i × d
  Tensor item_projection_; ///< N_i × (K · hidden), includes bias
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// -ln sigmoid(r_pos - r_neg).
double bpr_loss(double positive_score, double negative_score);

/// d bpr / d r_pos (d bpr / d r_neg is its negation).
double bpr_loss_derivative(double positive_score, double negative_score);

/// Sum over pairs k < k' of dCor between factor chunks, for the distinct
/// users (ID), items (ID), and refined text/visual embeddings of the items.
double disentangle_loss(std::span<const Index> users,
                        std::span<const Index> items,
                        const ModelParams& params,
                        const ItemFeatures& features,
                        const ModelConfig& config);

struct Triple {
  Index user;
  Index positive;
  Index negative;

  friend bool operator==(const Triple&, const Triple&) = default;
};

struct LossTerms {
  double total = 0.0;
  double bpr = 0.0; ///< mean over the batch
  double l2 = 0.0;  ///< unscaled ||Θ||² over touched rows and all network tensors
  double ld = 0.0;  ///< unscaled disentanglement loss
};

struct LossResult {
  LossTerms terms;
  ModelParams gradients;
};

/// mean BPR + λθ·||Θ||² + λd·L_d with analytic gradients for every tensor.
/// Throws NonFiniteError naming the offending term.
LossResult total_loss(std::span<const Triple> batch,
                      const ModelParams& params,
                      const ItemFeatures& features,
                      const ModelConfig& config);

/// Loss value only (same computation, no gradients returned).
LossTerms loss_terms(std::span<const Triple> batch,
                     const ModelParams& params,
                     const ItemFeatures& features,
                     const ModelConfig& config);

} // namespace dmrl
