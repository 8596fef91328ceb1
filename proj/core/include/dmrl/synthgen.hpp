#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dmrl/data.hpp"
#include "dmrl/tensor.hpp"

namespace dmrl {

struct SynthConfig {
  std::size_t num_users = 200;
  std::size_t num_items = 500;
  std::size_t k_true = 4;
  std::size_t interactions_per_user = 10;
  std::size_t text_dim = 48;
  std::size_t visual_dim = 64;
  std::size_t factor_dim = 4; ///< latent coordinates per planted factor
  double noise_std = 0.1;
  double preference_concentration = 1.0; ///< symmetric Dirichlet parameter of the modality preference
  std::uint64_t seed = 7;

  void validate() const;
};

/// Generator output with every latent kept for ground-truth checks.
struct SyntheticData {
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
  std::vector<std::pair<std::size_t, std::size_t>> interactions; ///< (user, item)
  Tensor text_features;   ///< num_items × text_dim
  Tensor visual_features; ///< num_items × visual_dim
  Tensor user_latent;     ///< num_users × (k_true · factor_dim)
  Tensor item_latent;     ///< num_items × (k_true · factor_dim)
  /// num_users × (k_true · 3), simplex per factor over (ID, text, visual);
  /// zero for modalities that do not carry the factor.
  Tensor modality_preference;
  std::vector<bool> text_factor;   ///< factor k is encoded in the text features
  std::vector<bool> visual_factor; ///< factor k is encoded in the visual features
  Tensor planted_scores;  ///< num_users × num_items
};

SyntheticData generate_synthetic(const SynthConfig& config);

/// In-memory interaction log over the full synthetic catalog, including items
/// nobody interacted with. No k-core filtering is applied.
InteractionLog interaction_log(const SyntheticData& data);

struct SynthFiles {
  std::filesystem::path interactions;
  std::filesystem::path text_features;
  std::filesystem::path visual_features;
  std::filesystem::path ground_truth;
};

/// Writes interactions.tsv, text_features.tsv, visual_features.tsv and
/// ground_truth.tsv into `out_dir`.
SynthFiles write_synthetic(const SyntheticData& data, const std::filesystem::path& out_dir);

} // namespace dmrl
