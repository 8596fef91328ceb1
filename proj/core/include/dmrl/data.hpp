#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmrl/tensor.hpp"

namespace dmrl {

using Index = std::uint32_t;

/// Bijection between external string keys and dense indices [0, size()).
/// Indices are assigned in insertion order.
class IdMap {
public:
  Index insert(std::string_view key);
  std::optional<Index> find(std::string_view key) const;
  Index at(std::string_view key) const; ///< throws InvalidInput when absent
  const std::string& key(Index index) const { return keys_[index]; }
  const std::vector<std::string>& keys() const noexcept { return keys_; }
  std::size_t size() const noexcept { return keys_.size(); }

private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, Index> index_;
};

/// Deduplicated, k-core filtered interaction log.
struct InteractionLog {
  IdMap users;
  IdMap items;
  std::vector<std::pair<Index, Index>> pairs; ///< (user, item), file order
  std::size_t duplicate_count = 0;
};

/// Reads `user_key<TAB>item_key[<TAB>...]` lines (`#` comments allowed),
/// collapses duplicates and drops users/items with fewer than
/// `min_interactions` interactions until a fixpoint is reached.
/// Surviving keys are indexed in order of first appearance.
InteractionLog parse_interactions(const std::filesystem::path& path, std::size_t min_interactions = 5);
InteractionLog filter_interactions(std::vector<std::pair<std::string, std::string>> raw,
                                   std::size_t min_interactions);

enum class Split : std::uint8_t { train, validation, test };

struct SplitRatios {
  double test = 0.2;        ///< fraction of each user's interactions held out for test (floored)
  double validation = 0.1;  ///< fraction of the remaining training pool moved to validation (rounded)
};

struct InteractionDataset {
  IdMap users;
  IdMap items;
  /// Per-user sorted item indices.
  std::vector<std::vector<Index>> train;
  std::vector<std::vector<Index>> validation;
  std::vector<std::vector<Index>> test;
  /// Per-user sorted union of train and validation (never sampled as negatives).
  std::vector<std::vector<Index>> known;
  std::uint64_t seed = 0;
  std::size_t single_interaction_users = 0;

  std::size_t num_users() const noexcept { return users.size(); }
  std::size_t num_items() const noexcept { return items.size(); }
  std::size_t num_train() const noexcept;
  bool is_known(Index user, Index item) const;

  /// Rebuilds `known` from train and validation.
  void rebuild_known();
};

/// Per-user random split. Deterministic for a fixed seed.
InteractionDataset split_dataset(const InteractionLog& log, SplitRatios ratios, std::uint64_t seed);

/// Split manifest (`user<TAB>item<TAB>train|val|test`) plus users.tsv and
/// items.tsv carrying the index order.
void write_dataset(const InteractionDataset& dataset, const std::filesystem::path& dir);
InteractionDataset read_dataset(const std::filesystem::path& dir);
void write_split_manifest(const InteractionDataset& dataset, const std::filesystem::path& path);

enum class FeatureModality : std::uint8_t { text, visual };

struct FeatureTable {
  FeatureModality modality = FeatureModality::text;
  std::size_t dim = 0;
  Tensor vectors; ///< num_items × dim, row = dense item index
  std::size_t missing_count = 0;  ///< dataset items absent from the file (zero rows)
  std::size_t unknown_count = 0;  ///< file rows whose key is not in the dataset
};

/// Loads a text (`key<TAB>v1,v2,...`) or binary (`DMRLFT01`) feature file and
/// aligns rows to `items`.
FeatureTable load_feature_table(const std::filesystem::path& path, FeatureModality modality, const IdMap& items);

void write_feature_table_text(const std::filesystem::path& path,
                              std::span<const std::string> keys,
                              const Tensor& vectors);
void write_feature_table_binary(const std::filesystem::path& path,
                                std::span<const std::string> keys,
                                const Tensor& vectors);

/// Up to `n` distinct items outside the user's train ∪ validation positives.
/// Test positives remain eligible.
std::vector<Index> sample_negative_candidates(const InteractionDataset& dataset,
                                              Index user,
                                              std::size_t n,
                                              std::mt19937_64& rng);

} // namespace dmrl
