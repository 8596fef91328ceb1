#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dmrl/data.hpp"
#include "dmrl/model.hpp"

namespace dmrl {

enum class EvalTarget { validation, test };

struct EvalReport {
  std::size_t k = 20;
  std::vector<Index> users; ///< users with at least one target positive
  std::vector<double> recall;
  std::vector<double> ndcg;
  double mean_recall = 0.0;
  double mean_ndcg = 0.0;
  std::size_t num_evaluated_users = 0;
  double seconds = 0.0;
};

/// Items not in `exclude` (sorted), by descending score then ascending index.
/// At most `limit` items are returned (0: all).
std::vector<Index> rank_items(Index user, const ItemScorer& scorer, std::span<const Index> exclude, std::size_t limit = 0);

/// Ranks precomputed scores; same ordering rule as rank_items.
std::vector<Index> rank_scores(std::span<const double> scores, std::span<const Index> exclude, std::size_t limit = 0);

/// |top-K ∩ relevant| / |relevant|; nullopt when `relevant` is empty.
std::optional<double> recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// Binary-relevance NDCG with log2 discounts and 1-based ranks; nullopt when
/// `relevant` is empty.
std::optional<double> ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// Macro-averaged Recall@K and NDCG@K. For the validation target, training
/// positives are excluded from ranking; for the test target, training and
/// validation positives are. Throws InvalidInput when no user has a target
/// positive.
EvalReport evaluate(const InteractionDataset& dataset,
                    const ItemScorer& scorer,
                    EvalTarget target,
                    std::size_t k = 20,
                    std::size_t workers = 1);

/// `metric<TAB>k<TAB>value` summary at `path`, plus `user_key<TAB>recall<TAB>ndcg`
/// rows at `<path>.users.tsv`.
void write_report(const EvalReport& report, const IdMap& users, const std::filesystem::path& path);
std::filesystem::path user_detail_path(const std::filesystem::path& report_path);

/// `factor<TAB>modality<TAB>attention<TAB>rating_raw<TAB>rating_normalized`,
/// one row per (factor, modality); ratings normalized per factor across
/// modalities.
void write_breakdown(const ScoreBreakdown& breakdown, const std::filesystem::path& path);

ScoreBreakdown export_breakdown(Index user, Index item, const ItemScorer& scorer, const std::filesystem::path& path);

} // namespace dmrl
