#include "dmrl/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <thread>

#include "dmrl/error.hpp"

namespace dmrl {

namespace {

bool contains(std::span<const Index> sorted, Index item) {
  return std::binary_search(sorted.begin(), sorted.end(), item);
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (!path.parent_path().empty()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.precision(17);
  return out;
}

const char* modality_name(std::size_t m) {
  static constexpr const char* names[] = {"I", "T", "V"};
  return names[m];
}

} // namespace

std::vector<Index> rank_scores(std::span<const double> scores, std::span<const Index> exclude, std::size_t limit) {
  std::vector<Index> items;
  items.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!contains(exclude, static_cast<Index>(i))) {
      items.push_back(static_cast<Index>(i));
    }
  }
  if (items.empty()) {
    throw InvalidInput("rank_items: every item is excluded");
  }
  const auto before = [&](Index a, Index b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  if (limit > 0 && limit < items.size()) {
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(limit), items.end(), before);
    items.resize(limit);
  } else {
    std::sort(items.begin(), items.end(), before);
  }
  return items;
}

std::vector<Index> rank_items(Index user, const ItemScorer& scorer, std::span<const Index> exclude, std::size_t limit) {
  if (user >= scorer.num_users()) {
    throw InvalidInput("rank_items: user index out of range");
  }
  std::vector<double> scores(scorer.num_items());
  scorer.score_all(user, scores);
  return rank_scores(scores, exclude, limit);
}

std::optional<double> recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  if (relevant.empty()) {
    return std::nullopt;
  }
  std::size_t hits = 0;
  for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p) {
    if (std::find(relevant.begin(), relevant.end(), ranked[p]) != relevant.end()) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

std::optional<double> ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  if (relevant.empty()) {
    return std::nullopt;
  }
  double dcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p) {
    if (std::find(relevant.begin(), relevant.end(), ranked[p]) != relevant.end()) {
      dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    }
  }
  double idcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, relevant.size()); ++p) {
    idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  }
  return dcg / idcg;
}

EvalReport evaluate(const InteractionDataset& dataset,
                    const ItemScorer& scorer,
                    EvalTarget target,
                    std::size_t k,
                    std::size_t workers) {
  if (k == 0) {
    throw InvalidInput("evaluate: k must be positive");
  }
  if (scorer.num_users() != dataset.num_users() || scorer.num_items() != dataset.num_items()) {
    throw InvalidInput("evaluate: model and dataset sizes differ");
  }
  const auto started = std::chrono::steady_clock::now();
  const auto& truth = target == EvalTarget::validation ? dataset.validation : dataset.test;
  const auto& exclude = target == EvalTarget::validation ? dataset.train : dataset.known;

  EvalReport report;
  report.k = k;
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    if (!truth[u].empty()) {
      report.users.push_back(static_cast<Index>(u));
    }
  }
  if (report.users.empty()) {
    throw InvalidInput(std::string("evaluate: no user has ") +
                       (target == EvalTarget::validation ? "validation" : "test") + " positives");
  }
  const std::size_t n = report.users.size();
  report.recall.assign(n, 0.0);
  report.ndcg.assign(n, 0.0);

  const auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores(scorer.num_items());
    for (std::size_t i = begin; i < end; ++i) {
      const Index u = report.users[i];
      scorer.score_all(u, scores);
      const auto ranked = rank_scores(scores, exclude[u], k);
      report.recall[i] = *recall_at_k(ranked, truth[u], k);
      report.ndcg[i] = *ndcg_at_k(ranked, truth[u], k);
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(workers, 1, n);
  if (threads == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          run(n * t / threads, n * (t + 1) / threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) {
      th.join();
    }
    for (auto& e : errors) {
      if (e) {
        std::rethrow_exception(e);
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    report.mean_recall += report.recall[i];
    report.mean_ndcg += report.ndcg[i];
  }
  report.mean_recall /= static_cast<double>(n);
  report.mean_ndcg /= static_cast<double>(n);
  report.num_evaluated_users = n;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

std::filesystem::path user_detail_path(const std::filesystem::path& report_path) {
  return std::filesystem::path(report_path.string() + ".users.tsv");
}

void write_report(const EvalReport& report, const IdMap& users, const std::filesystem::path& path) {
  {
    auto out = open_output(path);
    out << "metric\tk\tvalue\n";
    out << "recall\t" << report.k << '\t' << report.mean_recall << '\n';
    out << "ndcg\t" << report.k << '\t' << report.mean_ndcg << '\n';
    out << "num_evaluated_users\t" << report.k << '\t' << report.num_evaluated_users << '\n';
    out << "seconds\t" << report.k << '\t' << report.seconds << '\n';
    if (!out) {
      throw IoError("failed writing " + path.string());
    }
  }
  auto detail = open_output(user_detail_path(path));
  detail << "user_key\trecall\tndcg\n";
  for (std::size_t i = 0; i < report.users.size(); ++i) {
    detail << users.key(report.users[i]) << '\t' << report.recall[i] << '\t' << report.ndcg[i] << '\n';
  }
  if (!detail) {
    throw IoError("failed writing " + user_detail_path(path).string());
  }
}

void write_breakdown(const ScoreBreakdown& b, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "factor\tmodality\tattention\trating_raw\trating_normalized\n";
  for (std::size_t k = 0; k < b.num_factors; ++k) {
    double sum = 0.0;
    for (double r : b.partial[k]) {
      sum += r;
    }
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const double normalized = sum > 0.0 ? b.partial[k][m] / sum : 0.0;
      out << k << '\t' << modality_name(m) << '\t' << b.attention[k][m] << '\t' << b.partial[k][m] << '\t'
          << normalized << '\n';
    }
  }
  if (!out) {
    throw IoError("failed writing " + path.string());
  }
}

ScoreBreakdown export_breakdown(Index user, Index item, const ItemScorer& scorer, const std::filesystem::path& path) {
  if (user >= scorer.num_users() || item >= scorer.num_items()) {
    throw InvalidInput("export_breakdown: user or item index out of range");
  }
  auto b = scorer.breakdown(user, item);
  write_breakdown(b, path);
  return b;
}

} // namespace dmrl
