#include "dmrl/synthgen.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "dmrl/error.hpp"
#include "dmrl/model.hpp"

namespace dmrl {

namespace {

std::string format_values(std::span<const double> values) {
  std::string out;
  std::array<char, 64> buf{};
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) {
      out.push_back(',');
    }
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), values[i]);
    out.append(buf.data(), end);
  }
  return out;
}

// Columns of the listed factor blocks.
Tensor factor_columns(const Tensor& latent, std::size_t factor_dim, const std::vector<std::size_t>& factors) {
  Tensor out(latent.rows(), factors.size() * factor_dim);
  for (std::size_t i = 0; i < latent.rows(); ++i) {
    for (std::size_t f = 0; f < factors.size(); ++f) {
      for (std::size_t c = 0; c < factor_dim; ++c) {
        out(i, f * factor_dim + c) = latent(i, factors[f] * factor_dim + c);
      }
    }
  }
  return out;
}

// Random linear map of `latent` plus Gaussian noise.
Tensor make_features(const Tensor& latent, std::size_t out_dim, double noise_std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t in_dim = latent.cols();
  Tensor map(out_dim, in_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (double& v : map.values()) {
    v = normal(rng) * scale;
  }
  Tensor out(latent.rows(), out_dim);
  for (std::size_t i = 0; i < latent.rows(); ++i) {
    for (std::size_t r = 0; r < out_dim; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < in_dim; ++c) {
        s += map(r, c) * latent(i, c);
      }
      out(i, r) = s + noise_std * normal(rng);
    }
  }
  return out;
}

} // namespace

void SynthConfig::validate() const {
  if (num_users < 1 || num_items < 1) {
    throw ConfigError("synthetic: num_users and num_items must be positive");
  }
  if (k_true < 1) {
    throw ConfigError("synthetic: k_true must be at least 1");
  }
  if (factor_dim < 1) {
    throw ConfigError("synthetic: factor_dim must be at least 1");
  }
  if (text_dim < 1 || visual_dim < 1) {
    throw ConfigError("synthetic: feature dimensions must be positive");
  }
  if (interactions_per_user < 5) {
    throw ConfigError("synthetic: interactions_per_user must be at least 5");
  }
  if (interactions_per_user > num_items) {
    throw ConfigError("synthetic: interactions_per_user exceeds num_items");
  }
  if (!(preference_concentration > 0.0) || !std::isfinite(preference_concentration)) {
    throw ConfigError("synthetic: preference_concentration must be positive");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ConfigError("synthetic: noise_std must be finite and non-negative");
  }
}

SyntheticData generate_synthetic(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticData data;
  const std::size_t nu = config.num_users;
  const std::size_t ni = config.num_items;
  const std::size_t kt = config.k_true;
  const std::size_t fd = config.factor_dim;

  for (std::size_t u = 0; u < nu; ++u) {
    data.user_keys.push_back("u" + std::to_string(u));
  }
  for (std::size_t i = 0; i < ni; ++i) {
    data.item_keys.push_back("i" + std::to_string(i));
  }

  data.text_factor.assign(kt, false);
  data.visual_factor.assign(kt, false);
  std::vector<std::size_t> text_factors;
  std::vector<std::size_t> visual_factors;
  for (std::size_t k = 0; k < kt; ++k) {
    if (kt == 1 || k % 2 == 0) {
      data.text_factor[k] = true;
      text_factors.push_back(k);
    }
    if (kt == 1 || k % 2 == 1) {
      data.visual_factor[k] = true;
      visual_factors.push_back(k);
    }
  }
  const auto carries = [&](std::size_t m, std::size_t k) {
    return m == 0 || (m == 1 && data.text_factor[k]) || (m == 2 && data.visual_factor[k]);
  };

  data.user_latent = Tensor(nu, kt * fd);
  for (double& v : data.user_latent.values()) {
    v = normal(rng);
  }
  data.item_latent = Tensor(ni, kt * fd);
  for (double& v : data.item_latent.values()) {
    v = normal(rng);
  }

  // Symmetric Dirichlet per (user, factor) over the modalities carrying it.
  std::gamma_distribution<double> gamma(config.preference_concentration, 1.0);
  data.modality_preference = Tensor(nu, kt * kNumModalities);
  for (std::size_t u = 0; u < nu; ++u) {
    for (std::size_t k = 0; k < kt; ++k) {
      std::array<double, kNumModalities> g{};
      double sum = 0.0;
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        g[m] = carries(m, k) ? gamma(rng) : 0.0;
        sum += g[m];
      }
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        data.modality_preference(u, k * kNumModalities + m) = g[m] / sum;
      }
    }
  }

  data.text_features =
      make_features(factor_columns(data.item_latent, fd, text_factors), config.text_dim, config.noise_std, rng);
  data.visual_features =
      make_features(factor_columns(data.item_latent, fd, visual_factors), config.visual_dim, config.noise_std, rng);

  // s(u, i) = sum_k (sum_m pi[u][k][m]) * <U^k, V^k>, the sum running over the
  // modalities that carry factor k.
  data.planted_scores = Tensor(nu, ni);
  for (std::size_t u = 0; u < nu; ++u) {
    for (std::size_t i = 0; i < ni; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < kt; ++k) {
        double w = 0.0;
        for (std::size_t m = 0; m < kNumModalities; ++m) {
          w += data.modality_preference(u, k * kNumModalities + m);
        }
        double d = 0.0;
        for (std::size_t c = 0; c < fd; ++c) {
          d += data.user_latent(u, k * fd + c) * data.item_latent(i, k * fd + c);
        }
        s += w * d;
      }
      data.planted_scores(u, i) = s;
    }
  }

  // Top-q items per user under the planted score plus per-user scaled noise.
  std::vector<double> noisy(ni);
  std::vector<std::size_t> order(ni);
  for (std::size_t u = 0; u < nu; ++u) {
    const auto row = data.planted_scores.row(u);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(ni);
    double var = 0.0;
    for (double s : row) {
      var += (s - mean) * (s - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(ni));
    for (std::size_t i = 0; i < ni; ++i) {
      noisy[i] = row[i] + config.noise_std * sd * normal(rng);
    }
    std::iota(order.begin(), order.end(), 0);
    const auto q = static_cast<std::ptrdiff_t>(config.interactions_per_user);
    std::partial_sort(order.begin(), order.begin() + q, order.end(), [&](std::size_t a, std::size_t b) {
      return noisy[a] > noisy[b] || (noisy[a] == noisy[b] && a < b);
    });
    std::vector<std::size_t> chosen(order.begin(), order.begin() + q);
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i : chosen) {
      data.interactions.emplace_back(u, i);
    }
  }
  return data;
}

InteractionLog interaction_log(const SyntheticData& data) {
  InteractionLog log;
  for (const auto& k : data.user_keys) {
    log.users.insert(k);
  }
  for (const auto& k : data.item_keys) {
    log.items.insert(k);
  }
  for (const auto& [u, i] : data.interactions) {
    log.pairs.emplace_back(static_cast<Index>(u), static_cast<Index>(i));
  }
  return log;
}

SynthFiles write_synthetic(const SyntheticData& data, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  SynthFiles files{out_dir / "interactions.tsv", out_dir / "text_features.tsv", out_dir / "visual_features.tsv",
                   out_dir / "ground_truth.tsv"};
  {
    std::ofstream out(files.interactions);
    if (!out) {
      throw IoError("cannot write " + files.interactions.string());
    }
    for (const auto& [u, i] : data.interactions) {
      out << data.user_keys[u] << '\t' << data.item_keys[i] << '\n';
    }
    if (!out) {
      throw IoError("failed writing " + files.interactions.string());
    }
  }
  write_feature_table_text(files.text_features, data.item_keys, data.text_features);
  write_feature_table_text(files.visual_features, data.item_keys, data.visual_features);

  std::ofstream out(files.ground_truth);
  if (!out) {
    throw IoError("cannot write " + files.ground_truth.string());
  }
  out << "kind\tid\tvalues\n";
  for (std::size_t u = 0; u < data.user_keys.size(); ++u) {
    out << "user_latent\t" << data.user_keys[u] << '\t' << format_values(data.user_latent.row(u)) << '\n';
  }
  for (std::size_t i = 0; i < data.item_keys.size(); ++i) {
    out << "item_latent\t" << data.item_keys[i] << '\t' << format_values(data.item_latent.row(i)) << '\n';
  }
  for (std::size_t u = 0; u < data.user_keys.size(); ++u) {
    out << "modality_preference\t" << data.user_keys[u] << '\t'
        << format_values(data.modality_preference.row(u)) << '\n';
  }
  for (std::size_t k = 0; k < data.text_factor.size(); ++k) {
    const char* carrier = data.text_factor[k] && data.visual_factor[k] ? "text+visual"
                          : data.text_factor[k]                        ? "text"
                                                                       : "visual";
    out << "factor_modality\t" << k << '\t' << carrier << '\n';
  }
  if (!out) {
    throw IoError("failed writing " + files.ground_truth.string());
  }
  return files;
}

} // namespace dmrl
