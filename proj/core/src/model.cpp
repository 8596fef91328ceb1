#include "dmrl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dmrl/error.hpp"
#include "dmrl/numerics.hpp"

namespace dmrl {

namespace num = numerics;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] += alpha * x[i];
  }
}

// out += M[:, col0:col0+n] · x
void block_matvec(const Tensor& m, std::size_t col0, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r).subspan(col0, x.size());
    out[r] += dot(row, x);
  }
}

// out += M[:, col0:col0+n]^T · y
void block_matvec_transposed(const Tensor& m, std::size_t col0, std::span<const double> y, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (y[r] == 0.0) {
      continue;
    }
    axpy(y[r], m.row(r).subspan(col0, out.size()), out);
  }
}

// G[:, col0:col0+n] += y ⊗ x
void block_outer(std::span<const double> y, std::span<const double> x, Tensor& g, std::size_t col0) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    if (y[r] == 0.0) {
      continue;
    }
    axpy(y[r], x, g.row(r).subspan(col0, x.size()));
  }
}

std::size_t geometric_mean(std::size_t a, std::size_t b) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(a) * static_cast<double>(b))));
  return std::max<std::size_t>(1, g);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void require_features(const ModelConfig& config, const ItemFeatures& features, std::size_t num_items) {
  if (config.use_text) {
    if (features.text == nullptr) {
      throw InvalidInput("text modality enabled but no text features supplied");
    }
    if (features.text->rows() != num_items || features.text->cols() != config.text_input_dim) {
      throw InvalidInput("text feature table shape does not match the model");
    }
  }
  if (config.use_visual) {
    if (features.visual == nullptr) {
      throw InvalidInput("visual modality enabled but no visual features supplied");
    }
    if (features.visual->rows() != num_items || features.visual->cols() != config.visual_input_dim) {
      throw InvalidInput("visual feature table shape does not match the model");
    }
  }
}

void require_index(Index idx, std::size_t bound, const char* what) {
  if (idx >= bound) {
    throw InvalidInput(std::string(what) + " index out of range");
  }
}

// Softmax over active entries; inactive entries get 0.
std::array<double, kNumModalities> masked_softmax(const std::array<double, kNumModalities>& logits,
                                                  const std::array<bool, kNumModalities>& active) {
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (active[m]) {
      top = std::max(top, logits[m]);
    }
  }
  std::array<double, kNumModalities> out{};
  double total = 0.0;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (active[m]) {
      out[m] = std::exp(logits[m] - top);
      total += out[m];
    }
  }
  for (double& v : out) {
    v /= total;
  }
  return out;
}

std::array<double, kNumModalities> weights_from_hidden(std::span<const double> hidden,
                                                       const AttentionNet& net,
                                                       const std::array<bool, kNumModalities>& active) {
  std::array<double, kNumModalities> logits{};
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    logits[m] = dot(net.proj.row(m), hidden);
  }
  return masked_softmax(logits, active);
}

// d loss / d logits for softmax weights restricted to active modalities.
std::array<double, kNumModalities> softmax_backward(const std::array<double, kNumModalities>& weights,
                                                    const std::array<double, kNumModalities>& grad_weights,
                                                    const std::array<bool, kNumModalities>& active) {
  double inner = 0.0;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (active[m]) {
      inner += weights[m] * grad_weights[m];
    }
  }
  std::array<double, kNumModalities> out{};
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (active[m]) {
      out[m] = weights[m] * (grad_weights[m] - inner);
    }
  }
  return out;
}

// Chunk-pair dCor sum for one embedding family. `samples` is n × d. When
// `grad` is non-null, adds weight · dL/dsamples into it.
double factor_dcor_sum(const Tensor& samples, std::size_t num_factors, double weight, Tensor* grad) {
  const std::size_t n = samples.rows();
  if (n < 2 || num_factors < 2) {
    return 0.0;
  }
  const std::size_t c = samples.cols() / num_factors;
  std::vector<Tensor> chunks;
  std::vector<num::CenteredDistances> centered;
  chunks.reserve(num_factors);
  centered.reserve(num_factors);
  for (std::size_t k = 0; k < num_factors; ++k) {
    Tensor x(n, c);
    for (std::size_t r = 0; r < n; ++r) {
      const auto src = chunk(samples.row(r), k, num_factors);
      std::copy(src.begin(), src.end(), x.row(r).begin());
    }
    centered.push_back(num::center_distances(x));
    chunks.push_back(std::move(x));
  }

  double total = 0.0;
  if (grad == nullptr) {
    for (std::size_t k = 0; k < num_factors; ++k) {
      for (std::size_t k2 = k + 1; k2 < num_factors; ++k2) {
        total += num::dcor(centered[k], centered[k2]);
      }
    }
    return total;
  }

  std::vector<Tensor> distance_grads(num_factors, Tensor(n, n));
  for (std::size_t k = 0; k < num_factors; ++k) {
    for (std::size_t k2 = k + 1; k2 < num_factors; ++k2) {
      total += num::accumulate_dcor_distance_gradient(centered[k], centered[k2], weight, distance_grads[k],
                                                       distance_grads[k2]);
    }
  }
  for (std::size_t k = 0; k < num_factors; ++k) {
    Tensor chunk_grad(n, c);
    num::distance_gradient_to_samples(chunks[k], centered[k].distances, distance_grads[k], chunk_grad);
    for (std::size_t r = 0; r < n; ++r) {
      const auto src = chunk_grad.row(r);
      auto dst = chunk(grad->row(r), k, num_factors);
      for (std::size_t j = 0; j < c; ++j) {
        dst[j] += src[j];
      }
    }
  }
  return total;
}

double squared_norm(std::span<const double> v) {
  return dot(v, v);
}

void check_finite(double value, const char* term) {
  if (!std::isfinite(value)) {
    throw NonFiniteError(term, std::string("non-finite value in loss term '") + term + "'");
  }
}

template <typename Range>
std::vector<Index> sorted_unique(const Range& values) {
  std::vector<Index> out(values.begin(), values.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t local_index(const std::vector<Index>& sorted, Index value) {
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), value) - sorted.begin());
}

} // namespace

// ---------------------------------------------------------------------------
// Config and parameters
// ---------------------------------------------------------------------------

std::size_t ModelConfig::resolved_text_hidden() const {
  return text_hidden != 0 ? text_hidden : geometric_mean(text_input_dim, embed_dim);
}

std::size_t ModelConfig::resolved_visual_hidden() const {
  return visual_hidden != 0 ? visual_hidden : geometric_mean(visual_input_dim, embed_dim);
}

void ModelConfig::validate() const {
  if (embed_dim == 0 || num_factors == 0) {
    throw ConfigError("embed_dim and num_factors must be positive");
  }
  if (embed_dim % num_factors != 0) {
    throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") must be divisible by num_factors (" +
                      std::to_string(num_factors) + ")");
  }
  if (!(lambda_theta >= 0.0) || !(lambda_d >= 0.0) || !std::isfinite(lambda_theta) || !std::isfinite(lambda_d)) {
    throw ConfigError("lambda_theta and lambda_d must be finite and non-negative");
  }
  if (attention_hidden == 0) {
    throw ConfigError("attention_hidden must be positive");
  }
  if (use_text && text_input_dim == 0) {
    throw ConfigError("use_text requires text_input_dim > 0");
  }
  if (use_visual && visual_input_dim == 0) {
    throw ConfigError("use_visual requires visual_input_dim > 0");
  }
}

std::string to_string(AttentionMode mode) {
  switch (mode) {
  case AttentionMode::full:
    return "full";
  case AttentionMode::no_attention:
    return "no_attention";
  case AttentionMode::no_user:
    return "no_user";
  }
  return "full";
}

AttentionMode parse_attention_mode(const std::string& text) {
  if (text == "full") {
    return AttentionMode::full;
  }
  if (text == "no_attention") {
    return AttentionMode::no_attention;
  }
  if (text == "no_user") {
    return AttentionMode::no_user;
  }
  throw ConfigError("attention_mode must be one of full, no_attention, no_user (got '" + text + "')");
}

ModelParams ModelParams::initialize(const ModelConfig& config,
                                    std::size_t num_users,
                                    std::size_t num_items,
                                    std::uint64_t seed) {
  config.validate();
  if (num_users == 0 || num_items == 0) {
    throw InvalidInput("model needs at least one user and one item");
  }
  std::uint64_t stream = 0;
  const auto next_seed = [&] { return splitmix64(seed ^ splitmix64(++stream)); };
  const std::size_t d = config.embed_dim;

  ModelParams p;
  p.user_table = num::xavier_init(num_users, d, next_seed());
  p.item_table = num::xavier_init(num_items, d, next_seed());

  const auto make_net = [&](std::size_t input, std::size_t hidden) {
    RefinementNet net;
    net.w1 = num::xavier_init(hidden, input, next_seed());
    net.b1 = Tensor(1, hidden);
    net.w0 = num::xavier_init(d, hidden, next_seed());
    net.b0 = Tensor(1, d);
    return net;
  };
  if (config.use_text) {
    p.text = make_net(config.text_input_dim, config.resolved_text_hidden());
  } else {
    stream += 2;
  }
  if (config.use_visual) {
    p.visual = make_net(config.visual_input_dim, config.resolved_visual_hidden());
  } else {
    stream += 2;
  }
  if (config.attention_mode != AttentionMode::no_attention) {
    const std::size_t h = config.attention_hidden;
    p.attention.w = num::xavier_init(h, 4 * config.chunk_size(), next_seed());
    p.attention.b = Tensor(1, h);
    p.attention.proj = num::xavier_init(kNumModalities, h, next_seed());
  }
  return p;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (auto& [name, tensor] : z.named_tensors()) {
    tensor->fill(0.0);
  }
  return z;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  const auto add = [&](const char* name, Tensor& t) {
    if (!t.empty()) {
      out.emplace_back(name, &t);
    }
  };
  add("user_table", user_table);
  add("item_table", item_table);
  add("text.w1", text.w1);
  add("text.b1", text.b1);
  add("text.w0", text.w0);
  add("text.b0", text.b0);
  add("visual.w1", visual.w1);
  add("visual.b1", visual.b1);
  add("visual.w0", visual.w0);
  add("visual.b0", visual.b0);
  add("attention.w", attention.w);
  add("attention.b", attention.b);
  add("attention.proj", attention.proj);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named_tensors()) {
    out.emplace_back(name, t);
  }
  return out;
}

std::span<const double> chunk(std::span<const double> vector, std::size_t k, std::size_t num_factors) {
  if (num_factors == 0 || k >= num_factors) {
    throw InvalidInput("chunk: factor index out of range");
  }
  if (vector.size() % num_factors != 0) {
    throw InvalidInput("chunk: vector length not divisible by num_factors");
  }
  const std::size_t c = vector.size() / num_factors;
  return vector.subspan(k * c, c);
}

std::span<double> chunk(std::span<double> vector, std::size_t k, std::size_t num_factors) {
  if (num_factors == 0 || k >= num_factors) {
    throw InvalidInput("chunk: factor index out of range");
  }
  if (vector.size() % num_factors != 0) {
    throw InvalidInput("chunk: vector length not divisible by num_factors");
  }
  const std::size_t c = vector.size() / num_factors;
  return vector.subspan(k * c, c);
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

RefineTrace refine_forward(std::span<const double> input, const RefinementNet& net) {
  if (net.empty()) {
    throw InvalidInput("refine_features: network not initialized");
  }
  if (input.size() != net.w1.cols()) {
    throw InvalidInput("refine_features: input has " + std::to_string(input.size()) + " values, expected " +
                       std::to_string(net.w1.cols()));
  }
  RefineTrace t;
  t.input.assign(input.begin(), input.end());
  const std::size_t hidden = net.w1.rows();
  const std::size_t out = net.w0.rows();
  t.hidden_pre.resize(hidden);
  t.hidden.resize(hidden);
  for (std::size_t h = 0; h < hidden; ++h) {
    t.hidden_pre[h] = dot(net.w1.row(h), input) + net.b1(0, h);
    t.hidden[h] = num::leaky_relu(t.hidden_pre[h]);
  }
  t.output_pre.resize(out);
  t.output.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    t.output_pre[o] = dot(net.w0.row(o), t.hidden) + net.b0(0, o);
    t.output[o] = num::leaky_relu(t.output_pre[o]);
  }
  return t;
}

std::vector<double> refine_features(std::span<const double> input, const RefinementNet& net) {
  return refine_forward(input, net).output;
}

void refine_backward(const RefineTrace& trace,
                     std::span<const double> grad_output,
                     const RefinementNet& net,
                     RefinementNet& grad_net,
                     std::span<double> grad_input) {
  const std::size_t hidden = net.w1.rows();
  const std::size_t out = net.w0.rows();
  std::vector<double> d_out(out);
  for (std::size_t o = 0; o < out; ++o) {
    d_out[o] = grad_output[o] * num::leaky_relu_derivative(trace.output_pre[o]);
  }
  std::vector<double> d_hidden(hidden, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    if (d_out[o] == 0.0) {
      continue;
    }
    axpy(d_out[o], trace.hidden, grad_net.w0.row(o));
    grad_net.b0(0, o) += d_out[o];
    axpy(d_out[o], net.w0.row(o), d_hidden);
  }
  for (std::size_t h = 0; h < hidden; ++h) {
    const double dh = d_hidden[h] * num::leaky_relu_derivative(trace.hidden_pre[h]);
    if (dh == 0.0) {
      continue;
    }
    axpy(dh, trace.input, grad_net.w1.row(h));
    grad_net.b1(0, h) += dh;
    if (!grad_input.empty()) {
      axpy(dh, net.w1.row(h), grad_input);
    }
  }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

AttentionTrace attention_forward(std::span<const double> user_chunk,
                                 std::span<const double> item_chunk,
                                 std::span<const double> text_chunk,
                                 std::span<const double> visual_chunk,
                                 const AttentionNet& net,
                                 const ModelConfig& config) {
  const std::size_t c = config.chunk_size();
  if (user_chunk.size() != c || item_chunk.size() != c || text_chunk.size() != c || visual_chunk.size() != c) {
    throw InvalidInput("attention_weights: chunk length mismatch");
  }
  const auto active = config.active_modalities();
  AttentionTrace t;
  if (config.attention_mode == AttentionMode::no_attention) {
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      t.weights[m] = active[m] ? 1.0 : 0.0;
    }
    return t;
  }
  if (net.w.rows() != config.attention_hidden || net.w.cols() != 4 * c) {
    throw InvalidInput("attention_weights: network shape does not match the config");
  }
  t.input.assign(4 * c, 0.0);
  if (config.attention_mode != AttentionMode::no_user) {
    std::copy(user_chunk.begin(), user_chunk.end(), t.input.begin());
  }
  std::copy(item_chunk.begin(), item_chunk.end(), t.input.begin() + static_cast<std::ptrdiff_t>(c));
  if (config.use_text) {
    std::copy(text_chunk.begin(), text_chunk.end(), t.input.begin() + static_cast<std::ptrdiff_t>(2 * c));
  }
  if (config.use_visual) {
    std::copy(visual_chunk.begin(), visual_chunk.end(), t.input.begin() + static_cast<std::ptrdiff_t>(3 * c));
  }
  t.hidden.resize(config.attention_hidden);
  for (std::size_t h = 0; h < t.hidden.size(); ++h) {
    t.hidden[h] = num::tanh(dot(net.w.row(h), t.input) + net.b(0, h));
  }
  t.weights = weights_from_hidden(t.hidden, net, active);
  return t;
}

std::array<double, kNumModalities> attention_weights(std::span<const double> user_chunk,
                                                     std::span<const double> item_chunk,
                                                     std::span<const double> text_chunk,
                                                     std::span<const double> visual_chunk,
                                                     const AttentionNet& net,
                                                     const ModelConfig& config) {
  return attention_forward(user_chunk, item_chunk, text_chunk, visual_chunk, net, config).weights;
}

void attention_backward(const AttentionTrace& trace,
                        const std::array<double, kNumModalities>& grad_weights,
                        const AttentionNet& net,
                        const ModelConfig& config,
                        AttentionNet& grad_net,
                        std::span<double> grad_input) {
  if (config.attention_mode == AttentionMode::no_attention) {
    return;
  }
  const std::size_t c = config.chunk_size();
  const auto active = config.active_modalities();
  const auto d_logits = softmax_backward(trace.weights, grad_weights, active);
  const std::size_t hidden = trace.hidden.size();
  std::vector<double> dz(hidden, 0.0);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (d_logits[m] == 0.0) {
      continue;
    }
    axpy(d_logits[m], trace.hidden, grad_net.proj.row(m));
    axpy(d_logits[m], net.proj.row(m), dz);
  }
  for (std::size_t h = 0; h < hidden; ++h) {
    dz[h] *= 1.0 - trace.hidden[h] * trace.hidden[h];
  }
  block_outer(dz, trace.input, grad_net.w, 0);
  axpy(1.0, dz, grad_net.b.row(0));

  std::vector<double> dx(4 * c, 0.0);
  block_matvec_transposed(net.w, 0, dz, dx);
  const std::array<bool, 4> pass_through{config.attention_mode != AttentionMode::no_user, true, config.use_text,
                                         config.use_visual};
  for (std::size_t block = 0; block < 4; ++block) {
    if (!pass_through[block]) {
      continue;
    }
    for (std::size_t j = 0; j < c; ++j) {
      grad_input[block * c + j] += dx[block * c + j];
    }
  }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

double modality_factor_score(std::span<const double> user_chunk,
                             std::span<const double> modality_chunk,
                             double weight) {
  if (user_chunk.size() != modality_chunk.size()) {
    throw InvalidInput("modality_factor_score: chunk length mismatch");
  }
  return weight * num::softplus(dot(user_chunk, modality_chunk));
}

RefinedItem refine_item(Index item, const ModelParams& params, const ItemFeatures& features, const ModelConfig& config) {
  require_index(item, params.num_items(), "item");
  require_features(config, features, params.num_items());
  RefinedItem out;
  out.text = config.use_text ? refine_features(features.text->row(item), params.text)
                             : std::vector<double>(config.embed_dim, 0.0);
  out.visual = config.use_visual ? refine_features(features.visual->row(item), params.visual)
                                 : std::vector<double>(config.embed_dim, 0.0);
  return out;
}

ScoreBreakdown predict(Index user,
                       Index item,
                       const ModelParams& params,
                       const ItemFeatures& features,
                       const ModelConfig& config) {
  require_index(user, params.num_users(), "user");
  require_index(item, params.num_items(), "item");
  const std::size_t K = config.num_factors;
  const auto refined = refine_item(item, params, features, config);
  const auto p = params.user_table.row(user);
  const auto q = params.item_table.row(item);
  const std::array<std::span<const double>, kNumModalities> modality_vectors{q, refined.text, refined.visual};
  const auto active = config.active_modalities();

  ScoreBreakdown out;
  out.num_factors = K;
  out.attention.resize(K);
  out.partial.resize(K);
  out.factor.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const auto pk = chunk(p, k, K);
    out.attention[k] = attention_weights(pk, chunk(q, k, K), chunk(std::span<const double>(refined.text), k, K),
                                         chunk(std::span<const double>(refined.visual), k, K), params.attention, config);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      out.partial[k][m] =
          active[m] ? modality_factor_score(pk, chunk(modality_vectors[m], k, K), out.attention[k][m]) : 0.0;
      out.factor[k] += out.partial[k][m];
    }
    out.total += out.factor[k];
  }
  return out;
}

ItemScorer::ItemScorer(const ModelParams& params, const ItemFeatures& features, const ModelConfig& config)
    : params_(&params), config_(config) {
  require_features(config, features, params.num_items());
  const std::size_t n = params.num_items();
  const std::size_t d = config.embed_dim;
  refined_text_ = Tensor(n, d);
  refined_visual_ = Tensor(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (config.use_text) {
      const auto v = refine_features(features.text->row(i), params.text);
      std::copy(v.begin(), v.end(), refined_text_.row(i).begin());
    }
    if (config.use_visual) {
      const auto v = refine_features(features.visual->row(i), params.visual);
      std::copy(v.begin(), v.end(), refined_visual_.row(i).begin());
    }
  }
  build_item_projection();
}

ItemScorer::ItemScorer(const ModelParams& params, Tensor refined_text, Tensor refined_visual, const ModelConfig& config)
    : params_(&params), config_(config), refined_text_(std::move(refined_text)),
      refined_visual_(std::move(refined_visual)) {
  const std::size_t n = params.num_items();
  const std::size_t d = config.embed_dim;
  if (refined_text_.empty()) {
    if (config.use_text) {
      throw InvalidInput("ItemScorer: text modality enabled but no refined text embeddings supplied");
    }
    refined_text_ = Tensor(n, d);
  }
  if (refined_visual_.empty()) {
    if (config.use_visual) {
      throw InvalidInput("ItemScorer: visual modality enabled but no refined visual embeddings supplied");
    }
    refined_visual_ = Tensor(n, d);
  }
  if (refined_text_.rows() != n || refined_text_.cols() != d || refined_visual_.rows() != n ||
      refined_visual_.cols() != d) {
    throw InvalidInput("ItemScorer: refined embedding shape mismatch");
  }
  build_item_projection();
}

void ItemScorer::build_item_projection() {
  if (config_.attention_mode == AttentionMode::no_attention) {
    return;
  }
  const std::size_t n = params_->num_items();
  const std::size_t K = config_.num_factors;
  const std::size_t c = config_.chunk_size();
  const std::size_t H = config_.attention_hidden;
  item_projection_ = Tensor(n, K * H);
  const auto& w = params_->attention.w;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      auto out = item_projection_.row(i).subspan(k * H, H);
      std::copy(params_->attention.b.row(0).begin(), params_->attention.b.row(0).end(), out.begin());
      block_matvec(w, c, chunk(params_->item_table.row(i), k, K), out);
      if (config_.use_text) {
        block_matvec(w, 2 * c, chunk(refined_text_.row(i), k, K), out);
      }
      if (config_.use_visual) {
        block_matvec(w, 3 * c, chunk(refined_visual_.row(i), k, K), out);
      }
    }
  }
}

void ItemScorer::user_projection(Index user, std::vector<double>& out) const {
  const std::size_t K = config_.num_factors;
  const std::size_t H = config_.attention_hidden;
  out.assign(config_.attention_mode == AttentionMode::no_attention ? 0 : K * H, 0.0);
  if (config_.attention_mode != AttentionMode::full) {
    return;
  }
  for (std::size_t k = 0; k < K; ++k) {
    block_matvec(params_->attention.w, 0, chunk(params_->user_table.row(user), k, K),
                 std::span<double>(out).subspan(k * H, H));
  }
}

ScoreBreakdown ItemScorer::evaluate(Index user, Index item, std::span<const double> user_proj) const {
  const std::size_t K = config_.num_factors;
  const std::size_t H = config_.attention_hidden;
  const auto active = config_.active_modalities();
  const auto p = params_->user_table.row(user);
  const std::array<std::span<const double>, kNumModalities> modality_vectors{
      params_->item_table.row(item), refined_text_.row(item), refined_visual_.row(item)};

  ScoreBreakdown out;
  out.num_factors = K;
  out.attention.resize(K);
  out.partial.resize(K);
  out.factor.assign(K, 0.0);
  std::vector<double> hidden(H);
  for (std::size_t k = 0; k < K; ++k) {
    if (config_.attention_mode == AttentionMode::no_attention) {
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        out.attention[k][m] = active[m] ? 1.0 : 0.0;
      }
    } else {
      const auto ip = item_projection_.row(item).subspan(k * H, H);
      const auto up = user_proj.subspan(k * H, H);
      for (std::size_t h = 0; h < H; ++h) {
        hidden[h] = num::tanh(up[h] + ip[h]);
      }
      out.attention[k] = weights_from_hidden(hidden, params_->attention, active);
    }
    const auto pk = chunk(p, k, K);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      out.partial[k][m] =
          active[m] ? modality_factor_score(pk, chunk(modality_vectors[m], k, K), out.attention[k][m]) : 0.0;
      out.factor[k] += out.partial[k][m];
    }
    out.total += out.factor[k];
  }
  return out;
}

ScoreBreakdown ItemScorer::breakdown(Index user, Index item) const {
  require_index(user, params_->num_users(), "user");
  require_index(item, params_->num_items(), "item");
  std::vector<double> up;
  user_projection(user, up);
  return evaluate(user, item, up);
}

double ItemScorer::score(Index user, Index item) const {
  return breakdown(user, item).total;
}

void ItemScorer::score_all(Index user, std::span<double> out) const {
  require_index(user, params_->num_users(), "user");
  if (out.size() != params_->num_items()) {
    throw InvalidInput("score_all: output size mismatch");
  }
  const std::size_t K = config_.num_factors;
  const std::size_t H = config_.attention_hidden;
  const std::size_t c = config_.chunk_size();
  const auto active = config_.active_modalities();
  const auto p = params_->user_table.row(user);
  std::vector<double> up;
  user_projection(user, up);
  const bool attend = config_.attention_mode != AttentionMode::no_attention;
  const double* proj0 = attend ? params_->attention.proj.row(0).data() : nullptr;
  const double* proj1 = attend ? params_->attention.proj.row(1).data() : nullptr;
  const double* proj2 = attend ? params_->attention.proj.row(2).data() : nullptr;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::array<std::span<const double>, kNumModalities> modality_vectors{
        params_->item_table.row(i), refined_text_.row(i), refined_visual_.row(i)};
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      std::array<double, kNumModalities> a{};
      if (config_.attention_mode == AttentionMode::no_attention) {
        for (std::size_t m = 0; m < kNumModalities; ++m) {
          a[m] = active[m] ? 1.0 : 0.0;
        }
      } else {
        const double* ip = item_projection_.row(i).data() + k * H;
        const double* uk = up.data() + k * H;
        std::array<double, kNumModalities> logits{};
        for (std::size_t h = 0; h < H; ++h) {
          const double t = num::tanh(uk[h] + ip[h]);
          logits[0] += proj0[h] * t;
          logits[1] += proj1[h] * t;
          logits[2] += proj2[h] * t;
        }
        a = masked_softmax(logits, active);
      }
      const auto pk = p.subspan(k * c, c);
      double factor = 0.0;
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (active[m]) {
          factor += a[m] * num::softplus(dot(pk, modality_vectors[m].subspan(k * c, c)));
        }
      }
      total += factor;
    }
    out[i] = total;
  }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double bpr_loss(double positive_score, double negative_score) {
  return -num::log_sigmoid(positive_score - negative_score);
}

double bpr_loss_derivative(double positive_score, double negative_score) {
  return -num::sigmoid(negative_score - positive_score);
}

double disentangle_loss(std::span<const Index> users,
                        std::span<const Index> items,
                        const ModelParams& params,
                        const ItemFeatures& features,
                        const ModelConfig& config) {
  const auto distinct_users = sorted_unique(users);
  const auto distinct_items = sorted_unique(items);
  const std::size_t K = config.num_factors;
  const std::size_t d = config.embed_dim;
  for (Index u : distinct_users) {
    require_index(u, params.num_users(), "user");
  }
  for (Index i : distinct_items) {
    require_index(i, params.num_items(), "item");
  }

  double total = 0.0;
  Tensor user_samples(distinct_users.size(), d);
  for (std::size_t r = 0; r < distinct_users.size(); ++r) {
    const auto src = params.user_table.row(distinct_users[r]);
    std::copy(src.begin(), src.end(), user_samples.row(r).begin());
  }
  total += factor_dcor_sum(user_samples, K, 1.0, nullptr);

  Tensor item_samples(distinct_items.size(), d);
  Tensor text_samples(distinct_items.size(), d);
  Tensor visual_samples(distinct_items.size(), d);
  for (std::size_t r = 0; r < distinct_items.size(); ++r) {
    const Index i = distinct_items[r];
    const auto src = params.item_table.row(i);
    std::copy(src.begin(), src.end(), item_samples.row(r).begin());
    const auto refined = refine_item(i, params, features, config);
    std::copy(refined.text.begin(), refined.text.end(), text_samples.row(r).begin());
    std::copy(refined.visual.begin(), refined.visual.end(), visual_samples.row(r).begin());
  }
  total += factor_dcor_sum(item_samples, K, 1.0, nullptr);
  if (config.use_text) {
    total += factor_dcor_sum(text_samples, K, 1.0, nullptr);
  }
  if (config.use_visual) {
    total += factor_dcor_sum(visual_samples, K, 1.0, nullptr);
  }
  return total;
}

namespace {

struct PairCache {
  std::size_t local_user = 0;
  std::size_t local_item = 0;
  std::vector<std::vector<double>> hidden;                    ///< [k][H]
  std::vector<std::array<double, kNumModalities>> weights;    ///< [k][m]
  std::vector<std::array<double, kNumModalities>> dots;       ///< [k][m]
  double score = 0.0;
};

} // namespace

LossResult total_loss(std::span<const Triple> batch,
                      const ModelParams& params,
                      const ItemFeatures& features,
                      const ModelConfig& config) {
  config.validate();
  if (batch.empty()) {
    throw InvalidInput("total_loss: empty batch");
  }
  require_features(config, features, params.num_items());
  for (const auto& t : batch) {
    require_index(t.user, params.num_users(), "user");
    require_index(t.positive, params.num_items(), "item");
    require_index(t.negative, params.num_items(), "item");
  }

  const std::size_t K = config.num_factors;
  const std::size_t d = config.embed_dim;
  const std::size_t c = config.chunk_size();
  const std::size_t H = config.attention_hidden;
  const bool attend = config.attention_mode != AttentionMode::no_attention;
  const bool user_query = config.attention_mode == AttentionMode::full;
  const auto active = config.active_modalities();

  std::vector<Index> batch_users;
  std::vector<Index> batch_items;
  for (const auto& t : batch) {
    batch_users.push_back(t.user);
    batch_items.push_back(t.positive);
    batch_items.push_back(t.negative);
  }
  const auto users = sorted_unique(batch_users);
  const auto items = sorted_unique(batch_items);
  const std::size_t n_users = users.size();
  const std::size_t n_items = items.size();

  // Refined item embeddings for the items in the batch.
  std::vector<RefineTrace> text_traces;
  std::vector<RefineTrace> visual_traces;
  Tensor text_local(n_items, d);
  Tensor visual_local(n_items, d);
  for (std::size_t li = 0; li < n_items; ++li) {
    if (config.use_text) {
      text_traces.push_back(refine_forward(features.text->row(items[li]), params.text));
      std::copy(text_traces.back().output.begin(), text_traces.back().output.end(), text_local.row(li).begin());
    }
    if (config.use_visual) {
      visual_traces.push_back(refine_forward(features.visual->row(items[li]), params.visual));
      std::copy(visual_traces.back().output.begin(), visual_traces.back().output.end(),
                visual_local.row(li).begin());
    }
  }

  // Attention pre-activations split into user and item halves.
  Tensor user_proj(n_users, attend ? K * H : 0);
  Tensor item_proj(n_items, attend ? K * H : 0);
  if (attend) {
    const auto& w = params.attention.w;
    for (std::size_t lu = 0; lu < n_users && user_query; ++lu) {
      for (std::size_t k = 0; k < K; ++k) {
        block_matvec(w, 0, chunk(params.user_table.row(users[lu]), k, K), user_proj.row(lu).subspan(k * H, H));
      }
    }
    for (std::size_t li = 0; li < n_items; ++li) {
      for (std::size_t k = 0; k < K; ++k) {
        auto out = item_proj.row(li).subspan(k * H, H);
        std::copy(params.attention.b.row(0).begin(), params.attention.b.row(0).end(), out.begin());
        block_matvec(w, c, chunk(params.item_table.row(items[li]), k, K), out);
        if (config.use_text) {
          block_matvec(w, 2 * c, chunk(text_local.row(li), k, K), out);
        }
        if (config.use_visual) {
          block_matvec(w, 3 * c, chunk(visual_local.row(li), k, K), out);
        }
      }
    }
  }

  const auto modality_row = [&](std::size_t m, std::size_t li) -> std::span<const double> {
    switch (m) {
    case 0:
      return params.item_table.row(items[li]);
    case 1:
      return text_local.row(li);
    default:
      return visual_local.row(li);
    }
  };

  const auto forward = [&](std::size_t lu, std::size_t li, PairCache& cache) {
    cache.local_user = lu;
    cache.local_item = li;
    cache.hidden.assign(attend ? K : 0, std::vector<double>(H));
    cache.weights.assign(K, {});
    cache.dots.assign(K, {});
    cache.score = 0.0;
    const auto p = params.user_table.row(users[lu]);
    for (std::size_t k = 0; k < K; ++k) {
      if (attend) {
        auto& h = cache.hidden[k];
        const auto up = user_proj.row(lu).subspan(k * H, H);
        const auto ip = item_proj.row(li).subspan(k * H, H);
        for (std::size_t j = 0; j < H; ++j) {
          h[j] = num::tanh(up[j] + ip[j]);
        }
        cache.weights[k] = weights_from_hidden(h, params.attention, active);
      } else {
        for (std::size_t m = 0; m < kNumModalities; ++m) {
          cache.weights[k][m] = active[m] ? 1.0 : 0.0;
        }
      }
      const auto pk = chunk(p, k, K);
      double factor = 0.0;
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (!active[m]) {
          continue;
        }
        cache.dots[k][m] = dot(pk, chunk(modality_row(m, li), k, K));
        factor += cache.weights[k][m] * num::softplus(cache.dots[k][m]);
      }
      cache.score += factor;
    }
  };

  ModelParams grad = params.zeros_like();
  Tensor grad_user_local(n_users, d);
  Tensor grad_item_local(n_items, d);
  Tensor grad_text_local(n_items, d);
  Tensor grad_visual_local(n_items, d);
  Tensor dz_user(n_users, attend ? K * H : 0);
  Tensor dz_item(n_items, attend ? K * H : 0);

  const auto grad_modality_row = [&](std::size_t m, std::size_t li) -> std::span<double> {
    switch (m) {
    case 0:
      return grad_item_local.row(li);
    case 1:
      return grad_text_local.row(li);
    default:
      return grad_visual_local.row(li);
    }
  };

  const auto backward = [&](const PairCache& cache, double g) {
    const std::size_t lu = cache.local_user;
    const std::size_t li = cache.local_item;
    const auto p = params.user_table.row(users[lu]);
    auto gp = grad_user_local.row(lu);
    std::vector<double> dz(H);
    for (std::size_t k = 0; k < K; ++k) {
      const auto pk = chunk(p, k, K);
      auto gpk = chunk(gp, k, K);
      std::array<double, kNumModalities> grad_weights{};
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (!active[m]) {
          continue;
        }
        const double s = cache.dots[k][m];
        const double coef = g * cache.weights[k][m] * num::sigmoid(s);
        axpy(coef, chunk(modality_row(m, li), k, K), gpk);
        axpy(coef, pk, chunk(grad_modality_row(m, li), k, K));
        grad_weights[m] = g * num::softplus(s);
      }
      if (!attend) {
        continue;
      }
      const auto d_logits = softmax_backward(cache.weights[k], grad_weights, active);
      const auto& h = cache.hidden[k];
      std::fill(dz.begin(), dz.end(), 0.0);
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (d_logits[m] == 0.0) {
          continue;
        }
        axpy(d_logits[m], h, grad.attention.proj.row(m));
        axpy(d_logits[m], params.attention.proj.row(m), dz);
      }
      for (std::size_t j = 0; j < H; ++j) {
        dz[j] *= 1.0 - h[j] * h[j];
      }
      if (user_query) {
        axpy(1.0, dz, dz_user.row(lu).subspan(k * H, H));
      }
      axpy(1.0, dz, dz_item.row(li).subspan(k * H, H));
    }
  };

  // BPR over the batch.
  double bpr_sum = 0.0;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  PairCache pos;
  PairCache neg;
  for (const auto& t : batch) {
    const std::size_t lu = local_index(users, t.user);
    forward(lu, local_index(items, t.positive), pos);
    forward(lu, local_index(items, t.negative), neg);
    bpr_sum += bpr_loss(pos.score, neg.score);
    const double g = bpr_loss_derivative(pos.score, neg.score) * inv_batch;
    backward(pos, g);
    backward(neg, -g);
  }

  // Push aggregated attention gradients through the shared first layer.
  if (attend) {
    auto& gw = grad.attention.w;
    const auto& w = params.attention.w;
    for (std::size_t lu = 0; lu < n_users && user_query; ++lu) {
      for (std::size_t k = 0; k < K; ++k) {
        const auto dz = dz_user.row(lu).subspan(k * H, H);
        block_outer(dz, chunk(params.user_table.row(users[lu]), k, K), gw, 0);
        block_matvec_transposed(w, 0, dz, chunk(grad_user_local.row(lu), k, K));
      }
    }
    for (std::size_t li = 0; li < n_items; ++li) {
      for (std::size_t k = 0; k < K; ++k) {
        const auto dz = dz_item.row(li).subspan(k * H, H);
        axpy(1.0, dz, grad.attention.b.row(0));
        block_outer(dz, chunk(params.item_table.row(items[li]), k, K), gw, c);
        block_matvec_transposed(w, c, dz, chunk(grad_item_local.row(li), k, K));
        if (config.use_text) {
          block_outer(dz, chunk(text_local.row(li), k, K), gw, 2 * c);
          block_matvec_transposed(w, 2 * c, dz, chunk(grad_text_local.row(li), k, K));
        }
        if (config.use_visual) {
          block_outer(dz, chunk(visual_local.row(li), k, K), gw, 3 * c);
          block_matvec_transposed(w, 3 * c, dz, chunk(grad_visual_local.row(li), k, K));
        }
      }
    }
  }

  check_finite(bpr_sum, "bpr");

  // Disentanglement over the distinct entities of the batch.
  double ld = 0.0;
  {
    Tensor user_samples(n_users, d);
    for (std::size_t lu = 0; lu < n_users; ++lu) {
      const auto src = params.user_table.row(users[lu]);
      std::copy(src.begin(), src.end(), user_samples.row(lu).begin());
    }
    Tensor item_samples(n_items, d);
    for (std::size_t li = 0; li < n_items; ++li) {
      const auto src = params.item_table.row(items[li]);
      std::copy(src.begin(), src.end(), item_samples.row(li).begin());
    }
    const bool with_grad = config.lambda_d > 0.0;
    const double w = config.lambda_d;
    ld += factor_dcor_sum(user_samples, K, w, with_grad ? &grad_user_local : nullptr);
    ld += factor_dcor_sum(item_samples, K, w, with_grad ? &grad_item_local : nullptr);
    if (config.use_text) {
      ld += factor_dcor_sum(text_local, K, w, with_grad ? &grad_text_local : nullptr);
    }
    if (config.use_visual) {
      ld += factor_dcor_sum(visual_local, K, w, with_grad ? &grad_visual_local : nullptr);
    }
  }

  // L2 over touched embedding rows and every network tensor.
  double l2 = 0.0;
  const double l2_scale = 2.0 * config.lambda_theta;
  for (std::size_t lu = 0; lu < n_users; ++lu) {
    const auto row = params.user_table.row(users[lu]);
    l2 += squared_norm(row);
    axpy(l2_scale, row, grad_user_local.row(lu));
  }
  for (std::size_t li = 0; li < n_items; ++li) {
    const auto row = params.item_table.row(items[li]);
    l2 += squared_norm(row);
    axpy(l2_scale, row, grad_item_local.row(li));
  }
  {
    auto grad_tensors = grad.named_tensors();
    const auto param_tensors = params.named_tensors();
    for (std::size_t t = 0; t < param_tensors.size(); ++t) {
      const auto& name = param_tensors[t].first;
      if (name == "user_table" || name == "item_table") {
        continue;
      }
      const auto values = param_tensors[t].second->values();
      l2 += squared_norm(values);
      axpy(l2_scale, values, grad_tensors[t].second->values());
    }
  }

  // Refinement networks.
  for (std::size_t li = 0; li < n_items; ++li) {
    if (config.use_text) {
      refine_backward(text_traces[li], grad_text_local.row(li), params.text, grad.text);
    }
    if (config.use_visual) {
      refine_backward(visual_traces[li], grad_visual_local.row(li), params.visual, grad.visual);
    }
  }

  for (std::size_t lu = 0; lu < n_users; ++lu) {
    axpy(1.0, grad_user_local.row(lu), grad.user_table.row(users[lu]));
  }
  for (std::size_t li = 0; li < n_items; ++li) {
    axpy(1.0, grad_item_local.row(li), grad.item_table.row(items[li]));
  }

  LossResult result;
  result.terms.bpr = bpr_sum * inv_batch;
  result.terms.l2 = l2;
  result.terms.ld = ld;
  check_finite(result.terms.bpr, "bpr");
  check_finite(result.terms.l2, "l2");
  check_finite(result.terms.ld, "ld");
  result.terms.total = result.terms.bpr + config.lambda_theta * l2 + config.lambda_d * ld;
  check_finite(result.terms.total, "total");
  for (const auto& [name, tensor] : grad.named_tensors()) {
    for (double v : tensor->values()) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(name, "non-finite gradient for tensor '" + name + "'");
      }
    }
  }
  result.gradients = std::move(grad);
  return result;
}

LossTerms loss_terms(std::span<const Triple> batch,
                     const ModelParams& params,
                     const ItemFeatures& features,
                     const ModelConfig& config) {
  return total_loss(batch, params, features, config).terms;
}

} // namespace dmrl
