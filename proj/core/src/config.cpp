#include "dmrl/config.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dmrl/error.hpp"
#include "dmrl/model.hpp"
#include "dmrl/synthgen.hpp"
#include "dmrl/training.hpp"

namespace dmrl {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("invalid integer for '" + key + "': '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) {
    throw ConfigError("invalid number for '" + key + "': '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") {
    return true;
  }
  if (value == "false" || value == "0") {
    return false;
  }
  throw ConfigError("invalid boolean for '" + key + "': '" + value + "' (use true/false)");
}

std::string format_real(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

using Setter = std::function<void(const std::string&)>;

} // namespace

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config " + path.string());
  }
  KeyValues out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      line.erase(hash);
    }
    const auto text = trim(line);
    if (text.empty()) {
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    auto key = trim(std::string_view(text).substr(0, eq));
    auto value = trim(std::string_view(text).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": empty key");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::pair<std::string, std::string> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like key=value: '" + text + "'");
  }
  auto key = trim(std::string_view(text).substr(0, eq));
  auto value = trim(std::string_view(text).substr(eq + 1));
  if (key.empty()) {
    throw ConfigError("override has an empty key: '" + text + "'");
  }
  return {std::move(key), std::move(value)};
}

void apply_training_setting(ModelConfig& model, TrainConfig& train, const std::string& key, const std::string& value) {
  const auto size = [&](std::size_t& field) {
    return [&field, &key](const std::string& v) { field = parse_integer<std::size_t>(key, v); };
  };
  const auto real = [&](double& field) {
    return [&field, &key](const std::string& v) { field = parse_real(key, v); };
  };
  const auto flag = [&](bool& field) {
    return [&field, &key](const std::string& v) { field = parse_bool(key, v); };
  };
  const std::map<std::string, Setter> setters{
      {"embed_dim", size(model.embed_dim)},
      {"num_factors", size(model.num_factors)},
      {"text_input_dim", size(model.text_input_dim)},
      {"visual_input_dim", size(model.visual_input_dim)},
      {"text_hidden", size(model.text_hidden)},
      {"visual_hidden", size(model.visual_hidden)},
      {"attention_hidden", size(model.attention_hidden)},
      {"lambda_theta", real(model.lambda_theta)},
      {"lambda_d", real(model.lambda_d)},
      {"use_text", flag(model.use_text)},
      {"use_visual", flag(model.use_visual)},
      {"attention_mode", [&](const std::string& v) { model.attention_mode = parse_attention_mode(v); }},
      {"batch_size", size(train.batch_size)},
      {"learning_rate", real(train.learning_rate)},
      {"n_candidates", size(train.n_candidates)},
      {"max_epochs", size(train.max_epochs)},
      {"patience_epochs", size(train.patience_epochs)},
      {"checkpoint_every", size(train.checkpoint_every)},
      {"eval_k", size(train.eval_k)},
      {"seed", [&](const std::string& v) { train.seed = parse_integer<std::uint64_t>(key, v); }},
      {"grad_clip", real(train.grad_clip)},
      {"workers", size(train.workers)},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  it->second(value);
}

void apply_synth_setting(SynthConfig& synth, const std::string& key, const std::string& value) {
  const auto size = [&](std::size_t& field) {
    return [&field, &key](const std::string& v) { field = parse_integer<std::size_t>(key, v); };
  };
  const std::map<std::string, Setter> setters{
      {"num_users", size(synth.num_users)},
      {"num_items", size(synth.num_items)},
      {"k_true", size(synth.k_true)},
      {"interactions_per_user", size(synth.interactions_per_user)},
      {"text_dim", size(synth.text_dim)},
      {"visual_dim", size(synth.visual_dim)},
      {"factor_dim", size(synth.factor_dim)},
      {"noise_std", [&](const std::string& v) { synth.noise_std = parse_real(key, v); }},
      {"preference_concentration", [&](const std::string& v) { synth.preference_concentration = parse_real(key, v); }},
      {"seed", [&](const std::string& v) { synth.seed = parse_integer<std::uint64_t>(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) {
    throw ConfigError("unknown synthetic config key '" + key + "'");
  }
  it->second(value);
}

std::string format_training_config(const ModelConfig& model, const TrainConfig& train) {
  std::ostringstream out;
  out << "embed_dim = " << model.embed_dim << '\n'
      << "num_factors = " << model.num_factors << '\n'
      << "text_input_dim = " << model.text_input_dim << '\n'
      << "visual_input_dim = " << model.visual_input_dim << '\n'
      << "text_hidden = " << model.text_hidden << '\n'
      << "visual_hidden = " << model.visual_hidden << '\n'
      << "attention_hidden = " << model.attention_hidden << '\n'
      << "lambda_theta = " << format_real(model.lambda_theta) << '\n'
      << "lambda_d = " << format_real(model.lambda_d) << '\n'
      << "use_text = " << (model.use_text ? "true" : "false") << '\n'
      << "use_visual = " << (model.use_visual ? "true" : "false") << '\n'
      << "attention_mode = " << to_string(model.attention_mode) << '\n'
      << "batch_size = " << train.batch_size << '\n'
      << "learning_rate = " << format_real(train.learning_rate) << '\n'
      << "n_candidates = " << train.n_candidates << '\n'
      << "max_epochs = " << train.max_epochs << '\n'
      << "patience_epochs = " << train.patience_epochs << '\n'
      << "checkpoint_every = " << train.checkpoint_every << '\n'
      << "eval_k = " << train.eval_k << '\n'
      << "seed = " << train.seed << '\n'
      << "grad_clip = " << format_real(train.grad_clip) << '\n'
      << "workers = " << train.workers << '\n';
  return out.str();
}

} // namespace dmrl
