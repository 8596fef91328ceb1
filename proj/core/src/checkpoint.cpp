#include "dmrl/checkpoint.hpp"

#include <array>
#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "dmrl/error.hpp"

namespace dmrl {

namespace {

constexpr std::array<char, 8> kMagic{'D', 'M', 'R', 'L', 'C', 'K', '0', '1'};
constexpr const char* kContext = "checkpoint";

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  binary::write_string16(out, name);
  binary::write<std::uint32_t>(out, 2);
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
  for (double v : t.values()) {
    binary::write<float>(out, static_cast<float>(v));
  }
}

std::pair<std::string, Tensor> read_tensor(std::istream& in) {
  auto name = binary::read_string16(in, kContext);
  const auto rank = binary::read<std::uint32_t>(in, kContext);
  if (rank != 2) {
    throw FormatError("checkpoint: tensor '" + name + "' has unsupported rank " + std::to_string(rank));
  }
  const auto rows = binary::read<std::uint32_t>(in, kContext);
  const auto cols = binary::read<std::uint32_t>(in, kContext);
  std::vector<float> buffer(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(buffer.size() * sizeof(float))) {
    throw FormatError("checkpoint: truncated data for tensor '" + name + "'");
  }
  Tensor t(rows, cols);
  auto values = t.values();
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    values[i] = buffer[i];
  }
  return {std::move(name), std::move(t)};
}

void write_config(std::ostream& out, const ModelConfig& c) {
  for (std::size_t v : {c.embed_dim, c.num_factors, c.text_input_dim, c.visual_input_dim, c.text_hidden,
                        c.visual_hidden, c.attention_hidden}) {
    binary::write<std::uint64_t>(out, v);
  }
  binary::write<double>(out, c.lambda_theta);
  binary::write<double>(out, c.lambda_d);
  binary::write<std::uint8_t>(out, c.use_text ? 1 : 0);
  binary::write<std::uint8_t>(out, c.use_visual ? 1 : 0);
  binary::write<std::uint8_t>(out, static_cast<std::uint8_t>(c.attention_mode));
}

ModelConfig read_config(std::istream& in) {
  ModelConfig c;
  for (std::size_t* field : {&c.embed_dim, &c.num_factors, &c.text_input_dim, &c.visual_input_dim, &c.text_hidden,
                             &c.visual_hidden, &c.attention_hidden}) {
    *field = binary::read<std::uint64_t>(in, kContext);
  }
  c.lambda_theta = binary::read<double>(in, kContext);
  c.lambda_d = binary::read<double>(in, kContext);
  c.use_text = binary::read<std::uint8_t>(in, kContext) != 0;
  c.use_visual = binary::read<std::uint8_t>(in, kContext) != 0;
  const auto mode = binary::read<std::uint8_t>(in, kContext);
  if (mode > static_cast<std::uint8_t>(AttentionMode::no_user)) {
    throw FormatError("checkpoint: unknown attention mode " + std::to_string(mode));
  }
  c.attention_mode = static_cast<AttentionMode>(mode);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: stored config is invalid: ") + e.what());
  }
  return c;
}

std::string describe_mismatch(const ModelConfig& stored, const ModelConfig& expected) {
  std::string out;
  const auto field = [&](const char* name, auto a, auto b) {
    if (a != b) {
      out += std::string(out.empty() ? "" : ", ") + name + " " + std::to_string(a) + " vs " + std::to_string(b);
    }
  };
  field("embed_dim", stored.embed_dim, expected.embed_dim);
  field("num_factors", stored.num_factors, expected.num_factors);
  field("text_input_dim", stored.text_input_dim, expected.text_input_dim);
  field("visual_input_dim", stored.visual_input_dim, expected.visual_input_dim);
  field("text_hidden", stored.text_hidden, expected.text_hidden);
  field("visual_hidden", stored.visual_hidden, expected.visual_hidden);
  field("attention_hidden", stored.attention_hidden, expected.attention_hidden);
  field("lambda_theta", stored.lambda_theta, expected.lambda_theta);
  field("lambda_d", stored.lambda_d, expected.lambda_d);
  field("use_text", stored.use_text, expected.use_text);
  field("use_visual", stored.use_visual, expected.use_visual);
  if (stored.attention_mode != expected.attention_mode) {
    out += std::string(out.empty() ? "" : ", ") + "attention_mode " + to_string(stored.attention_mode) + " vs " +
           to_string(expected.attention_mode);
  }
  return out;
}

void write_keys(std::ostream& out, const std::vector<std::string>& keys) {
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(keys.size()));
  for (const auto& k : keys) {
    binary::write_string16(out, k);
  }
}

std::vector<std::string> read_keys(std::istream& in) {
  const auto n = binary::read<std::uint32_t>(in, kContext);
  std::vector<std::string> keys;
  keys.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    keys.push_back(binary::read_string16(in, kContext));
  }
  return keys;
}

} // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto tensors = ck.params.named_tensors();
  if (ck.state.adam.size() != tensors.size()) {
    throw InvalidInput("save_checkpoint: optimizer state does not match the parameters");
  }
  if (!path.parent_path().empty()) {
    std::filesystem::create_directories(path.parent_path());
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write " + tmp.string());
    }
    out.write(kMagic.data(), kMagic.size());
    write_config(out, ck.config);

    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      write_tensor(out, name, *t);
    }
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(2 * tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      write_tensor(out, tensors[i].first + ".m", ck.state.adam[i].first_moment);
      write_tensor(out, tensors[i].first + ".v", ck.state.adam[i].second_moment);
    }
    binary::write<std::uint64_t>(out, ck.state.step_count());

    binary::write<std::uint64_t>(out, ck.state.epoch);
    binary::write<double>(out, ck.state.best_val_recall);
    binary::write<std::uint64_t>(out, ck.state.best_epoch);
    binary::write<std::uint64_t>(out, ck.state.epochs_since_best);

    write_keys(out, ck.user_keys);
    write_keys(out, ck.item_keys);

    std::vector<std::pair<std::string, const Tensor*>> derived;
    if (!ck.refined_text.empty()) {
      derived.emplace_back("refined.text", &ck.refined_text);
    }
    if (!ck.refined_visual.empty()) {
      derived.emplace_back("refined.visual", &ck.refined_visual);
    }
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(derived.size()));
    for (const auto& [name, t] : derived) {
      write_tensor(out, name, *t);
    }
    out.flush();
    if (!out) {
      throw IoError("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open checkpoint " + path.string());
  }
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kMagic) {
    throw FormatError(path.string() + ": not a DMRL checkpoint (bad magic or version)");
  }
  Checkpoint ck;
  ck.config = read_config(in);
  if (expected && !(*expected == ck.config)) {
    throw ConfigError("checkpoint config mismatch: " + describe_mismatch(ck.config, *expected));
  }

  std::map<std::string, Tensor> stored;
  const auto n_tensors = binary::read<std::uint32_t>(in, kContext);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto [name, t] = read_tensor(in);
    stored.emplace(std::move(name), std::move(t));
  }
  const auto users_it = stored.find("user_table");
  const auto items_it = stored.find("item_table");
  if (users_it == stored.end() || items_it == stored.end()) {
    throw FormatError(path.string() + ": missing embedding tables");
  }
  // Shapes implied by the config; every stored tensor must match one of them.
  ck.params = ModelParams::initialize(ck.config, users_it->second.rows(), items_it->second.rows(), 0);
  auto slots = ck.params.named_tensors();
  if (slots.size() != stored.size()) {
    throw FormatError(path.string() + ": tensor set does not match the stored config");
  }
  for (auto& [name, slot] : slots) {
    auto it = stored.find(name);
    if (it == stored.end() || !it->second.same_shape(*slot)) {
      throw FormatError(path.string() + ": tensor '" + name + "' missing or mis-shaped");
    }
    *slot = std::move(it->second);
  }

  const auto n_adam = binary::read<std::uint32_t>(in, kContext);
  if (n_adam != 2 * slots.size()) {
    throw FormatError(path.string() + ": optimizer state does not match the parameters");
  }
  ck.state = TrainState::fresh(ck.params, 0.0);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto [m_name, m] = read_tensor(in);
    auto [v_name, v] = read_tensor(in);
    if (m_name != slots[i].first + ".m" || v_name != slots[i].first + ".v" || !m.same_shape(*slots[i].second) ||
        !v.same_shape(*slots[i].second)) {
      throw FormatError(path.string() + ": optimizer tensor for '" + slots[i].first + "' missing or mis-shaped");
    }
    ck.state.adam[i].first_moment = std::move(m);
    ck.state.adam[i].second_moment = std::move(v);
  }
  const auto step_count = binary::read<std::uint64_t>(in, kContext);
  for (auto& a : ck.state.adam) {
    a.step_count = step_count;
  }
  ck.state.epoch = binary::read<std::uint64_t>(in, kContext);
  ck.state.best_val_recall = binary::read<double>(in, kContext);
  ck.state.best_epoch = binary::read<std::uint64_t>(in, kContext);
  ck.state.epochs_since_best = binary::read<std::uint64_t>(in, kContext);

  ck.user_keys = read_keys(in);
  ck.item_keys = read_keys(in);
  if (ck.user_keys.size() != ck.params.num_users() || ck.item_keys.size() != ck.params.num_items()) {
    throw FormatError(path.string() + ": key tables do not match the embedding tables");
  }

  const auto n_derived = binary::read<std::uint32_t>(in, kContext);
  for (std::uint32_t i = 0; i < n_derived; ++i) {
    auto [name, t] = read_tensor(in);
    if (t.rows() != ck.params.num_items() || t.cols() != ck.config.embed_dim) {
      throw FormatError(path.string() + ": derived tensor '" + name + "' mis-shaped");
    }
    if (name == "refined.text") {
      ck.refined_text = std::move(t);
    } else if (name == "refined.visual") {
      ck.refined_visual = std::move(t);
    } else {
      throw FormatError(path.string() + ": unknown derived tensor '" + name + "'");
    }
  }
  return ck;
}

} // namespace dmrl
