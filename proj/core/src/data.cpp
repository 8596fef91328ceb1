#include "dmrl/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "binary_io.hpp"
#include "dmrl/error.hpp"

namespace dmrl {

namespace {

constexpr std::array<char, 8> kFeatureMagic{'D', 'M', 'R', 'L', 'F', 'T', '0', '1'};

std::ifstream open_input(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return in;
}

std::ofstream open_output(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') {
    line.pop_back();
  }
}

bool skippable(const std::string& line) {
  return line.empty() || line.front() == '#';
}

// Splits on tabs; the returned views alias `line`.
std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::size_t floor_fraction(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

std::size_t round_fraction(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
}

} // namespace

Index IdMap::insert(std::string_view key) {
  std::string owned(key);
  if (auto it = index_.find(owned); it != index_.end()) {
    return it->second;
  }
  const auto idx = static_cast<Index>(keys_.size());
  keys_.push_back(owned);
  index_.emplace(std::move(owned), idx);
  return idx;
}

std::optional<Index> IdMap::find(std::string_view key) const {
  if (auto it = index_.find(std::string(key)); it != index_.end()) {
    return it->second;
  }
  return std::nullopt;
}

Index IdMap::at(std::string_view key) const {
  if (auto idx = find(key)) {
    return *idx;
  }
  throw InvalidInput("unknown key: " + std::string(key));
}

InteractionLog filter_interactions(std::vector<std::pair<std::string, std::string>> raw,
                                   std::size_t min_interactions) {
  InteractionLog log;

  // Dedupe on temporary ids, keeping first appearance.
  IdMap users;
  IdMap items;
  std::vector<std::pair<Index, Index>> pairs;
  std::set<std::pair<Index, Index>> seen;
  for (auto& [u, i] : raw) {
    const auto pair = std::make_pair(users.insert(u), items.insert(i));
    if (seen.insert(pair).second) {
      pairs.push_back(pair);
    } else {
      ++log.duplicate_count;
    }
  }

  // k-core filtering to a fixpoint.
  while (true) {
    std::vector<std::size_t> user_count(users.size(), 0);
    std::vector<std::size_t> item_count(items.size(), 0);
    for (auto [u, i] : pairs) {
      ++user_count[u];
      ++item_count[i];
    }
    const auto before = pairs.size();
    std::erase_if(pairs, [&](const auto& p) {
      return user_count[p.first] < min_interactions || item_count[p.second] < min_interactions;
    });
    if (pairs.size() == before) {
      break;
    }
  }
  if (pairs.empty()) {
    throw InvalidInput("no interactions survive filtering with min_interactions = " +
                       std::to_string(min_interactions));
  }

  log.pairs.reserve(pairs.size());
  for (auto [u, i] : pairs) {
    log.pairs.emplace_back(log.users.insert(users.key(u)), log.items.insert(items.key(i)));
  }
  return log;
}

InteractionLog parse_interactions(const std::filesystem::path& path, std::size_t min_interactions) {
  auto in = open_input(path);
  std::vector<std::pair<std::string, std::string>> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (skippable(line)) {
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() < 2 || fields[0].empty() || fields[1].empty()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected user_key<TAB>item_key");
    }
    raw.emplace_back(std::string(fields[0]), std::string(fields[1]));
  }
  return filter_interactions(std::move(raw), min_interactions);
}

std::size_t InteractionDataset::num_train() const noexcept {
  std::size_t total = 0;
  for (const auto& items : train) {
    total += items.size();
  }
  return total;
}

bool InteractionDataset::is_known(Index user, Index item) const {
  const auto& k = known[user];
  return std::binary_search(k.begin(), k.end(), item);
}

void InteractionDataset::rebuild_known() {
  known.assign(num_users(), {});
  for (std::size_t u = 0; u < num_users(); ++u) {
    auto& k = known[u];
    k.reserve(train[u].size() + validation[u].size());
    std::merge(train[u].begin(), train[u].end(), validation[u].begin(), validation[u].end(),
               std::back_inserter(k));
  }
}

InteractionDataset split_dataset(const InteractionLog& log, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.test < 0.0 || ratios.test >= 1.0 || ratios.validation < 0.0 || ratios.validation >= 1.0) {
    throw InvalidInput("split_dataset: ratios must lie in [0, 1)");
  }
  InteractionDataset ds;
  ds.users = log.users;
  ds.items = log.items;
  ds.seed = seed;
  const std::size_t n_users = log.users.size();

  std::vector<std::vector<Index>> per_user(n_users);
  for (auto [u, i] : log.pairs) {
    per_user[u].push_back(i);
  }
  ds.train.assign(n_users, {});
  ds.validation.assign(n_users, {});
  ds.test.assign(n_users, {});

  std::mt19937_64 rng(seed);
  for (std::size_t u = 0; u < n_users; ++u) {
    auto items = per_user[u];
    std::sort(items.begin(), items.end());
    std::shuffle(items.begin(), items.end(), rng);
    const std::size_t n = items.size();
    if (n == 1) {
      ++ds.single_interaction_users;
    }
    const std::size_t n_test = floor_fraction(ratios.test, n);
    const std::size_t pool = n - n_test;
    std::size_t n_val = round_fraction(ratios.validation, pool);
    if (n_val >= pool) {
      n_val = pool - 1;
    }
    ds.test[u].assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_test));
    ds.validation[u].assign(items.begin() + static_cast<std::ptrdiff_t>(n_test),
                            items.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    ds.train[u].assign(items.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), items.end());
    std::sort(ds.test[u].begin(), ds.test[u].end());
    std::sort(ds.validation[u].begin(), ds.validation[u].end());
    std::sort(ds.train[u].begin(), ds.train[u].end());
  }
  ds.rebuild_known();
  return ds;
}

void write_split_manifest(const InteractionDataset& dataset, const std::filesystem::path& path) {
  auto out = open_output(path);
  const auto emit = [&](std::size_t u, const std::vector<Index>& items, const char* label) {
    for (Index i : items) {
      out << dataset.users.key(static_cast<Index>(u)) << '\t' << dataset.items.key(i) << '\t' << label
          << '\n';
    }
  };
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    emit(u, dataset.train[u], "train");
    emit(u, dataset.validation[u], "val");
    emit(u, dataset.test[u], "test");
  }
  if (!out) {
    throw IoError("failed writing " + path.string());
  }
}

void write_dataset(const InteractionDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto write_keys = [](const std::filesystem::path& path, const IdMap& ids) {
    auto out = open_output(path);
    for (const auto& key : ids.keys()) {
      out << key << '\n';
    }
    if (!out) {
      throw IoError("failed writing " + path.string());
    }
  };
  write_keys(dir / "users.tsv", dataset.users);
  write_keys(dir / "items.tsv", dataset.items);
  write_split_manifest(dataset, dir / "split.tsv");
}

InteractionDataset read_dataset(const std::filesystem::path& dir) {
  InteractionDataset ds;
  const auto read_keys = [](const std::filesystem::path& path, IdMap& ids) {
    if (!std::filesystem::exists(path)) {
      return;
    }
    auto in = open_input(path);
    std::string line;
    while (std::getline(in, line)) {
      strip_cr(line);
      if (!line.empty()) {
        ids.insert(line);
      }
    }
  };
  read_keys(dir / "users.tsv", ds.users);
  read_keys(dir / "items.tsv", ds.items);

  const auto manifest = dir / "split.tsv";
  auto in = open_input(manifest);
  struct Row {
    Index user;
    Index item;
    Split split;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (skippable(line)) {
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) +
                        ": expected user<TAB>item<TAB>split");
    }
    Split split;
    if (fields[2] == "train") {
      split = Split::train;
    } else if (fields[2] == "val") {
      split = Split::validation;
    } else if (fields[2] == "test") {
      split = Split::test;
    } else {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": unknown split label '" +
                        std::string(fields[2]) + "'");
    }
    rows.push_back({ds.users.insert(fields[0]), ds.items.insert(fields[1]), split});
  }
  if (rows.empty()) {
    throw FormatError(manifest.string() + ": empty manifest");
  }
  ds.train.assign(ds.num_users(), {});
  ds.validation.assign(ds.num_users(), {});
  ds.test.assign(ds.num_users(), {});
  for (const auto& r : rows) {
    auto& target = r.split == Split::train ? ds.train : r.split == Split::validation ? ds.validation : ds.test;
    target[r.user].push_back(r.item);
  }
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    for (auto* v : {&ds.train[u], &ds.validation[u], &ds.test[u]}) {
      std::sort(v->begin(), v->end());
      if (std::adjacent_find(v->begin(), v->end()) != v->end()) {
        throw FormatError(manifest.string() + ": duplicate interaction for user " +
                          ds.users.key(static_cast<Index>(u)));
      }
    }
  }
  ds.rebuild_known();
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto& k = ds.known[u];
    if (std::adjacent_find(k.begin(), k.end()) != k.end()) {
      throw FormatError(manifest.string() + ": item in both train and val for user " +
                        ds.users.key(static_cast<Index>(u)));
    }
    for (Index i : ds.test[u]) {
      if (std::binary_search(k.begin(), k.end(), i)) {
        throw FormatError(manifest.string() + ": test item overlaps train/val for user " +
                          ds.users.key(static_cast<Index>(u)));
      }
    }
  }
  return ds;
}

namespace {

FeatureTable load_text_features(const std::filesystem::path& path, FeatureModality modality, const IdMap& items) {
  auto in = open_input(path);
  FeatureTable table;
  table.modality = modality;
  std::vector<char> filled(items.size(), 0);
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (skippable(line)) {
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected item_key<TAB>v1,v2,...");
    }
    const std::string_view key(line.data(), tab);
    values.clear();
    const char* p = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || !std::isfinite(v)) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad number for item '" +
                          std::string(key) + "'");
      }
      values.push_back(v);
      p = next;
      if (p < end) {
        if (*p != ',') {
          throw FormatError(path.string() + ":" + std::to_string(line_no) +
                            ": expected ',' between values for item '" + std::string(key) + "'");
        }
        ++p;
      }
    }
    if (table.dim == 0) {
      if (values.empty()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": empty feature vector");
      }
      table.dim = values.size();
      table.vectors = Tensor(items.size(), table.dim);
    } else if (values.size() != table.dim) {
      throw FormatError(path.string() + ": item '" + std::string(key) + "' has " +
                        std::to_string(values.size()) + " values, expected " + std::to_string(table.dim));
    }
    const auto idx = items.find(key);
    if (!idx) {
      ++table.unknown_count;
      continue;
    }
    if (filled[*idx]) {
      throw FormatError(path.string() + ": duplicate item '" + std::string(key) + "'");
    }
    filled[*idx] = 1;
    std::copy(values.begin(), values.end(), table.vectors.row(*idx).begin());
  }
  if (table.dim == 0) {
    throw FormatError(path.string() + ": no feature rows");
  }
  table.missing_count = static_cast<std::size_t>(std::count(filled.begin(), filled.end(), 0));
  return table;
}

FeatureTable load_binary_features(const std::filesystem::path& path, FeatureModality modality, const IdMap& items) {
  auto in = open_input(path, std::ios::binary);
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  const auto count = binary::read<std::uint32_t>(in, "feature file");
  const auto dim = binary::read<std::uint32_t>(in, "feature file");
  if (dim == 0) {
    throw FormatError(path.string() + ": zero feature dimension");
  }
  FeatureTable table;
  table.modality = modality;
  table.dim = dim;
  table.vectors = Tensor(items.size(), dim);
  std::vector<char> filled(items.size(), 0);
  std::vector<float> buffer(dim);
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto key = binary::read_string16(in, "feature file");
    in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(dim * sizeof(float))) {
      throw FormatError(path.string() + ": truncated vector for item '" + key + "'");
    }
    const auto idx = items.find(key);
    if (!idx) {
      ++table.unknown_count;
      continue;
    }
    if (filled[*idx]) {
      throw FormatError(path.string() + ": duplicate item '" + key + "'");
    }
    filled[*idx] = 1;
    auto row = table.vectors.row(*idx);
    for (std::size_t c = 0; c < dim; ++c) {
      if (!std::isfinite(buffer[c])) {
        throw FormatError(path.string() + ": non-finite value for item '" + key + "'");
      }
      row[c] = buffer[c];
    }
  }
  table.missing_count = static_cast<std::size_t>(std::count(filled.begin(), filled.end(), 0));
  return table;
}

} // namespace

FeatureTable load_feature_table(const std::filesystem::path& path, FeatureModality modality, const IdMap& items) {
  std::array<char, 8> head{};
  {
    auto probe = open_input(path, std::ios::binary);
    probe.read(head.data(), head.size());
  }
  if (head == kFeatureMagic) {
    return load_binary_features(path, modality, items);
  }
  return load_text_features(path, modality, items);
}

void write_feature_table_text(const std::filesystem::path& path,
                              std::span<const std::string> keys,
                              const Tensor& vectors) {
  if (keys.size() != vectors.rows()) {
    throw InvalidInput("write_feature_table_text: key count does not match row count");
  }
  auto out = open_output(path);
  std::array<char, 64> buf{};
  std::string line;
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    line.assign(keys[r]);
    line.push_back('\t');
    const auto row = vectors.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) {
        line.push_back(',');
      }
      // Stored at f32 precision, the same as the binary variant.
      auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), static_cast<float>(row[c]));
      line.append(buf.data(), end);
    }
    line.push_back('\n');
    out << line;
  }
  if (!out) {
    throw IoError("failed writing " + path.string());
  }
}

void write_feature_table_binary(const std::filesystem::path& path,
                                std::span<const std::string> keys,
                                const Tensor& vectors) {
  if (keys.size() != vectors.rows()) {
    throw InvalidInput("write_feature_table_binary: key count does not match row count");
  }
  auto out = open_output(path, std::ios::binary);
  out.write(kFeatureMagic.data(), kFeatureMagic.size());
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(vectors.rows()));
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(vectors.cols()));
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    binary::write_string16(out, keys[r]);
    for (double v : vectors.row(r)) {
      binary::write<float>(out, static_cast<float>(v));
    }
  }
  if (!out) {
    throw IoError("failed writing " + path.string());
  }
}

std::vector<Index> sample_negative_candidates(const InteractionDataset& dataset,
                                              Index user,
                                              std::size_t n,
                                              std::mt19937_64& rng) {
  if (user >= dataset.num_users()) {
    throw InvalidInput("sample_negative_candidates: user index out of range");
  }
  const auto& known = dataset.known[user];
  const std::size_t n_items = dataset.num_items();
  const std::size_t eligible = n_items - known.size();

  if (eligible <= n || eligible * 4 < n_items) {
    // Dense case: enumerate the complement and take a random prefix.
    std::vector<Index> pool;
    pool.reserve(eligible);
    auto it = known.begin();
    for (Index i = 0; i < n_items; ++i) {
      if (it != known.end() && *it == i) {
        ++it;
        continue;
      }
      pool.push_back(i);
    }
    if (pool.size() <= n) {
      return pool;
    }
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
    }
    pool.resize(n);
    return pool;
  }

  std::vector<Index> out;
  out.reserve(n);
  std::uniform_int_distribution<Index> pick(0, static_cast<Index>(n_items - 1));
  while (out.size() < n) {
    const Index candidate = pick(rng);
    if (std::binary_search(known.begin(), known.end(), candidate)) {
      continue;
    }
    if (std::find(out.begin(), out.end(), candidate) != out.end()) {
      continue;
    }
    out.push_back(candidate);
  }
  return out;
}

} // namespace dmrl
