// Copyright 2026 The dorlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Feature storage: the embedding interchange format (JSON manifest plus a
// little-endian float32 payload), synthetic few-shot datasets and the
// base/new class split.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "dorlab/common.hpp"

namespace dorlab {

// Errors raised while reading the interchange format. Each failure mode has
// its own type so callers (and tests) can tell them apart.
class LoadError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class MissingFileError : public LoadError {
 public:
  using LoadError::LoadError;
};
class ChecksumMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};
class DimensionMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};
class NonFiniteValueError : public LoadError {
 public:
  using LoadError::LoadError;
};
class FormatError : public LoadError {
 public:
  using LoadError::LoadError;
};

inline constexpr double kUnitNormTolerance = 1e-6;

// A dense row-major matrix of float32 features with one string id per row.
// Immutable after construction.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;

  EmbeddingSet(std::size_t dim, std::vector<std::string> ids, std::vector<float> data,
               bool normalized)
      : dim_(dim), ids_(std::move(ids)), data_(std::move(data)), normalized_(normalized) {
    require(dim_ > 0, "embedding dim must be positive");
    if (data_.size() != dim_ * ids_.size()) {
      throw DimensionMismatchError("embedding payload holds " + std::to_string(data_.size()) +
                                   " values, expected " + std::to_string(dim_) + " x " +
                                   std::to_string(ids_.size()));
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw NonFiniteValueError("embedding contains a non-finite value");
    }
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) {
        throw ValidationError("duplicate embedding id '" + ids_[i] + "'");
      }
    }
    if (normalized_) {
      for (std::size_t i = 0; i < size(); ++i) {
        const double n = norm2(row(i));
        if (std::abs(n - 1.0) > kUnitNormTolerance) {
          throw ValidationError("embedding '" + ids_[i] + "' is flagged normalized but has norm " +
                                std::to_string(n));
        }
      }
    }
  }

  // Builds a unit-normalized set from arbitrary rows. Zero rows are an error.
  static EmbeddingSet from_rows(std::size_t dim, std::vector<std::string> ids,
                                const std::vector<std::vector<double>>& rows) {
    std::vector<float> data;
    data.reserve(dim * rows.size());
    for (const auto& r : rows) {
      require(r.size() == dim, "row has wrong dimension");
      const double n = norm2(std::span<const double>(r));
      if (n == 0.0 || !std::isfinite(n)) throw NumericalError("cannot normalize a zero or non-finite row");
      for (double v : r) data.push_back(static_cast<float>(v / n));
    }
    return EmbeddingSet(dim, std::move(ids), std::move(data), true);
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  bool normalized() const { return normalized_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  std::span<const float> data() const { return data_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

  std::vector<double> row_f64(std::size_t i) const {
    auto r = row(i);
    return {r.begin(), r.end()};
  }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Rows selected by index, in the given order.
  EmbeddingSet subset(std::span<const std::size_t> indices) const {
    std::vector<std::string> ids;
    std::vector<float> data;
    ids.reserve(indices.size());
    data.reserve(indices.size() * dim_);
    for (std::size_t i : indices) {
      ids.push_back(ids_.at(i));
      auto r = row(i);
      data.insert(data.end(), r.begin(), r.end());
    }
    return EmbeddingSet(dim_, std::move(ids), std::move(data), normalized_);
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> data_;
  bool normalized_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

// Features plus one class label per item. labels[i] indexes classes.
struct LabeledDataset {
  EmbeddingSet features;
  std::vector<int> labels;
  std::vector<std::string> classes;

  void validate() const {
    require(labels.size() == features.size(), "one label per item required");
    for (int l : labels) {
      require(l >= 0 && static_cast<std::size_t>(l) < classes.size(), "label indexes no class");
    }
  }

  std::size_t num_classes() const { return classes.size(); }

  int label_of(const std::string& id) const {
    auto i = features.index_of(id);
    if (!i) throw ValidationError("no item '" + id + "'");
    return labels[*i];
  }

  // Items whose label is in `keep`, in original order.
  std::vector<std::size_t> items_in(std::span<const int> keep) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (std::find(keep.begin(), keep.end(), labels[i]) != keep.end()) out.push_back(i);
    }
    return out;
  }
};

// Disjoint partition of class ids. Both lists are sorted ascending.
struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;
  std::uint64_t seed = 0;
};

struct SyntheticSpec {
  int num_classes = 10;
  int dim = 16;
  int shots_per_class = 16;
  // Pairwise prototype cosine is kept at or below 1 - prototype_separation.
  double prototype_separation = 0.0;
  double noise_std = 0.1;
  std::uint64_t seed = 1;
};

// ---------------------------------------------------------------------------
// Interchange format

namespace detail {

inline std::string sha256_hex(std::span<const unsigned char> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

inline std::vector<unsigned char> encode_f32le(std::span<const float> values) {
  std::vector<unsigned char> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

inline std::vector<float> decode_f32le(std::span<const unsigned char> bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingFileError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Accepts "<name>", "<name>.manifest.json" or "<name>.f32" and returns
// the (manifest, payload) pair.
inline std::pair<std::filesystem::path, std::filesystem::path> resolve_paths(
    const std::filesystem::path& path) {
  std::string s = path.string();
  const std::string manifest_suffix = ".manifest.json";
  if (s.ends_with(manifest_suffix)) {
    s.resize(s.size() - manifest_suffix.size());
  } else if (s.ends_with(".f32")) {
    s.resize(s.size() - 4);
  }
  return {s + manifest_suffix, s + ".f32"};
}

}  // namespace detail

struct LoadedEmbeddings {
  EmbeddingSet set;
  // id -> class name, when the manifest carries labels.
  std::map<std::string, std::string> labels;
  std::vector<std::string> classes;
};

// Reads a manifest + payload pair. Rows are unit-normalized on load unless
// the manifest declares them already normalized ("normalized": true, checked)
// or asks for raw storage ("raw": true).
inline LoadedEmbeddings load_embeddings(const std::filesystem::path& path) {
  const auto [manifest_path, payload_path] = detail::resolve_paths(path);
  if (!std::filesystem::exists(manifest_path)) {
    throw MissingFileError("missing manifest '" + manifest_path.string() + "'");
  }
  if (!std::filesystem::exists(payload_path)) {
    throw MissingFileError("missing payload '" + payload_path.string() + "'");
  }
  nlohmann::json m;
  try {
    std::ifstream in(manifest_path);
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest '" + manifest_path.string() + "': " + e.what());
  }
  std::size_t dim = 0, count = 0;
  std::string sha;
  std::vector<std::string> ids;
  try {
    dim = m.at("dim").get<std::size_t>();
    count = m.at("count").get<std::size_t>();
    sha = m.at("sha256").get<std::string>();
    ids = m.at("ids").get<std::vector<std::string>>();
    if (m.value("dtype", "f32le") != "f32le") throw FormatError("unsupported dtype");
    if (m.value("order", "row-major") != "row-major") throw FormatError("unsupported order");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + manifest_path.string() + "' lacks a field: " + e.what());
  }
  if (dim == 0) throw FormatError("manifest declares dim 0");
  if (ids.size() != count) {
    throw DimensionMismatchError("manifest lists " + std::to_string(ids.size()) + " ids for count " +
                                 std::to_string(count));
  }
  const auto bytes = detail::read_bytes(payload_path);
  if (bytes.size() != dim * count * 4) {
    throw DimensionMismatchError("payload has " + std::to_string(bytes.size() / 4.0) +
                                 " float32 values, manifest declares " + std::to_string(count) +
                                 " x " + std::to_string(dim));
  }
  if (detail::sha256_hex(bytes) != sha) {
    throw ChecksumMismatchError("payload checksum does not match manifest for '" +
                                payload_path.string() + "'");
  }
  auto values = detail::decode_f32le(bytes);
  for (float v : values) {
    if (!std::isfinite(v)) throw NonFiniteValueError("payload contains a non-finite value");
  }

  const bool declared_normalized = m.value("normalized", false);
  const bool raw = m.value("raw", false);
  if (!declared_normalized && !raw) {
    for (std::size_t i = 0; i < count; ++i) {
      std::span<float> r(values.data() + i * dim, dim);
      const double n = norm2(std::span<const float>(r));
      if (n == 0.0) throw NumericalError("cannot normalize zero vector '" + ids[i] + "'");
      for (float& v : r) v = static_cast<float>(v / n);
    }
  }

  LoadedEmbeddings out{EmbeddingSet(dim, std::move(ids), std::move(values), !raw), {}, {}};
  if (m.contains("labels")) {
    out.labels = m["labels"].get<std::map<std::string, std::string>>();
    if (m.contains("classes")) {
      out.classes = m["classes"].get<std::vector<std::string>>();
    } else {
      for (const auto& [id, name] : out.labels) {
        if (std::find(out.classes.begin(), out.classes.end(), name) == out.classes.end()) {
          out.classes.push_back(name);
        }
      }
      std::sort(out.classes.begin(), out.classes.end());
    }
  }
  return out;
}

inline EmbeddingSet load_embedding_set(const std::filesystem::path& path) {
  return load_embeddings(path).set;
}

inline LabeledDataset load_labeled_dataset(const std::filesystem::path& path) {
  auto loaded = load_embeddings(path);
  if (loaded.labels.empty()) throw FormatError("manifest carries no labels");
  LabeledDataset ds{std::move(loaded.set), {}, std::move(loaded.classes)};
  ds.labels.reserve(ds.features.size());
  for (const auto& id : ds.features.ids()) {
    auto it = loaded.labels.find(id);
    if (it == loaded.labels.end()) throw FormatError("item '" + id + "' has no label");
    auto c = std::find(ds.classes.begin(), ds.classes.end(), it->second);
    if (c == ds.classes.end()) throw FormatError("label '" + it->second + "' is not a listed class");
    ds.labels.push_back(static_cast<int>(c - ds.classes.begin()));
  }
  return ds;
}

// Writes `<prefix>.manifest.json` and `<prefix>.f32`.
inline void save_embedding_set(const EmbeddingSet& set, const std::filesystem::path& prefix,
                               const LabeledDataset* labels = nullptr) {
  const auto [manifest_path, payload_path] = detail::resolve_paths(prefix);
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  const auto bytes = detail::encode_f32le(set.data());
  {
    std::ofstream out(payload_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + payload_path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json m;
  m["dim"] = set.dim();
  m["count"] = set.size();
  m["dtype"] = "f32le";
  m["order"] = "row-major";
  m["sha256"] = detail::sha256_hex(bytes);
  m["ids"] = set.ids();
  m["normalized"] = set.normalized();
  m["raw"] = !set.normalized();
  if (labels != nullptr) {
    nlohmann::json l = nlohmann::json::object();
    for (std::size_t i = 0; i < set.size(); ++i) l[set.id(i)] = labels->classes.at(labels->labels.at(i));
    m["labels"] = l;
    m["classes"] = labels->classes;
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + manifest_path.string() + "'");
  out << m.dump(2) << '\n';
}

inline void save_labeled_dataset(const LabeledDataset& ds, const std::filesystem::path& prefix) {
  save_embedding_set(ds.features, prefix, &ds);
}

// ---------------------------------------------------------------------------
// Synthetic data

inline std::string synthetic_class_name(int c, int num_classes) {
  const int width = std::max(2, static_cast<int>(std::to_string(num_classes - 1).size()));
  std::ostringstream os;
  os << "class_" << std::setw(width) << std::setfill('0') << c;
  return os.str();
}

// Unit prototypes on the sphere, rejection-sampled so that every pairwise
// cosine is at most 1 - prototype_separation.
inline EmbeddingSet synthetic_prototypes(const SyntheticSpec& spec) {
  require(spec.num_classes >= 2, "synthetic spec needs at least 2 classes");
  require(spec.dim >= 2, "synthetic spec needs dim >= 2");
  require(spec.prototype_separation >= 0.0 && spec.noise_std >= 0.0,
          "separation and noise must be non-negative");
  const auto dim = static_cast<std::size_t>(spec.dim);
  const double max_cos = 1.0 - spec.prototype_separation;
  auto rng = make_rng(spec.seed, 0x70726f746fULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> protos;
  constexpr int kMaxAttempts = 100000;
  for (int c = 0; c < spec.num_classes; ++c) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      std::vector<double> v(dim);
      for (auto& x : v) x = normal(rng);
      const double n = norm2(std::span<const double>(v));
      if (n == 0.0) continue;
      for (auto& x : v) x /= n;
      accepted = std::all_of(protos.begin(), protos.end(), [&](const auto& p) {
        return dot(std::span<const double>(p), std::span<const double>(v)) <= max_cos;
      });
      if (accepted) protos.push_back(std::move(v));
    }
    if (!accepted) {
      throw ValidationError("prototype_separation " + std::to_string(spec.prototype_separation) +
                            " is unattainable for " + std::to_string(spec.num_classes) +
                            " classes in dim " + std::to_string(spec.dim));
    }
  }
  std::vector<std::string> names;
  for (int c = 0; c < spec.num_classes; ++c) names.push_back(synthetic_class_name(c, spec.num_classes));
  return EmbeddingSet::from_rows(dim, std::move(names), protos);
}

namespace detail {

inline LabeledDataset sample_around_prototypes(const SyntheticSpec& spec, const EmbeddingSet& protos,
                                               int per_class, std::uint64_t stream,
                                               const std::string& id_prefix) {
  const auto dim = protos.dim();
  auto rng = make_rng(spec.seed, stream);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset ds;
  ds.classes = protos.ids();
  std::vector<std::string> ids;
  std::vector<float> data;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto p = protos.row(static_cast<std::size_t>(c));
    for (int k = 0; k < per_class; ++k) {
      std::ostringstream id;
      id << id_prefix << ds.classes[c] << '/' << std::setw(4) << std::setfill('0') << k;
      ids.push_back(id.str());
      ds.labels.push_back(c);
      if (spec.noise_std == 0.0) {
        data.insert(data.end(), p.begin(), p.end());
        continue;
      }
      std::vector<double> v(dim);
      for (std::size_t j = 0; j < dim; ++j) v[j] = p[j] + spec.noise_std * normal(rng);
      const double n = norm2(std::span<const double>(v));
      if (n == 0.0) throw NumericalError("synthetic example collapsed to zero");
      for (double x : v) data.push_back(static_cast<float>(x / n));
    }
  }
  ds.features = EmbeddingSet(dim, std::move(ids), std::move(data), true);
  return ds;
}

}  // namespace detail

// Few-shot training examples: shots_per_class noisy copies of each class
// prototype. A pure function of the spec.
inline LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  require(spec.shots_per_class >= 0, "shots_per_class must be non-negative");
  const auto protos = synthetic_prototypes(spec);
  return detail::sample_around_prototypes(spec, protos, spec.shots_per_class, 0x747261696eULL, "");
}

// Held-out examples from the same prototypes, drawn from an independent
// noise stream (`stream` selects which one).
inline LabeledDataset generate_synthetic_eval(const SyntheticSpec& spec, int per_class,
                                              std::uint64_t stream = 0) {
  require(per_class >= 1, "per_class must be positive");
  const auto protos = synthetic_prototypes(spec);
  return detail::sample_around_prototypes(spec, protos, per_class, 0x6576616c00ULL + stream, "eval/");
}

// ---------------------------------------------------------------------------
// Base / new split

inline ClassSplit split_classes(std::size_t num_classes, double fraction, std::uint64_t seed) {
  require(num_classes >= 2, "a split needs at least 2 classes");
  require(fraction > 0.0 && fraction < 1.0, "split fraction must lie in (0, 1)");
  // The epsilon keeps 0.3 * 10 from rounding up to 4.
  auto n_base = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(num_classes) - 1e-9));
  n_base = std::clamp<std::size_t>(n_base, 1, num_classes - 1);

  std::vector<int> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = static_cast<int>(i);
  auto rng = make_rng(seed, 0x73706c6974ULL);
  std::shuffle(order.begin(), order.end(), rng);

  ClassSplit split;
  split.seed = seed;
  split.base.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  std::sort(split.base.begin(), split.base.end());
  std::sort(split.novel.begin(), split.novel.end());
  return split;
}

inline ClassSplit split_classes(const LabeledDataset& dataset, double fraction, std::uint64_t seed) {
  return split_classes(dataset.num_classes(), fraction, seed);
}

}  // namespace dorlab
