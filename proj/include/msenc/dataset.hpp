#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msenc/io.hpp"
#include "msenc/tensor.hpp"

namespace msenc {

struct DatasetManifest {
  static constexpr int kVersion = 1;

  int version = kVersion;
  Index num_samples = 0;
  Index num_subjects = 0;
  std::vector<LayerShape> layer_shapes;
  Index activity_dim = 0;
  std::vector<int> subject_of_sample;
  // Stable per-sample keys; splits depend on these, not on sample order.
  std::vector<std::uint64_t> sample_keys;

  std::vector<std::string> feature_blobs;  // one per layer, N x H x W x C
  std::string activity_blob;               // N x V
  std::optional<std::string> noise_ceiling_blob;  // S x V
  std::map<std::string, std::string> roi_mask_blobs;  // V bytes each
  std::optional<std::string> valid_mask_blob;         // S x V bytes

  fs::path root;  // directory the relative blob paths resolve against
};

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["version"] = m.version;
  j["num_samples"] = m.num_samples;
  j["num_subjects"] = m.num_subjects;
  j["layer_shapes"] = json::array();
  for (const auto& s : m.layer_shapes) j["layer_shapes"].push_back({s.height, s.width, s.channels});
  j["activity_dim"] = m.activity_dim;
  j["subject_of_sample"] = m.subject_of_sample;
  j["sample_keys"] = m.sample_keys;
  j["blobs"] = {{"features", m.feature_blobs}, {"activity", m.activity_blob}};
  if (m.noise_ceiling_blob) j["blobs"]["noise_ceiling"] = *m.noise_ceiling_blob;
  if (!m.roi_mask_blobs.empty()) j["blobs"]["roi_masks"] = m.roi_mask_blobs;
  if (m.valid_mask_blob) j["blobs"]["subject_valid_mask"] = *m.valid_mask_blob;
  return j;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& dir) {
  io::write_json(dir / "manifest.json", manifest_to_json(m));
}

namespace detail {

inline void check_manifest_blobs(const DatasetManifest& m) {
  const auto n = static_cast<std::size_t>(m.num_samples);
  const auto v = static_cast<std::size_t>(m.activity_dim);
  const auto s = static_cast<std::size_t>(m.num_subjects);
  auto check = [&](const std::string& rel, std::size_t count, std::size_t elem, const std::string& what) {
    const fs::path path = m.root / rel;
    require(fs::exists(path), ErrorKind::MissingBlob, what + " (" + path.string() + ")");
    const auto bytes = fs::file_size(path);
    require(bytes == count * elem, ErrorKind::ShapeMismatch,
            what + " (" + path.string() + "): " + std::to_string(bytes) + " bytes, expected " +
                std::to_string(count * elem));
  };
  for (std::size_t l = 0; l < m.feature_blobs.size(); ++l)
    check(m.feature_blobs[l], n * static_cast<std::size_t>(m.layer_shapes[l].size()), 4,
          "features layer " + std::to_string(l));
  check(m.activity_blob, n * v, 4, "activity");
  if (m.noise_ceiling_blob) check(*m.noise_ceiling_blob, s * v, 4, "noise_ceiling");
  for (const auto& [name, rel] : m.roi_mask_blobs) check(rel, v, 1, "roi_mask " + name);
  if (m.valid_mask_blob) check(*m.valid_mask_blob, s * v, 1, "subject_valid_mask");
}

}  // namespace detail

// Parses and validates manifest.json. Every blob is checked for existence
// and byte length before returning.
inline DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  require(fs::exists(file), ErrorKind::MissingBlob, "manifest " + file.string());
  const json j = io::read_json(file);
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    m.version = j.at("version").get<int>();
    require(m.version == DatasetManifest::kVersion, ErrorKind::VersionUnsupported,
            file.string() + ": manifest version " + std::to_string(m.version));
    m.num_samples = j.at("num_samples").get<Index>();
    m.num_subjects = j.at("num_subjects").get<Index>();
    m.activity_dim = j.at("activity_dim").get<Index>();
    for (const auto& s : j.at("layer_shapes")) {
      require(s.size() == 3, ErrorKind::ShapeMismatch, "layer_shapes entries must be [H, W, C]");
      m.layer_shapes.push_back({s[0].get<Index>(), s[1].get<Index>(), s[2].get<Index>()});
    }
    m.subject_of_sample = j.at("subject_of_sample").get<std::vector<int>>();
    if (j.contains("sample_keys")) {
      m.sample_keys = j.at("sample_keys").get<std::vector<std::uint64_t>>();
    } else {
      m.sample_keys.resize(static_cast<std::size_t>(m.num_samples));
      for (std::size_t i = 0; i < m.sample_keys.size(); ++i) m.sample_keys[i] = i;
    }
    const json& blobs = j.at("blobs");
    m.feature_blobs = blobs.at("features").get<std::vector<std::string>>();
    m.activity_blob = blobs.at("activity").get<std::string>();
    if (blobs.contains("noise_ceiling")) m.noise_ceiling_blob = blobs.at("noise_ceiling").get<std::string>();
    if (blobs.contains("roi_masks")) m.roi_mask_blobs = blobs.at("roi_masks").get<std::map<std::string, std::string>>();
    if (blobs.contains("subject_valid_mask"))
      m.valid_mask_blob = blobs.at("subject_valid_mask").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorKind::IoError, file.string() + ": " + e.what());
  }

  require(m.num_samples >= 0 && m.num_subjects >= 1 && m.activity_dim >= 1, ErrorKind::ShapeMismatch,
          "manifest dimensions must be positive");
  require(!m.layer_shapes.empty(), ErrorKind::ShapeMismatch, "manifest has no layers");
  for (const auto& s : m.layer_shapes)
    require(s.height > 0 && s.width > 0 && s.channels > 0, ErrorKind::ShapeMismatch,
            "layer shape " + to_string(s) + " must be positive");
  require(m.feature_blobs.size() == m.layer_shapes.size(), ErrorKind::ShapeMismatch,
          "feature blob count differs from layer count");
  require(static_cast<Index>(m.subject_of_sample.size()) == m.num_samples, ErrorKind::ShapeMismatch,
          "subject_of_sample length differs from num_samples");
  require(static_cast<Index>(m.sample_keys.size()) == m.num_samples, ErrorKind::ShapeMismatch,
          "sample_keys length differs from num_samples");
  for (std::size_t i = 0; i < m.subject_of_sample.size(); ++i)
    require(m.subject_of_sample[i] >= 0 && m.subject_of_sample[i] < m.num_subjects, ErrorKind::SubjectOutOfRange,
            "sample " + std::to_string(i) + " has subject " + std::to_string(m.subject_of_sample[i]));
  detail::check_manifest_blobs(m);
  if (m.noise_ceiling_blob) {
    const auto nc = io::read_blob<float>(m.root / *m.noise_ceiling_blob,
                                         static_cast<std::size_t>(m.num_subjects * m.activity_dim), "noise_ceiling");
    for (std::size_t i = 0; i < nc.size(); ++i)
      require(nc[i] >= 0.0f && std::isfinite(nc[i]), ErrorKind::ShapeMismatch,
              "noise_ceiling entry " + std::to_string(i) + " is negative or non-finite");
  }
  return m;
}

// Everything a manifest references, loaded into memory as float32 / bytes.
struct Dataset {
  DatasetManifest manifest;
  std::vector<std::vector<float>> features;  // per layer, N * P * C
  std::vector<float> activity;               // N * V
  std::optional<std::vector<float>> noise_ceiling;
  std::map<std::string, std::vector<std::uint8_t>> roi_masks;
  std::optional<std::vector<std::uint8_t>> valid_mask;

  Index size() const { return manifest.num_samples; }
  Index activity_dim() const { return manifest.activity_dim; }
  Index num_subjects() const { return manifest.num_subjects; }
  Index num_layers() const { return static_cast<Index>(manifest.layer_shapes.size()); }

  std::span<const float> target(Index n) const {
    const auto v = static_cast<std::size_t>(manifest.activity_dim);
    return std::span<const float>(activity).subspan(static_cast<std::size_t>(n) * v, v);
  }

  bool vertex_valid(int subject, Index vertex) const {
    if (!valid_mask) return true;
    return (*valid_mask)[static_cast<std::size_t>(subject * manifest.activity_dim + vertex)] != 0;
  }
};

inline Dataset load_dataset(const fs::path& path) {
  Dataset d;
  d.manifest = load_manifest(path);
  const auto& m = d.manifest;
  const auto n = static_cast<std::size_t>(m.num_samples);
  for (std::size_t l = 0; l < m.layer_shapes.size(); ++l) {
    auto values = io::read_blob<float>(m.root / m.feature_blobs[l], n * static_cast<std::size_t>(m.layer_shapes[l].size()),
                                       "features layer " + std::to_string(l));
    for (std::size_t i = 0; i < values.size(); ++i)
      require(std::isfinite(values[i]), ErrorKind::ShapeMismatch,
              "features layer " + std::to_string(l) + " has a non-finite value at " + std::to_string(i));
    d.features.push_back(std::move(values));
  }
  const auto v = static_cast<std::size_t>(m.activity_dim);
  const auto s = static_cast<std::size_t>(m.num_subjects);
  d.activity = io::read_blob<float>(m.root / m.activity_blob, n * v, "activity");
  if (m.noise_ceiling_blob) d.noise_ceiling = io::read_blob<float>(m.root / *m.noise_ceiling_blob, s * v, "noise_ceiling");
  for (const auto& [name, rel] : m.roi_mask_blobs)
    d.roi_masks[name] = io::read_blob<std::uint8_t>(m.root / rel, v, "roi_mask " + name);
  if (m.valid_mask_blob) d.valid_mask = io::read_blob<std::uint8_t>(m.root / *m.valid_mask_blob, s * v, "subject_valid_mask");
  return d;
}

// Writes all arrays plus manifest.json under `dir`, using canonical blob names.
inline void write_dataset(Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  auto& m = d.manifest;
  m.feature_blobs.clear();
  for (std::size_t l = 0; l < d.features.size(); ++l) {
    m.feature_blobs.push_back("features_layer" + std::to_string(l) + ".f32");
    io::write_f32(dir / m.feature_blobs.back(), d.features[l]);
  }
  m.activity_blob = "activity.f32";
  io::write_f32(dir / m.activity_blob, d.activity);
  if (d.noise_ceiling) {
    m.noise_ceiling_blob = "noise_ceiling.f32";
    io::write_f32(dir / *m.noise_ceiling_blob, *d.noise_ceiling);
  }
  m.roi_mask_blobs.clear();
  for (const auto& [name, mask] : d.roi_masks) {
    m.roi_mask_blobs[name] = "roi_" + name + ".u8";
    io::write_u8(dir / m.roi_mask_blobs[name], mask);
  }
  if (d.valid_mask) {
    m.valid_mask_blob = "subject_valid_mask.u8";
    io::write_u8(dir / *m.valid_mask_blob, *d.valid_mask);
  }
  m.root = dir;
  write_manifest(m, dir);
}

// Scatters a subject-space vector into the union vertex space; vertices
// outside the mask are zero.
template <typename T>
std::vector<T> embed_activity(std::span<const T> raw, std::span<const std::uint8_t> valid_mask) {
  const auto valid = static_cast<std::size_t>(std::count_if(valid_mask.begin(), valid_mask.end(),
                                                            [](std::uint8_t b) { return b != 0; }));
  require(raw.size() == valid, ErrorKind::LengthMismatch,
          "raw length " + std::to_string(raw.size()) + " != mask popcount " + std::to_string(valid));
  std::vector<T> out(valid_mask.size(), T(0));
  std::size_t next = 0;
  for (std::size_t i = 0; i < valid_mask.size(); ++i)
    if (valid_mask[i]) out[i] = raw[next++];
  return out;
}

template <typename T>
std::vector<T> gather_masked(std::span<const T> values, std::span<const std::uint8_t> valid_mask) {
  require(values.size() == valid_mask.size(), ErrorKind::LengthMismatch, "values and mask lengths differ");
  std::vector<T> out;
  for (std::size_t i = 0; i < valid_mask.size(); ++i)
    if (valid_mask[i]) out.push_back(values[i]);
  return out;
}

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

struct SplitRatios {
  double train = 0.85;
  double val = 0.10;
  double test = 0.05;
};

struct SplitAssignment {
  std::vector<Split> labels;
  std::uint64_t seed = 0;

  std::vector<Index> indices(Split which) const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == which) out.push_back(static_cast<Index>(i));
    return out;
  }
};

// Largest-remainder apportionment of n items; ties go to the earlier bucket
// (train, then val, then test).
inline std::array<Index, 3> split_counts(Index n, const SplitRatios& r) {
  const std::array<double, 3> ratios{r.train, r.val, r.test};
  for (double x : ratios)
    require(x >= 0.0 && x <= 1.0 && std::isfinite(x), ErrorKind::RatioInvalid, "split ratio outside [0, 1]");
  require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9, ErrorKind::RatioInvalid,
          "split ratios must sum to 1");
  std::array<Index, 3> counts{};
  std::array<double, 3> remainders{};
  Index assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = static_cast<double>(n) * ratios[i];
    // Snap products like 20 * 0.85 that land a few ulps off an integer.
    if (std::abs(exact - std::round(exact)) < 1e-9) exact = std::round(exact);
    counts[i] = static_cast<Index>(std::floor(exact));
    remainders[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Remainders within rounding noise of each other count as tied, and a tie
  // keeps the earlier bucket.
  for (Index left = n - assigned; left > 0; --left) {
    int best = -1;
    for (int i = 0; i < 3; ++i)
      if (remainders[i] >= 0.0 && (best < 0 || remainders[i] > remainders[best] + 1e-9)) best = i;
    if (best < 0) best = 0;
    ++counts[best];
    remainders[best] = -1.0;
  }
  return counts;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Stratified per subject. Each subject's samples are ordered by a seeded hash
// of their key, so the label of a sample does not depend on sample order.
inline SplitAssignment split_samples(const DatasetManifest& m, const SplitRatios& ratios, std::uint64_t seed) {
  SplitAssignment out;
  out.seed = seed;
  out.labels.assign(static_cast<std::size_t>(m.num_samples), Split::Train);
  for (int s = 0; s < m.num_subjects; ++s) {
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    for (std::size_t i = 0; i < m.subject_of_sample.size(); ++i) {
      if (m.subject_of_sample[i] != s) continue;
      const std::uint64_t key = m.sample_keys[i];
      keyed.emplace_back(detail::splitmix64(seed ^ detail::splitmix64(key)), i);
    }
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return m.sample_keys[a.second] < m.sample_keys[b.second];
    });
    const auto counts = split_counts(static_cast<Index>(keyed.size()), ratios);
    for (std::size_t k = 0; k < keyed.size(); ++k) {
      const auto rank = static_cast<Index>(k);
      out.labels[keyed[k].second] =
          rank < counts[0] ? Split::Train : (rank < counts[0] + counts[1] ? Split::Val : Split::Test);
    }
  }
  return out;
}

// Copies the selected samples' features into a batch.
template <typename T>
FeatureBatch<T> gather_features(const Dataset& d, std::span<const Index> samples) {
  FeatureBatch<T> batch;
  batch.samples = static_cast<Index>(samples.size());
  for (std::size_t l = 0; l < d.features.size(); ++l) {
    const auto& shape = d.manifest.layer_shapes[l];
    const Index p = shape.positions();
    const Index c = shape.channels;
    Matrix<T> stacked(batch.samples * p, c);
    for (Index b = 0; b < batch.samples; ++b) {
      const float* src = d.features[l].data() + samples[static_cast<std::size_t>(b)] * shape.size();
      stacked.middleRows(b * p, p) = Eigen::Map<const Matrix<float>>(src, p, c).template cast<T>();
    }
    batch.layers.push_back(std::move(stacked));
  }
  return batch;
}

template <typename T>
Matrix<T> gather_targets(const Dataset& d, std::span<const Index> samples) {
  const Index v = d.activity_dim();
  Matrix<T> out(static_cast<Index>(samples.size()), v);
  for (std::size_t b = 0; b < samples.size(); ++b)
    out.row(static_cast<Index>(b)) =
        Eigen::Map<const RowVector<float>>(d.activity.data() + samples[b] * v, v).template cast<T>();
  return out;
}

inline std::vector<SubjectId> gather_subjects(const Dataset& d, std::span<const Index> samples) {
  std::vector<SubjectId> out;
  out.reserve(samples.size());
  for (Index n : samples) out.emplace_back(d.manifest.subject_of_sample[static_cast<std::size_t>(n)]);
  return out;
}

// Per-element loss mask built from each sample's subject valid mask.
template <typename T>
Matrix<T> gather_valid_mask(const Dataset& d, std::span<const Index> samples) {
  const Index v = d.activity_dim();
  Matrix<T> out = Matrix<T>::Ones(static_cast<Index>(samples.size()), v);
  if (!d.valid_mask) return out;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const int s = d.manifest.subject_of_sample[static_cast<std::size_t>(samples[b])];
    for (Index j = 0; j < v; ++j) out(static_cast<Index>(b), j) = d.vertex_valid(s, j) ? T(1) : T(0);
  }
  return out;
}

}  // namespace msenc
