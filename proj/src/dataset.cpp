#include "gammadesk/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "gammadesk/errors.hpp"
#include "gammadesk/image.hpp"
#include "json.hpp"

namespace gammadesk {

void validate_sample(const DetectionSample& sample, std::size_t num_classes) {
  const Tensor& img = sample.image;
  if (img.rank() != 3 || img.dim(0) != 3) throw ContractError("sample image must be [3,H,W]");
  const double w = static_cast<double>(img.dim(2)), h = static_cast<double>(img.dim(1));
  for (std::size_t i = 0; i < sample.annotations.size(); ++i) {
    const auto& a = sample.annotations[i];
    const Box& b = a.box;
    if (!(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= w && 0.0 <= b.y_min && b.y_min < b.y_max && b.y_max <= h))
      throw ContractError("annotation " + std::to_string(i) + " of '" + sample.name + "' lies outside the image");
    if (a.class_id < 0 || static_cast<std::size_t>(a.class_id) >= num_classes)
      throw ContractError("annotation " + std::to_string(i) + " of '" + sample.name + "' has class " +
                          std::to_string(a.class_id));
  }
}

}  // namespace gammadesk

namespace gammadesk::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IngestionError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError(p.string() + ": cannot open for writing");
  out << std::setprecision(17);
  return out;
}

template <typename Fn>
void for_each_json_line(const fs::path& path, const char* format, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      if (j.at("format").get<std::string>() != format)
        throw IngestionError("unexpected format '" + j.at("format").get<std::string>() + "'");
      if (j.at("version").get<int>() != kRecordVersion)
        throw IngestionError("unsupported version " + std::to_string(j.at("version").get<int>()));
      fn(j);
    } catch (const json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const IngestionError& e) {
      throw IngestionError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

Box box_from(const json& row) {
  return {row.at(0).get<double>(), row.at(1).get<double>(), row.at(2).get<double>(), row.at(3).get<double>()};
}

}  // namespace

void write_annotations(const fs::path& path, const std::vector<AnnotationRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records) {
    json boxes = json::array();
    for (const auto& a : r.boxes) boxes.push_back({a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.class_id});
    json j = {{"format", kAnnotationFormat}, {"version", kRecordVersion}, {"image", r.image},
              {"width", r.width},            {"height", r.height},        {"boxes", boxes}};
    out << j.dump() << '\n';
  }
}

std::vector<AnnotationRecord> read_annotations(const fs::path& path) {
  std::vector<AnnotationRecord> out;
  for_each_json_line(path, kAnnotationFormat, [&](const json& j) {
    AnnotationRecord r;
    r.image = j.at("image").get<std::string>();
    r.width = j.at("width").get<std::size_t>();
    r.height = j.at("height").get<std::size_t>();
    for (const auto& row : j.at("boxes")) {
      if (row.size() != 5) throw IngestionError("box rows need 5 values");
      r.boxes.push_back({box_from(row), row.at(4).get<int>()});
    }
    out.push_back(std::move(r));
  });
  return out;
}

void write_detections(const fs::path& path, const std::vector<DetectionRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records) {
    json dets = json::array();
    for (const auto& d : r.detections)
      dets.push_back({d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.class_id, d.confidence});
    json j = {{"format", kDetectionFormat}, {"version", kRecordVersion}, {"image", r.image}, {"detections", dets}};
    out << j.dump() << '\n';
  }
}

std::vector<DetectionRecord> read_detections(const fs::path& path) {
  std::vector<DetectionRecord> out;
  for_each_json_line(path, kDetectionFormat, [&](const json& j) {
    DetectionRecord r;
    r.image = j.at("image").get<std::string>();
    for (const auto& row : j.at("detections")) {
      if (row.size() != 6) throw IngestionError("detection rows need 6 values");
      r.detections.push_back({box_from(row), row.at(4).get<int>(), row.at(5).get<double>()});
    }
    out.push_back(std::move(r));
  });
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kManifestName = "manifest.txt";
constexpr const char* kAnnotationsName = "annotations.jsonl";
constexpr const char* kTagPrefix = "# gammadesk manifest v1 tag=";

std::string image_name(std::size_t i) {
  std::ostringstream ss;
  ss << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
  return ss.str();
}

}  // namespace

void write_manifest(const fs::path& root, const std::string& tag, const std::vector<std::string>& images) {
  fs::create_directories(root);
  auto out = open_out(root / kManifestName);
  out << kTagPrefix << tag << '\n';
  for (const auto& img : images) out << img << '\n';
}

Manifest read_manifest(const fs::path& root) {
  Manifest m;
  m.root = root;
  std::istringstream in(read_text(root / kManifestName));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind(kTagPrefix, 0) == 0) m.tag = line.substr(std::strlen(kTagPrefix));
      continue;
    }
    if (!fs::exists(root / line)) throw IngestionError((root / line).string() + ": listed in manifest but missing");
    m.entries.push_back({line, std::nullopt});
  }
  if (fs::exists(root / kAnnotationsName)) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < m.entries.size(); ++i) index[m.entries[i].image] = i;
    for (auto& rec : read_annotations(root / kAnnotationsName)) {
      auto it = index.find(rec.image);
      if (it == index.end()) throw IngestionError(rec.image + ": annotated but not in manifest");
      m.entries[it->second].annotations = std::move(rec.boxes);
    }
  }
  return m;
}

std::string dataset_fingerprint(const fs::path& root) {
  Manifest m = read_manifest(root);
  std::uint64_t h = fnv1a64(read_text(root / kManifestName));
  if (fs::exists(root / kAnnotationsName)) h = fnv1a64(read_text(root / kAnnotationsName), h);
  for (const auto& e : m.entries) h = fnv1a64(read_text(root / e.image), h);
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

void save_image_set(const fs::path& root, const std::string& tag, const std::vector<Tensor>& images) {
  fs::create_directories(root / "images");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < images.size(); ++i) {
    names.push_back(image_name(i));
    save_image(root / names.back(), images[i]);
  }
  write_manifest(root, tag, names);
}

std::vector<Tensor> load_image_set(const fs::path& root) {
  Manifest m = read_manifest(root);
  std::vector<Tensor> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(load_image(root / e.image));
  return out;
}

void save_detection_set(const fs::path& root, const std::string& tag, const std::vector<DetectionSample>& samples) {
  fs::create_directories(root / "images");
  std::vector<std::string> names;
  std::vector<AnnotationRecord> records;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    names.push_back(image_name(i));
    save_image(root / names.back(), samples[i].image);
    records.push_back({names.back(), samples[i].image.dim(2), samples[i].image.dim(1), samples[i].annotations});
  }
  write_manifest(root, tag, names);
  write_annotations(root / kAnnotationsName, records);
}

std::vector<DetectionSample> load_detection_set(const fs::path& root) {
  Manifest m = read_manifest(root);
  std::vector<DetectionSample> out;
  out.reserve(m.entries.size());
  for (auto& e : m.entries) {
    DetectionSample s;
    s.image = load_image(root / e.image);
    s.name = e.image;
    if (e.annotations) s.annotations = std::move(*e.annotations);
    out.push_back(std::move(s));
  }
  return out;
}

std::uint64_t sample_fingerprint(const DetectionSample& sample) {
  std::uint64_t h = fnv1a64(shape_str(sample.image.shape()));
  const auto px = sample.image.data();
  h = fnv1a64(std::string_view(reinterpret_cast<const char*>(px.data()), px.size() * sizeof(double)), h);
  for (const auto& a : sample.annotations) {
    const double v[5] = {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, static_cast<double>(a.class_id)};
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(v), sizeof v), h);
  }
  return h;
}

std::set<std::uint64_t> fingerprints(const std::vector<DetectionSample>& samples) {
  std::set<std::uint64_t> out;
  for (const auto& s : samples) out.insert(sample_fingerprint(s));
  return out;
}

DetectionSample resize_sample(const DetectionSample& sample, std::size_t target) {
  DetectionSample out;
  out.name = sample.name;
  out.image = resize_shorter_side(sample.image, target);
  const double sx = static_cast<double>(out.image.dim(2)) / static_cast<double>(sample.image.dim(2));
  const double sy = static_cast<double>(out.image.dim(1)) / static_cast<double>(sample.image.dim(1));
  for (const auto& a : sample.annotations) out.annotations.push_back({scale_box(a.box, sx, sy), a.class_id});
  return out;
}

// ---------------------------------------------------------------------------

const char* domain_name(Domain d) { return d == Domain::Terrestrial ? "terrestrial" : "underwater"; }

DomainDataset::DomainDataset(Domain domain, std::vector<Tensor> images, std::uint64_t seed)
    : domain_(domain), images_(std::move(images)), rng_(seed) {
  if (images_.empty()) throw ContractError(std::string(domain_name(domain)) + " dataset is empty");
  for (const auto& img : images_)
    if (img.shape() != images_.front().shape() || img.rank() != 3 || img.dim(0) != 3)
      throw ShapeError("domain images must share one [3,H,W] shape");
  reshuffle();
}

void DomainDataset::reshuffle() {
  order_.resize(images_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(order_);
  cursor_ = 0;
}

const Tensor& DomainDataset::next() {
  if (cursor_ == order_.size()) {
    ++epoch_;
    reshuffle();
  }
  return images_[order_[cursor_++]];
}

std::vector<DetectionSample> mix_split(const std::vector<DetectionSample>& existing,
                                       const std::vector<DetectionSample>& augmented, const MixSpec& spec,
                                       std::size_t total, const std::set<std::uint64_t>& held_out) {
  if (spec.existing_fraction < 0.0 || spec.augmented_fraction < 0.0 ||
      std::abs(spec.existing_fraction + spec.augmented_fraction - 1.0) > 1e-9)
    throw ContractError("mix fractions must be non-negative and sum to 1");
  const auto n_existing = static_cast<std::size_t>(std::llround(spec.existing_fraction * static_cast<double>(total)));
  const std::size_t n_augmented = total - n_existing;
  if (n_existing > existing.size())
    throw ContractError("mix_split needs " + std::to_string(n_existing) + " existing samples, pool has " +
                        std::to_string(existing.size()));
  if (n_augmented > augmented.size())
    throw ContractError("mix_split needs " + std::to_string(n_augmented) + " augmented samples, pool has " +
                        std::to_string(augmented.size()));

  Rng rng(derive_seed(spec.seed, "mix_split"));
  std::vector<DetectionSample> out;
  out.reserve(total);
  auto draw = [&](const std::vector<DetectionSample>& pool, std::size_t n, const char* which) {
    Rng r = rng.split(which);
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    r.shuffle(idx);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = pool[idx[i]];
      if (held_out.count(sample_fingerprint(s)))
        throw ContractError(std::string("mix_split drew an evaluation sample from the ") + which + " pool");
      out.push_back(s);
    }
  };
  draw(existing, n_existing, "existing");
  draw(augmented, n_augmented, "augmented");
  Rng order = rng.split("order");
  order.shuffle(out);
  return out;
}

}  // namespace gammadesk::data
