#include "gammadesk/cli.hpp"

#include <Eigen/Core>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "gammadesk/attention.hpp"
#include "gammadesk/dataset.hpp"
#include "gammadesk/detector.hpp"
#include "gammadesk/errors.hpp"
#include "gammadesk/gan.hpp"
#include "gammadesk/metrics.hpp"
#include "gammadesk/rng.hpp"
#include "gammadesk/synth.hpp"

namespace gammadesk::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration schema

const std::vector<KeySpec>& key_schema() {
  using K = ValueKind;
  static const std::vector<KeySpec> schema = {
      {"run.seed", K::Integer, "0", {}, "root seed; every component derives a named sub-seed"},

      {"data.kind", K::Text, "detection", {"detection", "domains"}, "synth-data output: annotated scenes or X/Y domains"},
      {"data.size", K::Integer, "64", {}, "square image size in pixels"},
      {"data.classes", K::Integer, "3", {}, "object classes (2..5)"},
      {"data.count", K::Integer, "400", {}, "annotated scenes to generate"},
      {"data.n_x", K::Integer, "300", {}, "terrestrial images"},
      {"data.n_y", K::Integer, "100", {}, "underwater-style images"},
      {"data.underwater", K::Boolean, "false", {}, "apply the underwater style to annotated scenes"},
      {"data.turbidity", K::Boolean, "false", {}, "apply turbidity to annotated scenes"},

      {"gan.x", K::Text, "", {}, "terrestrial image set directory"},
      {"gan.y", K::Text, "", {}, "underwater image set directory"},
      {"gan.lambda", K::Real, "10", {}, "cycle-loss weight"},
      {"gan.lr", K::Real, "0.0002", {}, "Adam learning rate"},
      {"gan.constant_epochs", K::Integer, "100", {}, "epochs at the base rate"},
      {"gan.decay_epochs", K::Integer, "100", {}, "epochs of linear decay to zero"},
      {"gan.steps_per_epoch", K::Integer, "0", {}, "0: one pass over the larger domain"},
      {"gan.batch_size", K::Integer, "1", {}, ""},
      {"gan.image_size", K::Integer, "64", {}, ""},
      {"gan.generator_width", K::Integer, "8", {}, ""},
      {"gan.discriminator_width", K::Integer, "16", {}, ""},
      {"gan.residual_blocks", K::Integer, "3", {}, ""},
      {"gan.fid_every", K::Integer, "20", {}, "epochs between FID probes; 0 disables"},
      {"gan.checkpoint_every", K::Integer, "0", {}, "epochs between checkpoints; 0 keeps only the final one"},

      {"translate.model", K::Text, "", {}, "train-cyclegan output directory"},
      {"translate.input", K::Text, "", {}, "image or detection set to translate"},
      {"translate.direction", K::Text, "G", {"G", "F"}, "G: terrestrial to underwater, F: the reverse"},

      {"mix.existing", K::Text, "", {}, "existing (target-domain) detection set"},
      {"mix.augmented", K::Text, "", {}, "translated detection set"},
      {"mix.held_out", K::Text, "", {}, "evaluation set the mix must not touch"},
      {"mix.existing_fraction", K::Real, "0.6", {}, "share drawn from the existing pool"},
      {"mix.total", K::Integer, "100", {}, "size of the mixed set"},

      {"detector.data", K::Text, "", {}, "training detection set"},
      {"detector.eval", K::Text, "", {}, "held-out set for the final report; empty uses the training set"},
      {"detector.image_size", K::Integer, "64", {}, ""},
      {"detector.classes", K::Integer, "3", {}, ""},
      {"detector.use_sea", K::Boolean, "true", {}, "self-attention block between backbone and RPN"},
      {"detector.iterations", K::Integer, "2000", {}, ""},
      {"detector.lr_boundary", K::Integer, "1600", {}, "first iteration at the late rate"},
      {"detector.lr", K::Real, "0.001", {}, ""},
      {"detector.late_lr", K::Real, "0.0001", {}, ""},
      {"detector.momentum", K::Real, "0.9", {}, ""},
      {"detector.weight_decay", K::Real, "0.0005", {}, ""},
      {"detector.batch_size", K::Integer, "4", {}, ""},
      {"detector.checkpoint_every", K::Integer, "0", {}, "iterations between checkpoints"},

      {"eval.task", K::Text, "detect", {"detect", "fid"}, ""},
      {"eval.model", K::Text, "", {}, "detector directory (detect)"},
      {"eval.data", K::Text, "", {}, "dataset to score"},
      {"eval.reference", K::Text, "", {}, "reference image set (fid)"},
      {"eval.score_threshold", K::Real, "0.05", {}, ""},
      {"eval.nms_threshold", K::Real, "0.5", {}, ""},
      {"eval.iou_threshold", K::Real, "0.5", {}, ""},

      {"attn.model", K::Text, "", {}, "detector directory with SEA"},
      {"attn.data", K::Text, "", {}, "images to visualise"},
      {"attn.count", K::Integer, "4", {}, "number of images"},
  };
  return schema;
}

namespace {

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : key_schema())
    if (k.key == key) return &k;
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

void check_value(const KeySpec& spec, const std::string& value, const std::string& where) {
  auto fail = [&](const std::string& what) {
    throw UsageError(where + ": " + spec.key + " = '" + value + "' " + what);
  };
  switch (spec.kind) {
    case ValueKind::Integer: {
      if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos)
        fail("is not a non-negative integer");
      try {
        (void)std::stoull(value);
      } catch (const std::exception&) {
        fail("is out of range");
      }
      break;
    }
    case ValueKind::Real: {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        fail("is not a number");
      }
      if (used != value.size() || !std::isfinite(v)) fail("is not a finite number");
      break;
    }
    case ValueKind::Boolean:
      if (value != "true" && value != "false") fail("must be true or false");
      break;
    case ValueKind::Text:
      break;
  }
  if (!spec.choices.empty() &&
      std::find(spec.choices.begin(), spec.choices.end(), value) == spec.choices.end()) {
    std::string all;
    for (const auto& c : spec.choices) all += (all.empty() ? "" : "|") + c;
    fail("must be one of " + all);
  }
}

}  // namespace

std::map<std::string, std::string> parse_config_text(std::string_view text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = trim(raw);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(where + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw UsageError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
    if (section.empty()) throw UsageError(where + ": key outside any [section]");
    const std::string key = section + "." + trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const KeySpec* spec = find_key(key);
    if (!spec) throw UsageError(where + ": unknown key '" + key + "'");
    if (out.count(key)) throw UsageError(where + ": duplicate key '" + key + "'");
    check_value(*spec, value, where);
    out[key] = value;
  }
  return out;
}

RunConfig resolve_config(const std::string& subcommand, const std::optional<fs::path>& config_path,
                         const std::vector<std::string>& overrides, fs::path output_dir) {
  RunConfig rc;
  rc.subcommand = subcommand;
  rc.config_path = config_path;
  rc.output_dir = std::move(output_dir);
  for (const auto& k : key_schema()) rc.values[k.key] = k.default_value;
  if (config_path) {
    std::ifstream in(*config_path, std::ios::binary);
    if (!in) throw UsageError("cannot read config file " + config_path->string());
    std::stringstream ss;
    ss << in.rdbuf();
    for (auto& [k, v] : parse_config_text(ss.str(), config_path->string())) rc.values[k] = v;
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + o + "' is not section.key=value");
    const std::string key = trim(std::string_view(o).substr(0, eq));
    const std::string value = trim(std::string_view(o).substr(eq + 1));
    const KeySpec* spec = find_key(key);
    if (!spec) throw UsageError("unknown key '" + key + "'");
    check_value(*spec, value, "override");
    rc.values[key] = value;
  }
  rc.seed = std::stoull(rc.values.at("run.seed"));
  return rc;
}

std::string render_config(const RunConfig& config) {
  std::ostringstream out;
  out << "# gammadesk resolved config v1\n";
  out << "# subcommand: " << config.subcommand << "\n";
  std::string section;
  for (const auto& k : key_schema()) {
    const std::string sec = k.key.substr(0, k.key.find('.'));
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
      section = sec;
    }
    out << k.key.substr(sec.size() + 1) << " = " << config.values.at(k.key) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Running

namespace {

struct Values {
  const std::map<std::string, std::string>& v;

  const std::string& text(const std::string& key) const { return v.at(key); }
  std::size_t size(const std::string& key) const { return std::stoull(v.at(key)); }
  double real(const std::string& key) const { return std::stod(v.at(key)); }
  bool flag(const std::string& key) const { return v.at(key) == "true"; }
  fs::path path(const std::string& key) const {
    if (v.at(key).empty()) throw ContractError(key + " must name a directory");
    return v.at(key);
  }
};

// What a subcommand reports besides success.
struct Outcome {
  json inputs = json::object();
  json metrics = json::object();
  json outputs = json::object();
};

json input_record(const fs::path& dir) {
  return {{"path", dir.generic_string()}, {"fingerprint", data::dataset_fingerprint(dir)}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
}

/// Accepts a run directory or its final/ subdirectory.
fs::path model_dir(const fs::path& dir, const char* marker) {
  if (fs::exists(dir / "final" / marker)) return dir / "final";
  if (fs::exists(dir / marker)) return dir;
  throw IngestionError("no " + std::string(marker) + " under " + dir.string());
}

std::vector<Tensor> load_images_any(const fs::path& dir) { return data::load_image_set(dir); }

// ---- synth-data ------------------------------------------------------------

Outcome synth_data(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const std::uint64_t seed = derive_seed(rc.seed, "synth-data");
  const std::size_t size = v.size("data.size");
  if (v.text("data.kind") == "domains") {
    std::vector<Tensor> xs, ys;
    std::tie(xs, ys) = data::synth_domain_images(seed, v.size("data.n_x"), v.size("data.n_y"), size);
    data::save_image_set(rc.output_dir / "X", "terrestrial", xs);
    data::save_image_set(rc.output_dir / "Y", "underwater", ys);
    o.outputs["X"] = {{"path", "X"}, {"fingerprint", data::dataset_fingerprint(rc.output_dir / "X")}};
    o.outputs["Y"] = {{"path", "Y"}, {"fingerprint", data::dataset_fingerprint(rc.output_dir / "Y")}};
    log << "wrote " << xs.size() << " terrestrial and " << ys.size() << " underwater images\n";
  } else {
    data::Degradations d;
    d.underwater = v.flag("data.underwater");
    d.turbidity = v.flag("data.turbidity");
    auto samples = data::synth_detection_set(seed, v.size("data.count"), size, v.size("data.classes"), d);
    data::save_detection_set(rc.output_dir, "detection", samples);
    o.outputs["dataset"] = data::dataset_fingerprint(rc.output_dir);
    o.outputs["classes"] = data::class_names(v.size("data.classes"));
    log << "wrote " << samples.size() << " annotated scenes\n";
  }
  return o;
}

// ---- train-cyclegan ---------------------------------------------------------

gan::GanTrainConfig gan_config(const Values& v, std::uint64_t seed) {
  gan::GanTrainConfig c;
  c.lambda = v.real("gan.lambda");
  c.base_lr = v.real("gan.lr");
  c.constant_epochs = v.size("gan.constant_epochs");
  c.decay_epochs = v.size("gan.decay_epochs");
  c.steps_per_epoch = v.size("gan.steps_per_epoch");
  c.batch_size = v.size("gan.batch_size");
  c.image_size = v.size("gan.image_size");
  c.generator_width = v.size("gan.generator_width");
  c.discriminator_width = v.size("gan.discriminator_width");
  c.residual_blocks = v.size("gan.residual_blocks");
  c.fid_every = v.size("gan.fid_every");
  c.checkpoint_every = v.size("gan.checkpoint_every");
  c.seed = seed;
  return c;
}

json gan_architecture(const gan::GanTrainConfig& c) {
  return {{"format", "gammadesk.cyclegan"},   {"version", 1},
          {"image_size", c.image_size},       {"generator_width", c.generator_width},
          {"discriminator_width", c.discriminator_width}, {"residual_blocks", c.residual_blocks},
          {"seed", c.seed}};
}

gan::GanTrainConfig gan_from_architecture(const json& j) {
  if (j.value("format", "") != "gammadesk.cyclegan" || j.value("version", 0) != 1)
    throw IngestionError("gan.json has an unknown format tag or version");
  gan::GanTrainConfig c;
  j.at("image_size").get_to(c.image_size);
  j.at("generator_width").get_to(c.generator_width);
  j.at("discriminator_width").get_to(c.discriminator_width);
  j.at("residual_blocks").get_to(c.residual_blocks);
  j.at("seed").get_to(c.seed);
  return c;
}

Outcome train_cyclegan_cmd(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const fs::path xdir = v.path("gan.x"), ydir = v.path("gan.y");
  o.inputs["x"] = input_record(xdir);
  o.inputs["y"] = input_record(ydir);
  gan::GanTrainConfig cfg = gan_config(v, derive_seed(rc.seed, "gan"));
  cfg.output_dir = rc.output_dir;
  data::DomainDataset x(data::Domain::Terrestrial, load_images_any(xdir), derive_seed(rc.seed, "gan/x-order"));
  data::DomainDataset y(data::Domain::Underwater, load_images_any(ydir), derive_seed(rc.seed, "gan/y-order"));

  gan::Generator g0 = gan::build_generator(cfg, cfg.seed, gan::Role::G);
  gan::Generator f0 = gan::build_generator(cfg, cfg.seed, gan::Role::F);
  const double cyc_init = gan::cycle_reconstruction_l1(g0, f0, x.images());

  auto result = gan::train_cyclegan(x, y, cfg, [&](std::size_t step, const gan::DiscriminatorAudit&) {
    if (step % 100 == 0) log << "step " << step << "\n";
  });
  write_json(rc.output_dir / "final" / "gan.json", gan_architecture(cfg));

  const metrics::RandomConvEncoder enc(derive_seed(cfg.seed, "fid_encoder"), {cfg.image_size, {16, 32, 64}});
  const auto gx = gan::translate_all(result.model.g, x.images());
  o.metrics["fid_x_y"] = metrics::fid_between(x.images(), y.images(), enc);
  o.metrics["fid_gx_y"] = metrics::fid_between(gx, y.images(), enc);
  o.metrics["cycle_l1_init"] = cyc_init;
  o.metrics["cycle_l1_final"] = gan::cycle_reconstruction_l1(result.model.g, result.model.f, x.images());
  o.metrics["steps"] = result.steps;
  o.metrics["saturations"] = result.saturations;
  o.outputs["model"] = "final";
  o.outputs["trace"] = "trace.jsonl";
  log << "FID(X,Y) " << o.metrics["fid_x_y"].get<double>() << "  FID(G(X),Y) " << o.metrics["fid_gx_y"].get<double>()
      << "\n";
  return o;
}

// ---- translate -------------------------------------------------------------

Outcome translate_cmd(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const fs::path mdir = model_dir(v.path("translate.model"), "gan.json");
  const fs::path in = v.path("translate.input");
  o.inputs["model"] = {{"path", mdir.generic_string()}};
  o.inputs["input"] = input_record(in);
  const gan::GanTrainConfig cfg = gan_from_architecture(read_json(mdir / "gan.json"));
  gan::CycleGan model = gan::load_cyclegan(mdir, cfg);
  gan::Generator& g = v.text("translate.direction") == "G" ? model.g : model.f;

  const data::Manifest manifest = data::read_manifest(in);
  const bool annotated = !manifest.entries.empty() && manifest.entries.front().annotations.has_value();
  if (annotated) {
    auto samples = data::load_detection_set(in);
    for (auto& s : samples) s.image = gan::translate(g, s.image);
    data::save_detection_set(rc.output_dir, "translated", samples);
    log << "translated " << samples.size() << " annotated images\n";
  } else {
    auto images = gan::translate_all(g, data::load_image_set(in));
    data::save_image_set(rc.output_dir, "translated", images);
    log << "translated " << images.size() << " images\n";
  }
  o.outputs["dataset"] = data::dataset_fingerprint(rc.output_dir);
  return o;
}

// ---- mix -------------------------------------------------------------------

Outcome mix_cmd(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const fs::path ex = v.path("mix.existing"), au = v.path("mix.augmented");
  o.inputs["existing"] = input_record(ex);
  o.inputs["augmented"] = input_record(au);
  std::set<std::uint64_t> held;
  if (!v.text("mix.held_out").empty()) {
    const fs::path h = v.path("mix.held_out");
    o.inputs["held_out"] = input_record(h);
    held = data::fingerprints(data::load_detection_set(h));
  }
  const double frac = v.real("mix.existing_fraction");
  const data::MixSpec spec{frac, 1.0 - frac, derive_seed(rc.seed, "mix")};
  auto mixed = data::mix_split(data::load_detection_set(ex), data::load_detection_set(au), spec, v.size("mix.total"), held);
  data::save_detection_set(rc.output_dir, "mix", mixed);
  o.outputs["dataset"] = data::dataset_fingerprint(rc.output_dir);
  o.metrics["size"] = mixed.size();
  log << "mixed " << mixed.size() << " samples\n";
  return o;
}

// ---- detection ---------------------------------------------------------------

json detection_report(const det::DetectionReport& r, const det::DetectorModel& m, const fs::path& data_dir,
                      double score, double nms, double iou) {
  json per_class = json::array();
  const auto& names = m.config().class_names;
  for (std::size_t c = 0; c < r.result.per_class.size(); ++c) {
    const auto& ap = r.result.per_class[c];
    per_class.push_back({{"class", names[c]},
                         {"ap", ap.ap ? json(*ap.ap) : json(nullptr)},
                         {"tp", ap.true_positives},
                         {"fp", ap.false_positives},
                         {"fn", ap.false_negatives},
                         {"flagged", ap.flagged}});
  }
  return {{"format", "gammadesk.eval_report"},
          {"version", 1},
          {"task", "detect"},
          {"dataset", data_dir.generic_string()},
          {"dataset_fingerprint", data::dataset_fingerprint(data_dir)},
          {"iou_threshold", iou},
          {"score_threshold", score},
          {"nms_threshold", nms},
          {"per_class", per_class},
          {"map", r.result.map}};
}

void write_detection_records(const fs::path& path, const data::Manifest& manifest, const det::DetectionReport& r) {
  std::vector<data::DetectionRecord> recs;
  for (std::size_t i = 0; i < r.detections.size(); ++i) recs.push_back({manifest.entries[i].image, r.detections[i]});
  data::write_detections(path, recs);
}

Outcome train_detector_cmd(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const fs::path dd = v.path("detector.data");
  o.inputs["data"] = input_record(dd);
  const auto samples = data::load_detection_set(dd);

  det::DetectorConfig dc;
  dc.image_size = v.size("detector.image_size");
  dc.class_names = data::class_names(v.size("detector.classes"));
  dc.use_sea = v.flag("detector.use_sea");
  det::DetectorTrainConfig tc;
  tc.iterations = v.size("detector.iterations");
  tc.lr_boundary = v.size("detector.lr_boundary");
  tc.base_lr = v.real("detector.lr");
  tc.late_lr = v.real("detector.late_lr");
  tc.momentum = v.real("detector.momentum");
  tc.weight_decay = v.real("detector.weight_decay");
  tc.batch_size = v.size("detector.batch_size");
  tc.checkpoint_every = v.size("detector.checkpoint_every");
  tc.seed = derive_seed(rc.seed, "detector/train");
  tc.output_dir = rc.output_dir;

  auto result = det::train_detector(samples, det::DetectorModel(dc, derive_seed(rc.seed, "detector/model")), tc,
                                    [&](const det::IterationRecord& r) {
                                      if (r.iteration % 100 == 0)
                                        log << "iteration " << r.iteration << " loss " << r.loss.total() << "\n";
                                    });

  const fs::path eval_dir = v.text("detector.eval").empty() ? dd : v.path("detector.eval");
  const auto eval_samples = eval_dir == dd ? samples : data::load_detection_set(eval_dir);
  const double score = 0.05, nms = 0.5, iou = 0.5;
  const auto report = det::evaluate_detector(result.model, eval_samples, score, nms, iou);
  write_json(rc.output_dir / "eval_report.json", detection_report(report, result.model, eval_dir, score, nms, iou));
  write_detection_records(rc.output_dir / "detections.jsonl", data::read_manifest(eval_dir), report);

  o.inputs["eval"] = input_record(eval_dir);
  o.metrics["map"] = report.result.map;
  o.metrics["gamma"] = result.model.gamma();
  o.metrics["final_loss"] = result.trace.back().loss.total();
  o.metrics["images_without_positive_anchor"] = result.images_without_positive_anchor;
  o.outputs["model"] = "final";
  o.outputs["trace"] = "trace.jsonl";
  o.outputs["report"] = "eval_report.json";
  log << "mAP@" << iou << " " << report.result.map << "\n";
  return o;
}

Outcome eval_cmd(const RunConfig& rc, const Values& v, std::ostream& log, const std::string& task) {
  Outcome o;
  const fs::path dd = v.path("eval.data");
  o.inputs["data"] = input_record(dd);
  if (task == "fid") {
    const fs::path ref = v.path("eval.reference");
    o.inputs["reference"] = input_record(ref);
    const auto a = data::load_image_set(dd), b = data::load_image_set(ref);
    if (a.empty() || b.empty()) throw ContractError("FID needs non-empty image sets");
    const metrics::RandomConvEncoder enc(derive_seed(rc.seed, "fid_encoder"), {a.front().dim(1), {16, 32, 64}});
    const double fid = metrics::fid_between(a, b, enc);
    write_json(rc.output_dir / "eval_report.json",
               {{"format", "gammadesk.eval_report"},
                {"version", 1},
                {"task", "fid"},
                {"dataset_fingerprint", data::dataset_fingerprint(dd)},
                {"reference_fingerprint", data::dataset_fingerprint(ref)},
                {"encoder_seed", derive_seed(rc.seed, "fid_encoder")},
                {"fid", fid}});
    o.metrics["fid"] = fid;
    log << "FID " << fid << "\n";
  } else {
    const fs::path mdir = model_dir(v.path("eval.model"), "detector.json");
    o.inputs["model"] = {{"path", mdir.generic_string()}};
    det::DetectorModel model = det::load_detector(mdir);
    const double score = v.real("eval.score_threshold"), nms = v.real("eval.nms_threshold"),
                 iou = v.real("eval.iou_threshold");
    const auto report = det::evaluate_detector(model, data::load_detection_set(dd), score, nms, iou);
    write_json(rc.output_dir / "eval_report.json", detection_report(report, model, dd, score, nms, iou));
    write_detection_records(rc.output_dir / "detections.jsonl", data::read_manifest(dd), report);
    o.metrics["map"] = report.result.map;
    log << "mAP@" << iou << " " << report.result.map << "\n";
  }
  o.outputs["report"] = "eval_report.json";
  return o;
}

// ---- attn-maps -------------------------------------------------------------

Outcome attn_cmd(const RunConfig& rc, const Values& v, std::ostream& log) {
  Outcome o;
  const fs::path mdir = model_dir(v.path("attn.model"), "detector.json");
  const fs::path dd = v.path("attn.data");
  o.inputs["model"] = {{"path", mdir.generic_string()}};
  o.inputs["data"] = input_record(dd);
  det::DetectorModel model = det::load_detector(mdir);
  if (!model.attention()) throw ContractError("attn-maps needs a detector trained with SEA");
  const auto images = data::load_image_set(dd);
  const std::size_t n = std::min(v.size("attn.count"), images.size());
  fs::create_directories(rc.output_dir / "attn");
  json files = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape;
    tape.freeze_all();
    const Tensor& img = images[i];
    auto f = model.features(tape, tape.constant(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})));
    std::ostringstream stem;
    stem << std::setw(6) << std::setfill('0') << i;
    sea::export_attention_heatmap(f.attention->at_map.value(), img, rc.output_dir / "attn" / stem.str());
    files.push_back("attn/" + stem.str() + "_heat.png");
    files.push_back("attn/" + stem.str() + "_overlay.png");
  }
  o.outputs["files"] = files;
  o.metrics["gamma"] = model.gamma();
  log << "wrote " << n << " attention maps\n";
  return o;
}

// ---- run bookkeeping ---------------------------------------------------------

class OutputLock {
 public:
  explicit OutputLock(fs::path path) : path_(std::move(path)) {
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw std::runtime_error("output directory is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

void apply_thread_cap() {
  const char* env = std::getenv("GAMMA_DESK_THREADS");
  if (!env || !*env) return;
  const std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos || std::stoul(s) == 0)
    throw UsageError("GAMMA_DESK_THREADS must be a positive integer, got '" + s + "'");
  Eigen::setNbThreads(static_cast<int>(std::stoul(s)));
}

}  // namespace

int execute(const RunConfig& rc, std::ostream& log) {
  if (rc.output_dir.empty()) throw UsageError("an output directory is required (--out)");
  fs::create_directories(rc.output_dir);
  std::unique_ptr<OutputLock> lock;
  try {
    lock = std::make_unique<OutputLock>(rc.output_dir / ".lock");
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
  fs::remove(rc.output_dir / "FAILED");
  {
    std::ofstream snap(rc.output_dir / "config.resolved.ini", std::ios::binary | std::ios::trunc);
    snap << render_config(rc);
  }

  const Values v{rc.values};
  json summary = {{"format", "gammadesk.summary"}, {"version", 1}, {"subcommand", rc.subcommand}, {"seed", rc.seed}};
  try {
    Outcome o;
    const std::string& s = rc.subcommand;
    if (s == "synth-data")
      o = synth_data(rc, v, log);
    else if (s == "train-cyclegan")
      o = train_cyclegan_cmd(rc, v, log);
    else if (s == "translate")
      o = translate_cmd(rc, v, log);
    else if (s == "mix")
      o = mix_cmd(rc, v, log);
    else if (s == "train-detector")
      o = train_detector_cmd(rc, v, log);
    else if (s == "eval")
      o = eval_cmd(rc, v, log, v.text("eval.task"));
    else if (s == "fid")
      o = eval_cmd(rc, v, log, "fid");
    else if (s == "attn-maps")
      o = attn_cmd(rc, v, log);
    else
      throw UsageError("unknown subcommand '" + s + "'");
    summary["status"] = "success";
    summary["inputs"] = o.inputs;
    summary["metrics"] = o.metrics;
    summary["outputs"] = o.outputs;
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    summary["status"] = "failed";
    summary["error"] = e.what();
    std::ofstream(rc.output_dir / "FAILED") << e.what() << '\n';
    log << "error: " << e.what() << "\n";
  }
  std::ofstream(rc.output_dir / "summary.jsonl", std::ios::binary | std::ios::trunc) << summary.dump() << '\n';
  return summary["status"] == "success" ? 0 : 1;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"gammadesk: underwater debris augmentation and attentive detection"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool no_sea = false;
    std::string task;
  };
  Common common;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth-data", "generate synthetic datasets"},
      {"train-cyclegan", "train the terrestrial-to-underwater translator"},
      {"translate", "apply a trained generator to a dataset"},
      {"mix", "build the existing/augmented training mix"},
      {"train-detector", "train the attentive two-stage detector"},
      {"eval", "score a detector (mAP) or two image sets (FID)"},
      {"fid", "shorthand for eval --task fid"},
      {"attn-maps", "export self-attention heatmaps"},
  };
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("-c,--config", common.config, "key=value config file with [sections]");
    sub->add_option("-o,--out", common.output, "output directory")->required();
    sub->add_option("--seed", common.seed, "root seed (overrides run.seed)");
    sub->add_option("--set", common.overrides, "section.key=value override (repeatable)");
    if (name == "train-detector") sub->add_flag("--no-sea", common.no_sea, "disable the self-attention block");
    if (name == "eval") sub->add_option("--task", common.task, "detect or fid")->check(CLI::IsMember({"detect", "fid"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help on a subcommand
      for (CLI::App* sub : app.get_subcommands())
        if (sub->parsed()) {
          out << sub->help();
          return 0;
        }
      out << app.help();
      return 0;
    }
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    apply_thread_cap();
    const std::string sub = app.get_subcommands().front()->get_name();
    std::vector<std::string> overrides = common.overrides;
    if (common.seed) overrides.push_back("run.seed=" + std::to_string(*common.seed));
    if (common.no_sea) overrides.push_back("detector.use_sea=false");
    if (!common.task.empty()) overrides.push_back("eval.task=" + common.task);
    std::optional<fs::path> cfg;
    if (!common.config.empty()) cfg = common.config;
    const RunConfig rc = resolve_config(sub, cfg, overrides, common.output);
    return execute(rc, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace gammadesk::cli
