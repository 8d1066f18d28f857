#include "demist/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>

#include "demist/dataset.hpp"

namespace fs = std::filesystem;

namespace demist {

namespace {

// Empty string means "not set" for optional path-like keys.
KeyValueConfig with_defaults(const KeyValueConfig& user, const KeyValueConfig& defaults, const std::string& context) {
  std::set<std::string> allowed;
  for (const auto& [key, value] : defaults.entries()) allowed.insert(key);
  user.check_keys(allowed, context);
  KeyValueConfig resolved = defaults;
  resolved.merge(user);
  return resolved;
}

fs::path prepare_out(const KeyValueConfig& cfg) {
  const fs::path out = cfg.require_string("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (!fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
  cfg.save(out / "resolved.cfg");
  return out;
}

std::string fmt(double v, const char* pattern = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::size_t get_size(const KeyValueConfig& cfg, const std::string& key) {
  const auto v = cfg.get_int(key, 0);
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

// ------------------------------------------------------------ shared sections

void add_synth_defaults(KeyValueConfig& kv) {
  const SynthParams p;
  kv.set("drop_count_min", p.drop_count_min);
  kv.set("drop_count_max", p.drop_count_max);
  kv.set("drop_radius_min", p.drop_radius_min);
  kv.set("drop_radius_max", p.drop_radius_max);
  kv.set("drop_aspect_min", p.drop_aspect_min);
  kv.set("drop_aspect_max", p.drop_aspect_max);
  kv.set("drop_brightness_min", p.drop_brightness_min);
  kv.set("drop_brightness_max", p.drop_brightness_max);
  kv.set("drop_minify", p.drop_minify);
  kv.set("drop_blur", p.drop_blur);
  kv.set("drop_rim", p.drop_rim);
  kv.set("drop_highlight", p.drop_highlight);
  kv.set("mist_grid", p.mist_grid);
  kv.set("t_min", p.t_min);
  kv.set("mist_density_min", p.mist_density_min);
  kv.set("airlight_min", p.airlight_min);
  kv.set("airlight_max", p.airlight_max);
  kv.set("soft_mask", p.soft_mask);
  kv.set("spatial_airlight", p.spatial_airlight);
}

SynthParams synth_params_from(const KeyValueConfig& kv) {
  SynthParams p;
  p.drop_count_min = static_cast<int>(kv.get_int("drop_count_min", p.drop_count_min));
  p.drop_count_max = static_cast<int>(kv.get_int("drop_count_max", p.drop_count_max));
  p.drop_radius_min = kv.get_double("drop_radius_min", p.drop_radius_min);
  p.drop_radius_max = kv.get_double("drop_radius_max", p.drop_radius_max);
  p.drop_aspect_min = kv.get_double("drop_aspect_min", p.drop_aspect_min);
  p.drop_aspect_max = kv.get_double("drop_aspect_max", p.drop_aspect_max);
  p.drop_brightness_min = kv.get_double("drop_brightness_min", p.drop_brightness_min);
  p.drop_brightness_max = kv.get_double("drop_brightness_max", p.drop_brightness_max);
  p.drop_minify = kv.get_double("drop_minify", p.drop_minify);
  p.drop_blur = static_cast<int>(kv.get_int("drop_blur", p.drop_blur));
  p.drop_rim = kv.get_double("drop_rim", p.drop_rim);
  p.drop_highlight = kv.get_double("drop_highlight", p.drop_highlight);
  p.mist_grid = get_size(kv, "mist_grid");
  p.t_min = kv.get_double("t_min", p.t_min);
  p.mist_density_min = kv.get_double("mist_density_min", p.mist_density_min);
  p.airlight_min = kv.get_double("airlight_min", p.airlight_min);
  p.airlight_max = kv.get_double("airlight_max", p.airlight_max);
  p.soft_mask = kv.get_bool("soft_mask", p.soft_mask);
  p.spatial_airlight = kv.get_bool("spatial_airlight", p.spatial_airlight);
  p.validate();
  return p;
}

void add_augment_defaults(KeyValueConfig& kv) {
  const AugmentConfig a;
  kv.set("augment", true);
  kv.set("flip_prob", a.flip_prob);
  kv.set("rotate_prob", a.rotate_prob);
  kv.set("brightness", a.brightness);
  kv.set("contrast_min", a.contrast_min);
  kv.set("contrast_max", a.contrast_max);
  kv.set("gamma_min", a.gamma_min);
  kv.set("gamma_max", a.gamma_max);
}

AugmentConfig augment_from(const KeyValueConfig& kv) {
  AugmentConfig a;
  a.flip_prob = kv.get_double("flip_prob", a.flip_prob);
  a.rotate_prob = kv.get_double("rotate_prob", a.rotate_prob);
  a.brightness = kv.get_double("brightness", a.brightness);
  a.contrast_min = kv.get_double("contrast_min", a.contrast_min);
  a.contrast_max = kv.get_double("contrast_max", a.contrast_max);
  a.gamma_min = kv.get_double("gamma_min", a.gamma_min);
  a.gamma_max = kv.get_double("gamma_max", a.gamma_max);
  a.validate();
  return a;
}

Classifier<float> load_classifier(const fs::path& dir) {
  const auto cfg = classifier_config_from(KeyValueConfig::load(dir / "model.cfg"));
  Classifier<float> classifier(cfg, 0);
  auto params = classifier.parameters();
  load_params(dir / "model.ckpt", params);
  return classifier;
}

struct LoadedGenerator {
  Generator<float> generator;
  std::string variant;
};

LoadedGenerator load_generator(const fs::path& dir) {
  auto kv = KeyValueConfig::load(dir / "model.cfg");
  const std::string variant = kv.get_string("variant", "full");
  kv.erase("variant");
  Generator<float> generator(generator_config_from(kv), 0);
  auto params = generator.parameters();
  load_params(dir / "model.ckpt", params);
  return {std::move(generator), variant};
}

std::optional<Classifier<float>> optional_classifier(const KeyValueConfig& cfg, bool needed, const std::string& what) {
  const std::string dir = cfg.get_string("classifier", "");
  if (dir.empty()) {
    if (needed) throw std::runtime_error(what + " uses CAM input; set 'classifier' to a trained classifier directory");
    return std::nullopt;
  }
  return load_classifier(dir);
}

}  // namespace

// ------------------------------------------------------------ options

KeyValueConfig resolve_config(const CommandOptions& options) {
  KeyValueConfig cfg;
  if (options.config) cfg = KeyValueConfig::load(*options.config);
  for (const auto& item : options.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
    cfg.set(item.substr(0, eq), item.substr(eq + 1));
  }
  if (options.seed) cfg.set("seed", std::to_string(*options.seed));
  if (options.variant) cfg.set("variant", *options.variant);
  if (options.out) cfg.set("out", options.out->string());
  return cfg;
}

// ------------------------------------------------------------ synth

void cmd_synth(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  defaults.set("out", "");
  defaults.set("seed", "0");
  defaults.set("height", 64);
  defaults.set("width", 64);
  defaults.set("train_count", 64);
  defaults.set("val_count", 8);
  defaults.set("test_count", 8);
  defaults.set("backgrounds", "");
  defaults.set("proportions", "0.2,0.4,0.4");
  add_synth_defaults(defaults);
  const auto cfg = with_defaults(user, defaults, "synth");

  const std::uint64_t seed = cfg.get_u64("seed", 0);
  const std::size_t h = get_size(cfg, "height"), w = get_size(cfg, "width");
  if (h == 0 || w == 0) throw ConfigError("synth: height and width must be positive");
  const auto props = cfg.get_doubles("proportions", {});
  if (props.size() != 3) throw ConfigError("synth: proportions needs three comma-separated values");
  const ClassProportions proportions{props[0], props[1], props[2]};
  const SynthParams params = synth_params_from(cfg);

  std::vector<ImageRGB> supplied;
  const std::string bg_dir = cfg.get_string("backgrounds", "");
  if (!bg_dir.empty()) {
    for (const auto& path : list_pngs(bg_dir)) supplied.push_back(resize(load_png(path), h, w, Interpolation::bicubic));
    if (supplied.empty()) throw std::runtime_error("synth: no PNG backgrounds in " + bg_dir);
  }

  const fs::path out = prepare_out(cfg);
  std::map<std::string, ClassLabel> labels;
  const std::size_t counts[3] = {get_size(cfg, "train_count"), get_size(cfg, "val_count"), get_size(cfg, "test_count")};
  std::size_t global = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    if (counts[s] == 0) continue;
    std::vector<ImageRGB> backgrounds;
    for (std::size_t i = 0; i < counts[s]; ++i, ++global) {
      if (supplied.empty()) {
        backgrounds.push_back(procedural_background(h, w, mix_seed(mix_seed(seed, 101 + s), i)));
      } else {
        backgrounds.push_back(supplied[global % supplied.size()]);
      }
    }
    const auto samples = make_dataset(backgrounds, params, proportions, mix_seed(seed, s));
    write_split(out, kSplitNames[s], samples, labels);
    log << "synth: wrote " << samples.size() << " pairs to " << (out / kSplitNames[s]).string() << '\n';
  }
  write_labels(out, labels);
}

// ------------------------------------------------------------ train-classifier

void cmd_train_classifier(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  const ClassifierTrainConfig tc;
  defaults.set("out", "");
  defaults.set("data", "");
  defaults.set("seed", "0");
  defaults.set("steps", tc.steps);
  defaults.set("batch_size", tc.batch_size);
  defaults.set("lr", tc.lr);
  defaults.set("base_channels", ClassifierConfig{}.base_channels);
  add_augment_defaults(defaults);
  const auto cfg = with_defaults(user, defaults, "train-classifier");

  ClassifierTrainConfig train_cfg;
  train_cfg.steps = get_size(cfg, "steps");
  train_cfg.batch_size = get_size(cfg, "batch_size");
  train_cfg.lr = cfg.get_double("lr", tc.lr);
  train_cfg.use_augment = cfg.get_bool("augment", true);
  train_cfg.augment = augment_from(cfg);
  train_cfg.seed = cfg.get_u64("seed", 0);
  ClassifierConfig net_cfg;
  net_cfg.base_channels = get_size(cfg, "base_channels");
  net_cfg.validate();

  // Only the train split is used; test images never reach the classifier.
  const auto data = load_split(cfg.require_string("data"), "train");
  const fs::path out = prepare_out(cfg);
  Classifier<float> classifier(net_cfg, train_cfg.seed);
  std::ofstream csv(out / "classifier_log.csv", std::ios::trunc);
  csv << "epoch,step,mean_loss,accuracy,macro_f1\n";
  train_classifier(classifier, data, train_cfg, &log, [&](const ClassifierEpochRecord& r) {
    csv << r.epoch << ',' << r.step << ',' << fmt(r.mean_loss, "%.9g") << ',' << fmt(r.train.accuracy) << ','
        << fmt(r.train.macro_f1) << '\n';
    log << "epoch " << r.epoch << " step " << r.step << " loss " << fmt(r.mean_loss) << " accuracy "
        << fmt(r.train.accuracy) << " macro_f1 " << fmt(r.train.macro_f1) << '\n';
  });
  save_params(out / "model.ckpt", classifier.parameters());
  to_config(net_cfg).save(out / "model.cfg");
}

// ------------------------------------------------------------ train

void cmd_train(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  const GeneratorTrainConfig tc;
  const GeneratorConfig gc;
  defaults.set("out", "");
  defaults.set("data", "");
  defaults.set("classifier", "");
  defaults.set("seed", "0");
  defaults.set("variant", "full");
  defaults.set("steps", tc.steps);
  defaults.set("batch_size", tc.batch_size);
  defaults.set("lr", tc.lr);
  defaults.set("lambda1", tc.weights.lambda1);
  defaults.set("lambda2", tc.weights.lambda2);
  defaults.set("validate", true);
  defaults.set("base_channels", gc.base_channels);
  defaults.set("reduction", gc.reduction);
  defaults.set("spatial_kernel", gc.spatial_kernel);
  defaults.set("attention_order", "channel_first");
  defaults.set("featnet_seed", std::to_string(FeatureNetSpec{}.seed));
  defaults.set("featnet_weights", "");
  add_augment_defaults(defaults);
  const auto cfg = with_defaults(user, defaults, "train");

  const Variant variant = parse_variant(cfg.get_string("variant", "full"));
  KeyValueConfig net_kv;
  for (const char* key : {"base_channels", "reduction", "spatial_kernel", "attention_order"}) {
    net_kv.set(key, cfg.get_string(key, ""));
  }
  const GeneratorConfig net_cfg = build_ablation(generator_config_from(net_kv), variant);

  GeneratorTrainConfig train_cfg;
  train_cfg.steps = get_size(cfg, "steps");
  train_cfg.batch_size = get_size(cfg, "batch_size");
  train_cfg.lr = cfg.get_double("lr", tc.lr);
  train_cfg.weights = {cfg.get_double("lambda1", 1.0), cfg.get_double("lambda2", 0.05)};
  train_cfg.weights.validate();
  train_cfg.use_augment = cfg.get_bool("augment", true);
  train_cfg.augment = augment_from(cfg);
  train_cfg.seed = cfg.get_u64("seed", 0);

  FeatureNetSpec feat_spec;
  feat_spec.seed = cfg.get_u64("featnet_seed", feat_spec.seed);
  if (const auto w = cfg.get_string("featnet_weights", ""); !w.empty()) feat_spec.weights_path = fs::path(w);
  const FeatureNet<float> featnet(feat_spec);

  const auto classifier = optional_classifier(cfg, net_cfg.use_cam, "variant " + std::string(variant_name(variant)));
  const fs::path data_root = cfg.require_string("data");
  const auto train = load_split(data_root, "train");
  std::vector<PairedSample> val;
  if (cfg.get_bool("validate", true) && fs::is_directory(data_root / "val" / "degraded")) {
    val = load_split(data_root, "val");
  }

  const fs::path out = prepare_out(cfg);
  Generator<float> generator(net_cfg, train_cfg.seed);
  const Classifier<float>* cam_source = net_cfg.use_cam ? &*classifier : nullptr;
  const auto records = train_generator(generator, cam_source, featnet, train, val, train_cfg,
                                       [&](const TrainLogRecord& r) {
                                         if (r.has_validation) {
                                           log << "step " << r.step << " loss " << fmt(r.loss_total) << " val_psnr "
                                               << fmt(r.val_psnr) << " val_ssim " << fmt(r.val_ssim) << '\n';
                                         }
                                       });
  std::ofstream csv(out / "train_log.csv", std::ios::trunc);
  write_train_log(csv, records);
  save_params(out / "model.ckpt", generator.parameters());
  auto model_cfg = to_config(net_cfg);
  model_cfg.set("variant", std::string(variant_name(variant)));
  model_cfg.save(out / "model.cfg");
  log << "train: " << variant_name(variant) << " finished after " << records.size() << " steps\n";
}

// ------------------------------------------------------------ restore

void cmd_restore(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  defaults.set("out", "");
  defaults.set("model", "");
  defaults.set("classifier", "");
  defaults.set("input", "");
  defaults.set("seed", "0");
  const auto cfg = with_defaults(user, defaults, "restore");

  auto loaded = load_generator(cfg.require_string("model"));
  const auto classifier = optional_classifier(cfg, loaded.generator.config().use_cam, "this model");
  const auto inputs = list_pngs(cfg.require_string("input"));
  const fs::path out = prepare_out(cfg);
  const Classifier<float>* cam_source = classifier ? &*classifier : nullptr;
  for (const auto& path : inputs) {
    const auto restored = restore_all(loaded.generator, cam_source, {load_png(path)});
    save_png(restored.front(), out / path.filename());
  }
  log << "restore: wrote " << inputs.size() << " images to " << out.string() << '\n';
}

// ------------------------------------------------------------ eval

void cmd_eval(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  defaults.set("out", "");
  defaults.set("data", "");
  defaults.set("split", "test");
  defaults.set("models", "");
  defaults.set("classifier", "");
  defaults.set("variant", "");
  defaults.set("baselines", "degraded");
  defaults.set("seed", "0");
  const auto cfg = with_defaults(user, defaults, "eval");

  const std::string split = cfg.get_string("split", "test");
  const auto data = load_split(cfg.require_string("data"), split);

  // Columns: baselines first, then generator variants in canonical order.
  struct Column {
    std::string name;
    std::vector<RestorationScores> scores;
  };
  std::vector<Column> columns;
  std::string baselines = cfg.get_string("baselines", "");
  std::size_t start = 0;
  while (start < baselines.size()) {
    const auto comma = baselines.find(',', start);
    const std::string name = baselines.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    start = comma == std::string::npos ? baselines.size() : comma + 1;
    if (name.empty()) continue;
    if (name != "degraded" && name != "gt") throw ConfigError("eval: unknown baseline '" + name + "'");
    Column col{name, {}};
    for (const auto& s : data) {
      const ImageRGB& candidate = name == "degraded" ? s.degraded : s.gt;
      col.scores.push_back({psnr(candidate, s.gt), ssim(candidate, s.gt)});
    }
    columns.push_back(std::move(col));
  }

  const std::string models = cfg.get_string("models", "");
  const std::string only = cfg.get_string("variant", "");
  if (!only.empty()) parse_variant(only);
  if (!models.empty()) {
    std::optional<Classifier<float>> classifier;
    for (Variant v : kAllVariants) {
      const std::string name(variant_name(v));
      if (!only.empty() && only != name) continue;
      const fs::path dir = fs::path(models) / name;
      if (!fs::exists(dir / "model.cfg")) {
        if (!only.empty()) throw std::runtime_error("eval: no trained model at " + dir.string());
        continue;
      }
      auto loaded = load_generator(dir);
      if (loaded.generator.config().use_cam && !classifier) {
        classifier = optional_classifier(cfg, true, "variant " + name);
      }
      columns.push_back({name, evaluate_generator(loaded.generator, classifier ? &*classifier : nullptr, data)});
    }
  }
  if (columns.empty()) throw ConfigError("eval: nothing to evaluate (set 'models' or 'baselines')");

  const fs::path out = prepare_out(cfg);
  std::ofstream csv(out / "metrics.csv", std::ios::trunc);
  csv << "id,psnr_db,ssim,split,variant\n";
  std::vector<std::pair<double, double>> means;
  for (const auto& col : columns) {
    double p = 0.0, s = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      csv << data[i].id << ',' << fmt(col.scores[i].psnr) << ',' << fmt(col.scores[i].ssim) << ',' << split << ','
          << col.name << '\n';
      p += col.scores[i].psnr;
      s += col.scores[i].ssim;
    }
    means.emplace_back(p / static_cast<double>(data.size()), s / static_cast<double>(data.size()));
    csv << "mean," << fmt(means.back().first) << ',' << fmt(means.back().second) << ',' << split << ',' << col.name
        << '\n';
  }

  std::ofstream report(out / "ablation.csv", std::ios::trunc);
  report << "metric";
  for (const auto& col : columns) report << ',' << col.name;
  report << "\npsnr_db";
  for (const auto& m : means) report << ',' << fmt(m.first);
  report << "\nssim";
  for (const auto& m : means) report << ',' << fmt(m.second);
  report << '\n';

  for (std::size_t i = 0; i < columns.size(); ++i) {
    log << "eval " << split << ' ' << columns[i].name << ": psnr " << fmt(means[i].first, "%.4f") << " dB, ssim "
        << fmt(means[i].second, "%.4f") << '\n';
  }
}

// ------------------------------------------------------------ cam

void cmd_cam(const KeyValueConfig& user, std::ostream& log) {
  KeyValueConfig defaults;
  defaults.set("out", "");
  defaults.set("classifier", "");
  defaults.set("input", "");
  defaults.set("target", "");
  defaults.set("seed", "0");
  const auto cfg = with_defaults(user, defaults, "cam");

  const auto classifier = load_classifier(cfg.require_string("classifier"));
  std::optional<int> target;
  if (const auto t = cfg.get_string("target", ""); !t.empty()) target = static_cast<int>(parse_label(t));
  const auto inputs = list_pngs(cfg.require_string("input"));
  const fs::path out = prepare_out(cfg);
  std::ofstream csv(out / "cam.csv", std::ios::trunc);
  csv << "file,p_clean,p_raindrop_only,p_mist_and_raindrop,predicted\n";
  for (const auto& path : inputs) {
    const auto result = compute_cam(classifier, load_png(path), target);
    save_gray_png(result.attention, out / (path.stem().string() + "_cam.png"));
    csv << path.filename().string() << ',' << fmt(result.probabilities[0]) << ',' << fmt(result.probabilities[1])
        << ',' << fmt(result.probabilities[2]) << ',' << label_name(static_cast<ClassLabel>(result.predicted_class))
        << '\n';
  }
  log << "cam: wrote " << inputs.size() << " attention maps to " << out.string() << '\n';
}

// ------------------------------------------------------------ dispatch

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth", "train-classifier", "train", "restore", "eval", "cam"};
  return names;
}

void run_command(const std::string& name, const KeyValueConfig& config, std::ostream& log) {
  if (name == "synth") return cmd_synth(config, log);
  if (name == "train-classifier") return cmd_train_classifier(config, log);
  if (name == "train") return cmd_train(config, log);
  if (name == "restore") return cmd_restore(config, log);
  if (name == "eval") return cmd_eval(config, log);
  if (name == "cam") return cmd_cam(config, log);
  throw std::invalid_argument("unknown command '" + name + "'");
}

}  // namespace demist
