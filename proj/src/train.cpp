#include "demist/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace demist {

// ------------------------------------------------------------ Adam

void AdamConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("adam: learning rate must be non-negative");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam: betas must lie in (0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be positive");
}

template <typename T>
Adam<T>::Adam(ParamList<T> params, const AdamConfig& config) : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& p : params_) {
    if (!p.value.has_grad()) throw std::runtime_error("adam: parameter '" + p.name + "' has no gradient");
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto values = params_[i].value.mutable_data();
    const auto grad = params_[i].value.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double update = config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
      values[j] = static_cast<T>(values[j] - update);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

// ------------------------------------------------------------ augmentation

void AugmentConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(flip_prob) || !prob(rotate_prob)) throw std::invalid_argument("augment: probabilities must lie in [0, 1]");
  if (!(brightness >= 0.0 && brightness < 1.0)) throw std::invalid_argument("augment: brightness must lie in [0, 1)");
  if (!(contrast_min > 0.0 && contrast_min <= contrast_max)) {
    throw std::invalid_argument("augment: contrast range must be positive and ordered");
  }
  if (!(gamma_min > 0.0 && gamma_min <= gamma_max)) {
    throw std::invalid_argument("augment: gamma range must be positive and ordered");
  }
}

AugmentDraw draw_augment(const AugmentConfig& config, Rng& rng) {
  AugmentDraw d;
  // Every field consumes a draw so the stream stays aligned across configs.
  d.flip = rng.bernoulli(config.flip_prob);
  d.rotate = rng.bernoulli(config.rotate_prob);
  d.brightness = rng.uniform(-config.brightness, config.brightness);
  d.contrast = rng.uniform(config.contrast_min, config.contrast_max);
  d.gamma = rng.uniform(config.gamma_min, config.gamma_max);
  if (config.brightness == 0.0) d.brightness = 0.0;
  if (config.contrast_min == config.contrast_max) d.contrast = config.contrast_min;
  if (config.gamma_min == config.gamma_max) d.gamma = config.gamma_min;
  return d;
}

ImageRGB apply_augment(const ImageRGB& image, const AugmentDraw& draw) {
  ImageRGB out = image;
  if (draw.flip) out = flip_horizontal(out);
  if (draw.rotate) out = rotate_180(out);
  const bool affine = draw.contrast != 1.0 || draw.brightness != 0.0;
  const bool power = draw.gamma != 1.0;
  if (affine || power) {
    for (auto& v : out.pixels) {
      double x = v;
      if (affine) x = std::clamp((x - 0.5) * draw.contrast + 0.5 + draw.brightness, 0.0, 1.0);
      if (power) x = std::pow(x, draw.gamma);
      v = static_cast<float>(x);
    }
  }
  out.clamp();
  return out;
}

std::pair<ImageRGB, ImageRGB> augment(const ImageRGB& degraded, const ImageRGB& gt, const AugmentConfig& config,
                                      std::uint64_t seed) {
  config.validate();
  if (!degraded.same_size(gt)) throw ShapeError("augment: degraded and gt differ in size");
  Rng rng(seed);
  const AugmentDraw draw = draw_augment(config, rng);
  return {apply_augment(degraded, draw), apply_augment(gt, draw)};
}

std::vector<PairedSample> to_pairs(const std::vector<DegradationSample>& samples, const std::string& id_prefix) {
  std::vector<PairedSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    out.push_back({id_prefix + buf, samples[i].degraded, samples[i].background, samples[i].label});
  }
  return out;
}

// ------------------------------------------------------------ shared helpers

namespace {

class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch, Rng& rng) : count_(count), batch_(batch), rng_(rng) {
    if (count == 0) throw std::invalid_argument("training set is empty");
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
  }

  /// Next batch of indices; `epoch_done` is set when this batch ends a pass.
  std::vector<std::size_t> next(bool& epoch_done) {
    if (cursor_ == order_.size()) reshuffle();
    const std::size_t end = std::min(order_.size(), cursor_ + batch_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    epoch_done = cursor_ == order_.size();
    if (epoch_done) ++epoch_;
    return out;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    order_.resize(count_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = count_; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
  }

  std::size_t count_, batch_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

std::size_t even_up(std::size_t n) { return n + (n % 2); }

}  // namespace

// ------------------------------------------------------------ classifier training

ClassificationStats classification_stats(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("classification_stats: size mismatch");
  ClassificationStats s;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] > 2 || predicted[i] < 0 || predicted[i] > 2) {
      throw std::invalid_argument("classification_stats: label out of range");
    }
    ++s.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    if (truth[i] == predicted[i]) ++correct;
  }
  s.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  std::size_t f1_count = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double tp = static_cast<double>(s.confusion[c][c]);
    double fp = 0.0, fn = 0.0;
    for (std::size_t o = 0; o < 3; ++o) {
      if (o == c) continue;
      fp += static_cast<double>(s.confusion[o][c]);
      fn += static_cast<double>(s.confusion[c][o]);
    }
    const double denom = 2.0 * tp + fp + fn;
    if (denom > 0.0) {
      f1_sum += 2.0 * tp / denom;
      ++f1_count;
    }
  }
  s.macro_f1 = f1_count ? f1_sum / static_cast<double>(f1_count) : 0.0;
  return s;
}

template <typename T>
std::vector<int> predict_classes(const Classifier<T>& classifier, const std::vector<ImageRGB>& images,
                                 std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<int> out;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    const std::vector<ImageRGB> batch(images.begin() + static_cast<std::ptrdiff_t>(start),
                                      images.begin() + static_cast<std::ptrdiff_t>(end));
    const auto logits = classifier.forward(images_to_tensor<T>(batch)).logits;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      const auto row = logits.data().subspan(n * 3, 3);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

template std::vector<int> predict_classes(const Classifier<float>&, const std::vector<ImageRGB>&, std::size_t);
template std::vector<int> predict_classes(const Classifier<double>&, const std::vector<ImageRGB>&, std::size_t);

ClassifierTrainResult train_classifier(Classifier<float>& classifier, const std::vector<PairedSample>& data,
                                       const ClassifierTrainConfig& config, std::ostream* log,
                                       const std::function<void(const ClassifierEpochRecord&)>& on_epoch) {
  if (config.use_augment) config.augment.validate();
  std::array<std::size_t, 3> counts{};
  std::vector<ImageRGB> images;
  std::vector<int> truth;
  for (const auto& s : data) {
    ++counts[static_cast<std::size_t>(s.label)];
    images.push_back(s.degraded);
    truth.push_back(static_cast<int>(s.label));
  }
  for (std::size_t c = 0; c < 3; ++c) {
    if (counts[c] == 0 && log) {
      *log << "warning: class '" << label_name(static_cast<ClassLabel>(c))
           << "' is absent from the classifier training data\n";
    }
  }

  Rng rng(config.seed);
  BatchSampler sampler(data.size(), config.batch_size, rng);
  Adam<float> adam(classifier.parameters(), AdamConfig{config.lr});
  ClassifierTrainResult result;
  double epoch_loss = 0.0;
  std::size_t epoch_steps = 0;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    bool epoch_done = false;
    const auto batch = sampler.next(epoch_done);
    std::vector<ImageRGB> inputs;
    std::vector<int> labels;
    for (std::size_t idx : batch) {
      if (config.use_augment) {
        const AugmentDraw draw = draw_augment(config.augment, rng);
        inputs.push_back(apply_augment(images[idx], draw));
      } else {
        inputs.push_back(images[idx]);
      }
      labels.push_back(truth[idx]);
    }
    const auto logits = classifier.forward(images_to_tensor<float>(inputs)).logits;
    auto loss = cross_entropy(logits, std::span<const int>(labels));
    adam.zero_grad();
    loss.backward();
    adam.step();
    result.step_losses.push_back(loss.item());
    epoch_loss += loss.item();
    ++epoch_steps;

    if (epoch_done || step == config.steps) {
      ClassifierEpochRecord rec;
      rec.epoch = sampler.epoch() + (epoch_done ? 0 : 1);
      rec.step = step;
      rec.mean_loss = epoch_loss / static_cast<double>(epoch_steps);
      rec.train = classification_stats(truth, predict_classes(classifier, images));
      result.epochs.push_back(rec);
      if (on_epoch) on_epoch(rec);
      epoch_loss = 0.0;
      epoch_steps = 0;
    }
  }
  adam.zero_grad();
  return result;
}

// ------------------------------------------------------------ generator training

std::vector<ImageRGB> restore_all(const Generator<float>& generator, const Classifier<float>* cam_source,
                                  const std::vector<ImageRGB>& images) {
  const bool use_cam = generator.config().use_cam;
  if (use_cam && !cam_source) throw std::invalid_argument("generator uses CAM input but no classifier was supplied");
  std::vector<ImageRGB> out;
  out.reserve(images.size());
  for (const auto& image : images) {
    const std::size_t h = even_up(image.height), w = even_up(image.width);
    const ImageRGB padded = (h == image.height && w == image.width) ? image : pad_reflect(image, h, w);
    GrayImage cam;
    if (use_cam) cam = compute_cam(*cam_source, padded).attention;
    const ImageRGB restored = restore(generator, padded, use_cam ? &cam : nullptr);
    out.push_back((h == image.height && w == image.width) ? restored : crop(restored, image.height, image.width));
  }
  return out;
}

std::vector<RestorationScores> evaluate_generator(const Generator<float>& generator, const Classifier<float>* cam_source,
                                                  const std::vector<PairedSample>& data) {
  std::vector<ImageRGB> degraded;
  for (const auto& s : data) degraded.push_back(s.degraded);
  const auto restored = restore_all(generator, cam_source, degraded);
  std::vector<RestorationScores> scores;
  for (std::size_t i = 0; i < data.size(); ++i) {
    scores.push_back({psnr(restored[i], data[i].gt), ssim(restored[i], data[i].gt)});
  }
  return scores;
}

std::vector<TrainLogRecord> train_generator(Generator<float>& generator, const Classifier<float>* cam_source,
                                            const FeatureNet<float>& featnet, const std::vector<PairedSample>& train,
                                            const std::vector<PairedSample>& val, const GeneratorTrainConfig& config,
                                            const std::function<void(const TrainLogRecord&)>& on_record) {
  const bool use_cam = generator.config().use_cam;
  if (use_cam && !cam_source) throw std::invalid_argument("generator uses CAM input but no classifier was supplied");
  config.weights.validate();
  if (config.use_augment) config.augment.validate();

  Rng rng(config.seed);
  BatchSampler sampler(train.size(), config.batch_size, rng);
  Adam<float> adam(generator.parameters(), AdamConfig{config.lr});
  std::vector<TrainLogRecord> records;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    bool epoch_done = false;
    const auto batch = sampler.next(epoch_done);
    std::vector<ImageRGB> inputs, targets;
    for (std::size_t idx : batch) {
      if (config.use_augment) {
        const AugmentDraw draw = draw_augment(config.augment, rng);
        inputs.push_back(apply_augment(train[idx].degraded, draw));
        targets.push_back(apply_augment(train[idx].gt, draw));
      } else {
        inputs.push_back(train[idx].degraded);
        targets.push_back(train[idx].gt);
      }
    }
    std::vector<GrayImage> cams;
    if (use_cam) {
      for (auto& r : compute_cams(*cam_source, inputs)) cams.push_back(std::move(r.attention));
    }
    const auto input = images_to_tensor<float>(inputs, use_cam ? &cams : nullptr);
    const auto target = images_to_tensor<float>(targets);
    auto terms = total_loss(generator.forward(input), target, config.weights, featnet);
    adam.zero_grad();
    terms.total.backward();
    adam.step();

    TrainLogRecord rec;
    rec.step = step;
    rec.loss_total = terms.total.item();
    rec.loss_mse = terms.mse.item();
    rec.loss_per = terms.perceptual.item();
    if ((epoch_done || step == config.steps) && !val.empty()) {
      const auto scores = evaluate_generator(generator, cam_source, val);
      double p = 0.0, s = 0.0;
      for (const auto& sc : scores) {
        p += sc.psnr;
        s += sc.ssim;
      }
      rec.has_validation = true;
      rec.val_psnr = p / static_cast<double>(scores.size());
      rec.val_ssim = s / static_cast<double>(scores.size());
    }
    records.push_back(rec);
    if (on_record) on_record(rec);
  }
  adam.zero_grad();
  return records;
}

void write_train_log(std::ostream& os, const std::vector<TrainLogRecord>& records) {
  os << "step,loss_total,loss_mse,loss_per,val_psnr,val_ssim\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g", r.step, r.loss_total, r.loss_mse, r.loss_per);
    os << buf;
    if (r.has_validation) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.val_psnr, r.val_ssim);
      os << buf << '\n';
    } else {
      os << ",,\n";
    }
  }
}

}  // namespace demist
