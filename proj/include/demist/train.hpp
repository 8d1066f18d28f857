#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "demist/degradation.hpp"
#include "demist/losses.hpp"
#include "demist/networks.hpp"

namespace demist {

// ------------------------------------------------------------ Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Bias-corrected Adam over a fixed parameter list. Moments are kept in
/// double regardless of the parameter type.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, const AdamConfig& config);

  /// Applies one update from the current gradients. Throws when a parameter
  /// has no gradient; nothing is modified in that case.
  void step();
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const ParamList<T>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  ParamList<T> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// ------------------------------------------------------------ augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  double rotate_prob = 0.5;     // 180 degrees
  double brightness = 0.1;      // delta drawn from [-brightness, brightness]
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double gamma_min = 0.8;
  double gamma_max = 1.25;

  /// No geometric or photometric change.
  static AugmentConfig identity() { return {0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0}; }
  void validate() const;
};

struct AugmentDraw {
  bool flip = false;
  bool rotate = false;
  double brightness = 0.0;
  double contrast = 1.0;
  double gamma = 1.0;
};

AugmentDraw draw_augment(const AugmentConfig& config, Rng& rng);

/// Geometric part (flip, then 180 rotation) followed by
/// v' = clamp(clamp((v - 0.5) * contrast + 0.5 + brightness) ^ gamma).
ImageRGB apply_augment(const ImageRGB& image, const AugmentDraw& draw);

/// One draw applied identically to both images.
std::pair<ImageRGB, ImageRGB> augment(const ImageRGB& degraded, const ImageRGB& gt, const AugmentConfig& config,
                                      std::uint64_t seed);

// ------------------------------------------------------------ data

struct PairedSample {
  std::string id;
  ImageRGB degraded;
  ImageRGB gt;
  ClassLabel label = ClassLabel::clean;
};

std::vector<PairedSample> to_pairs(const std::vector<DegradationSample>& samples, const std::string& id_prefix = "");

// ------------------------------------------------------------ classifier training

struct ClassifierTrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  bool use_augment = true;
  AugmentConfig augment;
  std::uint64_t seed = 0;
};

struct ClassificationStats {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::array<std::array<std::size_t, 3>, 3> confusion{};  // [true][predicted]
};

/// Accuracy and macro-F1 over the three classes. A class with no true and no
/// predicted samples is left out of the F1 average.
ClassificationStats classification_stats(const std::vector<int>& truth, const std::vector<int>& predicted);

template <typename T>
std::vector<int> predict_classes(const Classifier<T>& classifier, const std::vector<ImageRGB>& images,
                                 std::size_t batch_size = 8);

struct ClassifierEpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double mean_loss = 0.0;
  ClassificationStats train;
};

struct ClassifierTrainResult {
  std::vector<double> step_losses;
  std::vector<ClassifierEpochRecord> epochs;
};

/// Cross-entropy training on the degraded images of `data`. An epoch is one
/// pass over a seeded permutation; statistics are computed at the end of
/// every epoch and after the final step. Missing classes are reported to
/// `log` and training continues.
ClassifierTrainResult train_classifier(Classifier<float>& classifier, const std::vector<PairedSample>& data,
                                       const ClassifierTrainConfig& config, std::ostream* log = nullptr,
                                       const std::function<void(const ClassifierEpochRecord&)>& on_epoch = {});

// ------------------------------------------------------------ generator training

struct GeneratorTrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  LossWeights weights;
  bool use_augment = true;
  AugmentConfig augment;
  std::uint64_t seed = 0;
};

struct TrainLogRecord {
  std::size_t step = 0;
  double loss_total = 0.0;
  double loss_mse = 0.0;
  double loss_per = 0.0;
  bool has_validation = false;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};

struct RestorationScores {
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Restores every degraded image of `data` (CAM from `cam_source` when the
/// generator uses it) and returns per-sample scores against gt.
std::vector<RestorationScores> evaluate_generator(const Generator<float>& generator, const Classifier<float>* cam_source,
                                                  const std::vector<PairedSample>& data);

std::vector<ImageRGB> restore_all(const Generator<float>& generator, const Classifier<float>* cam_source,
                                  const std::vector<ImageRGB>& images);

/// Adam training on lambda1 * MSE + lambda2 * perceptual. Each step draws a
/// batch, augments every pair, computes the CAM of the augmented degraded
/// image with the frozen classifier, and updates the generator. Validation
/// PSNR/SSIM on `val` are attached to the last record of every epoch.
std::vector<TrainLogRecord> train_generator(Generator<float>& generator, const Classifier<float>* cam_source,
                                            const FeatureNet<float>& featnet, const std::vector<PairedSample>& train,
                                            const std::vector<PairedSample>& val, const GeneratorTrainConfig& config,
                                            const std::function<void(const TrainLogRecord&)>& on_record = {});

/// CSV with header step,loss_total,loss_mse,loss_per,val_psnr,val_ssim; the
/// validation fields are empty on steps without validation.
void write_train_log(std::ostream& os, const std::vector<TrainLogRecord>& records);

}  // namespace demist
