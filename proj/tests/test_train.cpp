#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "demist/train.hpp"

using namespace demist;

namespace {

ImageRGB random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  ImageRGB img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

std::vector<PairedSample> toy_set(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<DegradationSample> samples;
  for (std::size_t i = 0; i < n; ++i) {
    const auto bg = procedural_background(size, size, mix_seed(seed, 1000 + i));
    samples.push_back(make_sample(bg, static_cast<ClassLabel>(i % 3), SynthParams{}, mix_seed(seed, i)));
  }
  return to_pairs(samples);
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("quadratic converges") {
    Tensor<double> x({1}, {0.0}, true);
    Adam<double> adam({{"x", x}}, AdamConfig{0.1});
    for (int i = 0; i < 500; ++i) {
      adam.zero_grad();
      square(add_scalar(x, -3.0)).backward();
      adam.step();
    }
    CHECK(std::abs(x.data()[0] - 3.0) < 1e-2);
    CHECK(adam.steps() == 500);
  }

  TEST_CASE("first step moves every coordinate by lr") {
    Tensor<double> x({3}, {1.0, -2.0, 0.5}, true);
    Adam<double> adam({{"x", x}}, AdamConfig{0.01});
    sum(mul(x, Tensor<double>({3}, {2.0, -0.5, 7.0}))).backward();
    adam.step();
    CHECK(x.data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
    CHECK(x.data()[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-9));
    CHECK(x.data()[2] == doctest::Approx(0.5 - 0.01).epsilon(1e-9));
    CHECK(adam.first_moment(0)[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(adam.second_moment(0)[2] == doctest::Approx(0.001 * 49.0).epsilon(1e-12));
  }

  TEST_CASE("zero gradients and zero learning rate leave parameters alone") {
    Tensor<double> x({2}, {1.0, 2.0}, true);
    Adam<double> adam({{"x", x}}, AdamConfig{0.1});
    mul_scalar(sum(x), 0.0).backward();
    adam.step();
    CHECK(x.data()[0] == 1.0);
    CHECK(x.data()[1] == 2.0);
    CHECK(adam.steps() == 1);

    Tensor<double> y({2}, {1.0, 2.0}, true);
    Adam<double> frozen({{"y", y}}, AdamConfig{0.0});
    for (int i = 0; i < 5; ++i) {
      frozen.zero_grad();
      sum(square(y)).backward();
      frozen.step();
    }
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 2.0);
  }

  TEST_CASE("missing gradient is an error and modifies nothing") {
    Tensor<double> a({1}, {1.0}, true), b({1}, {5.0}, true);
    Adam<double> adam({{"a", a}, {"b", b}}, AdamConfig{0.1});
    sum(a).backward();
    CHECK_THROWS(adam.step());
    CHECK(a.data()[0] == 1.0);
    CHECK(adam.steps() == 0);
    CHECK_THROWS(AdamConfig({-1.0}).validate());
  }

  TEST_CASE("identical runs are bit identical") {
    auto run = [] {
      Tensor<float> x({4}, {0.1f, 0.2f, -0.3f, 0.4f}, true);
      Adam<float> adam({{"x", x}}, AdamConfig{0.05});
      for (int i = 0; i < 50; ++i) {
        adam.zero_grad();
        sum(square(sigmoid(x))).backward();
        adam.step();
      }
      return std::vector<float>(x.data().begin(), x.data().end());
    };
    CHECK(run() == run());
  }
}

TEST_SUITE("augment") {
  TEST_CASE("identity configuration is the identity") {
    const auto a = random_image(8, 10, 1), b = random_image(8, 10, 2);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto [da, db] = augment(a, b, AugmentConfig::identity(), s);
      CHECK(da.pixels == a.pixels);
      CHECK(db.pixels == b.pixels);
    }
  }

  TEST_CASE("neutral photometric draw is the identity whatever the geometry") {
    const auto a = random_image(6, 6, 3);
    AugmentDraw d;
    CHECK(apply_augment(a, d).pixels == a.pixels);
    d.flip = true;
    CHECK(apply_augment(apply_augment(a, d), d).pixels == a.pixels);
    d.flip = false;
    d.rotate = true;
    CHECK(apply_augment(apply_augment(a, d), d).pixels == a.pixels);
  }

  TEST_CASE("pairs stay aligned under geometric and photometric changes") {
    ImageRGB deg(9, 7, 0.2f), gt(9, 7, 0.2f);
    for (std::size_t c = 0; c < 3; ++c) {
      deg.at(1, 2, c) = 0.9f;
      gt.at(1, 2, c) = 0.9f;
    }
    AugmentConfig cfg;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto [da, ga] = augment(deg, gt, cfg, s);
      CHECK(da.pixels == ga.pixels);
    }
    cfg.flip_prob = cfg.rotate_prob = 1.0;
    const auto [da, ga] = augment(deg, gt, cfg, 0);
    CHECK(da.at(7, 2, 0) > da.at(0, 0, 0));  // flip then 180 rotation = vertical flip
    CHECK(ga.at(7, 2, 0) > ga.at(0, 0, 0));
  }

  TEST_CASE("outputs are clamped") {
    AugmentDraw d;
    d.brightness = 0.5;
    d.contrast = 3.0;
    d.gamma = 0.5;
    for (float v : apply_augment(random_image(5, 5, 4), d).pixels) CHECK((v >= 0.0f && v <= 1.0f));
  }

  TEST_CASE("invalid ranges are rejected") {
    AugmentConfig c;
    c.gamma_min = 0.0;
    CHECK_THROWS(c.validate());
    c = AugmentConfig{};
    c.flip_prob = 1.5;
    CHECK_THROWS(c.validate());
  }
}

TEST_SUITE("classifier training") {
  TEST_CASE("stats") {
    const auto s = classification_stats({0, 0, 1, 1, 2, 2}, {0, 1, 1, 1, 2, 0});
    CHECK(s.accuracy == doctest::Approx(4.0 / 6.0));
    CHECK(s.confusion[0][1] == 1);
    CHECK(s.confusion[2][0] == 1);
    // per-class F1: 0.5, 0.8, 2/3
    CHECK(s.macro_f1 == doctest::Approx((0.5 + 0.8 + 2.0 / 3.0) / 3.0));
    CHECK(classification_stats({1, 1}, {1, 1}).macro_f1 == 1.0);
  }

  TEST_CASE("loss falls over the first steps and runs reproduce") {
    const auto data = toy_set(12, 32, 1);
    ClassifierTrainConfig cfg;
    cfg.steps = 10;
    cfg.batch_size = 12;
    cfg.use_augment = false;
    cfg.seed = 3;
    Classifier<float> c(ClassifierConfig{}, 3);
    const auto res = train_classifier(c, data, cfg);
    int rises = 0;
    for (std::size_t i = 1; i < res.step_losses.size(); ++i) rises += res.step_losses[i] > res.step_losses[i - 1];
    CHECK(rises <= 2);
    CHECK(res.step_losses.back() < res.step_losses.front());

    Classifier<float> again(ClassifierConfig{}, 3);
    const auto res2 = train_classifier(again, data, cfg);
    CHECK(res.step_losses == res2.step_losses);
    CHECK(res.epochs.back().train.accuracy == res2.epochs.back().train.accuracy);
  }

  TEST_CASE("absent classes are reported") {
    auto data = toy_set(6, 16, 2);
    std::erase_if(data, [](const PairedSample& s) { return s.label == ClassLabel::clean; });
    ClassifierTrainConfig cfg;
    cfg.steps = 1;
    Classifier<float> c(ClassifierConfig{}, 1);
    std::ostringstream log;
    train_classifier(c, data, cfg, &log);
    CHECK(log.str().find("clean") != std::string::npos);
  }
}

TEST_SUITE("generator training") {
  TEST_CASE("loss at step 200 is below the first step") {
    const auto data = toy_set(4, 16, 4);
    Classifier<float> cls(ClassifierConfig{}, 1);
    GeneratorConfig gc;
    gc.base_channels = 8;
    Generator<float> gen(gc, 2);
    FeatureNet<float> featnet;
    GeneratorTrainConfig cfg;
    cfg.steps = 200;
    cfg.seed = 5;
    const auto log = train_generator(gen, &cls, featnet, data, {}, cfg);
    REQUIRE(log.size() == 200);
    CHECK(log[199].loss_total < log[0].loss_total);
    for (const auto& r : log) {
      CHECK_FALSE(r.has_validation);
      CHECK(r.loss_total == doctest::Approx(r.loss_mse + 0.05 * r.loss_per).epsilon(1e-5));
    }
  }

  TEST_CASE("non_cam trains without a classifier; cam variants refuse") {
    const auto data = toy_set(3, 16, 6);
    GeneratorConfig gc;
    gc.base_channels = 4;
    Generator<float> gen(build_ablation(gc, Variant::non_cam), 3);
    FeatureNet<float> featnet;
    GeneratorTrainConfig cfg;
    cfg.steps = 3;
    const auto log = train_generator(gen, nullptr, featnet, data, data, cfg);
    CHECK(log.size() == 3);
    CHECK(log.back().has_validation);

    Generator<float> with_cam(gc, 3);
    CHECK_THROWS(train_generator(with_cam, nullptr, featnet, data, {}, cfg));
  }

  TEST_CASE("odd-sized images are restored at their own size") {
    GeneratorConfig gc;
    gc.base_channels = 4;
    Generator<float> gen(gc, 4);
    Classifier<float> cls(ClassifierConfig{}, 4);
    const auto out = restore_all(gen, &cls, {random_image(15, 13, 7)});
    CHECK(out[0].height == 15);
    CHECK(out[0].width == 13);
  }

  TEST_CASE("train log csv") {
    std::vector<TrainLogRecord> recs(2);
    recs[0] = {1, 0.5, 0.25, 5.0, false, 0, 0};
    recs[1] = {2, 0.4, 0.2, 4.0, true, 20.5, 0.75};
    std::ostringstream os;
    write_train_log(os, recs);
    std::istringstream is(os.str());
    std::string header, first, second;
    std::getline(is, header);
    std::getline(is, first);
    std::getline(is, second);
    CHECK(header == "step,loss_total,loss_mse,loss_per,val_psnr,val_ssim");
    CHECK(first.ends_with(",,"));
    CHECK(second.find("20.5") != std::string::npos);
  }
}
