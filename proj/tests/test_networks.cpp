#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "demist/networks.hpp"
#include "gradcheck.hpp"

using namespace demist;
using testing::check_gradients;
using testing::random_tensor;

namespace {

ImageRGB random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  ImageRGB img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

GeneratorConfig tiny() {
  GeneratorConfig c;
  c.base_channels = 4;
  c.reduction = 2;
  c.spatial_kernel = 3;
  return c;
}

}  // namespace

TEST_SUITE("classifier") {
  TEST_CASE("probabilities lie on the simplex") {
    Classifier<float> c(ClassifierConfig{}, 1);
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto p = classify(c, random_image(24, 20, s));
      CHECK(std::abs(p[0] + p[1] + p[2] - 1.0) < 1e-6);
    }
  }

  TEST_CASE("zero head gives the uniform distribution") {
    Classifier<float> c(ClassifierConfig{}, 2);
    for (auto& v : c.head().weight.mutable_data()) v = 0;
    for (auto& v : c.head().bias.mutable_data()) v = 0;
    for (double p : classify(c, random_image(16, 16, 3))) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }

  TEST_CASE("architecture: seven convs, pooled features feed the head") {
    Classifier<float> c(ClassifierConfig{}, 4);
    std::size_t convs = 0;
    for (const auto& p : c.parameters()) convs += p.name.ends_with(".weight") && p.value.rank() == 4;
    CHECK(convs == 7);
    const auto out = c.forward(images_to_tensor<float>({random_image(32, 32, 5)}));
    CHECK(out.features.dim(1) == c.config().final_channels());
    CHECK(out.features.dim(2) == 4);
    CHECK(out.logits.shape() == Shape{1, 3});
  }

  TEST_CASE("config validation and round trip") {
    ClassifierConfig bad;
    bad.strides = {1, 2};
    CHECK_THROWS(bad.validate());
    ClassifierConfig c;
    c.base_channels = 8;
    const auto back = classifier_config_from(to_config(c));
    CHECK(back.base_channels == 8);
    CHECK(back.strides == c.strides);
    CHECK(back.width_multipliers == c.width_multipliers);
  }
}

TEST_SUITE("cam") {
  TEST_CASE("weighted sum matches a loop oracle") {
    Rng rng(10);
    const std::size_t k = 5, h = 3, w = 4;
    std::vector<float> f(k * h * w), wt(k);
    for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : wt) v = static_cast<float>(rng.uniform(-1, 1));
    const auto raw = cam_raw_map(f, k, h, w, wt);
    for (std::size_t i = 0; i < h * w; ++i) {
      double acc = 0;
      for (std::size_t c = 0; c < k; ++c) acc += static_cast<double>(wt[c]) * f[c * h * w + i];
      CHECK(std::abs(raw.values[i] - acc) < 1e-6);
    }
  }

  TEST_CASE("zero weights give a zero attention map") {
    std::vector<float> f(2 * 3 * 3, 1.5f), wt(2, 0.0f);
    for (float v : normalize_cam(cam_raw_map(f, 2, 3, 3, wt), 12, 12).values) CHECK(v == 0.0f);
  }

  TEST_CASE("single channel with unit weight is the normalized resized ReLU") {
    Rng rng(11);
    std::vector<float> f(4 * 4);
    for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
    const std::vector<float> one = {1.0f};
    const auto att = normalize_cam(cam_raw_map(f, 1, 4, 4, one), 8, 8);
    GrayImage plain(4, 4);
    plain.values = f;
    auto expect = resize(plain, 8, 8, Interpolation::bilinear);
    for (auto& v : expect.values) v = std::max(v, 0.0f);
    const float mx = *std::max_element(expect.values.begin(), expect.values.end());
    const float mn = *std::min_element(expect.values.begin(), expect.values.end());
    for (std::size_t i = 0; i < 64; ++i) CHECK(att.values[i] == doctest::Approx((expect.values[i] - mn) / (mx - mn)).epsilon(1e-5));
  }

  TEST_CASE("invariant to feature scaling with inverse weight scaling") {
    Rng rng(12);
    std::vector<float> f(3 * 4 * 4), wt(3);
    for (auto& v : f) v = static_cast<float>(rng.uniform(0, 1));
    for (auto& v : wt) v = static_cast<float>(rng.uniform(-1, 1));
    auto f2 = f;
    auto w2 = wt;
    for (auto& v : f2) v *= 4.0f;
    for (auto& v : w2) v *= 0.25f;
    const auto a = normalize_cam(cam_raw_map(f, 3, 4, 4, wt), 9, 7);
    const auto b = normalize_cam(cam_raw_map(f2, 3, 4, 4, w2), 9, 7);
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-5));
  }

  TEST_CASE("classifier cam is input-sized and bounded") {
    Classifier<float> c(ClassifierConfig{}, 13);
    const auto img = random_image(30, 22, 14);
    const auto cam = compute_cam(c, img);
    CHECK(cam.attention.height == 30);
    CHECK(cam.attention.width == 22);
    for (float v : cam.attention.values) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(std::abs(cam.probabilities[0] + cam.probabilities[1] + cam.probabilities[2] - 1.0) < 1e-6);
    const auto other = compute_cam(c, img, (cam.predicted_class + 1) % 3);
    CHECK(other.attention.height == 30);
    CHECK_THROWS(compute_cam(c, img, 3));
    const auto batch = compute_cams(c, {img, img});
    CHECK(batch[1].attention.values == cam.attention.values);
  }
}

TEST_SUITE("generator") {
  TEST_CASE("shape contract and output range") {
    for (std::size_t s : {48u, 64u}) {
      Generator<float> g(GeneratorConfig{}, 1);
      const auto img = random_image(s, s, s);
      const GrayImage cam(s, s, 0.5f);
      const auto out = restore(g, img, &cam);
      CHECK(out.height == s);
      CHECK(out.width == s);
      for (float v : out.pixels) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }

  TEST_CASE("structure counts") {
    Generator<float> g(GeneratorConfig{}, 2);
    CHECK(g.dilated_blocks().size() == 6);
    CHECK(g.attention_modules().size() == 12);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g.dilated_blocks()[i].spec().dilation == (i < 3 ? 2u : 4u));
  }

  TEST_CASE("input errors") {
    Generator<float> g(GeneratorConfig{}, 3);
    const auto odd = random_image(15, 16, 4);
    const GrayImage cam(15, 16);
    CHECK_THROWS(restore(g, odd, &cam));
    const auto img = random_image(16, 16, 5);
    CHECK_THROWS(restore(g, img, nullptr));
    const GrayImage wrong(8, 8);
    CHECK_THROWS(restore(g, img, &wrong));
    CHECK_THROWS(g.forward(images_to_tensor<float>({img})));
  }

  TEST_CASE("restore is deterministic") {
    Generator<float> g(tiny(), 6);
    const auto img = random_image(16, 16, 7);
    const GrayImage cam(16, 16, 0.3f);
    CHECK(restore(g, img, &cam).pixels == restore(g, img, &cam).pixels);
  }

  TEST_CASE("ablation configs") {
    const GeneratorConfig full;
    CHECK(build_ablation(full, Variant::full).input_channels() == 4);
    CHECK(build_ablation(full, Variant::non_cam).input_channels() == 3);
    CHECK_FALSE(build_ablation(full, Variant::non_ca).use_channel_attn);
    CHECK_FALSE(build_ablation(full, Variant::non_sa).use_spatial_attn);
    CHECK_FALSE(build_ablation(full, Variant::non_sd).use_smoothing);
    for (auto v : kAllVariants) CHECK(parse_variant(variant_name(v)) == v);
    CHECK_THROWS(parse_variant("non_xx"));

    const auto count = [](Variant v) {
      return parameter_count(Generator<float>(build_ablation(GeneratorConfig{}, v), 1).parameters());
    };
    const auto n_full = count(Variant::full);
    CHECK(count(Variant::non_ca) < n_full);
    CHECK(count(Variant::non_sa) < n_full);
    CHECK(count(Variant::non_sd) < n_full);
    CHECK(count(Variant::non_cam) < n_full);
  }

  TEST_CASE("full and non_cam differ only in the first conv") {
    const auto full = Generator<float>(GeneratorConfig{}, 1).parameters();
    const auto ncam = Generator<float>(build_ablation(GeneratorConfig{}, Variant::non_cam), 1).parameters();
    REQUIRE(full.size() == ncam.size());
    for (std::size_t i = 0; i < full.size(); ++i) {
      CHECK(full[i].name == ncam[i].name);
      if (full[i].name == "head1.weight") {
        CHECK(full[i].value.dim(1) == 4);
        CHECK(ncam[i].value.dim(1) == 3);
      } else {
        CHECK(full[i].value.shape() == ncam[i].value.shape());
      }
    }
  }

  TEST_CASE("non_sd equals full with delta smoothing kernels") {
    Generator<double> full(tiny(), 8);
    for (auto& block : full.dilated_blocks()) {
      auto& s = *block.smoothing();
      for (auto& v : s.weight.mutable_data()) v = 0.0;
      for (auto& v : s.bias.mutable_data()) v = 0.0;
      const std::size_t c = s.weight.dim(0), k = s.weight.dim(2);
      for (std::size_t i = 0; i < c; ++i) s.weight.mutable_data()[((i * c + i) * k + k / 2) * k + k / 2] = 1.0;
    }
    Generator<double> plain(build_ablation(tiny(), Variant::non_sd), 99);
    auto dst = plain.parameters();
    const auto copied = copy_matching_params(full.parameters(), dst);
    CHECK(copied == dst.size());
    Rng rng(9);
    const auto x = random_tensor({2, 4, 16, 16}, rng, 0, 1, false);
    const auto a = full.forward(x), b = plain.forward(x);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
  }

  TEST_CASE("config round trip") {
    auto c = build_ablation(tiny(), Variant::non_sa);
    c.attention_order = AttentionOrder::spatial_first;
    const auto back = generator_config_from(to_config(c));
    CHECK(back.base_channels == c.base_channels);
    CHECK(back.reduction == c.reduction);
    CHECK(back.spatial_kernel == c.spatial_kernel);
    CHECK(back.attention_order == c.attention_order);
    CHECK(back.use_cam == c.use_cam);
    CHECK(back.use_spatial_attn == c.use_spatial_attn);
    CHECK(back.use_channel_attn == c.use_channel_attn);
    CHECK(back.use_smoothing == c.use_smoothing);
    GeneratorConfig bad = tiny();
    bad.reduction = 3;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("end-to-end finite differences on a tiny generator") {
    Generator<double> g(tiny(), 10);
    Rng rng(11);
    testing::randomize_gates(g.parameters(), rng);
    auto x = random_tensor({1, 4, 16, 16}, rng, 0, 1);
    const auto target = random_tensor({1, 3, 16, 16}, rng, 0, 1, false);
    std::vector<Tensor<double>> leaves = {x};
    std::vector<std::string> names = {"input"};
    for (const auto& p : g.parameters()) {
      leaves.push_back(p.value);
      names.push_back(p.name);
    }
    // Hidden units of the attention MLPs sit close to the ReLU kink this deep in
    // the network, so a smaller step keeps the differences on one side of it.
    const auto r = check_gradients(leaves, names, [&] { return mean(square(sub(g.forward(x), target))); }, 1e-5, 4);
    CHECK_MESSAGE(r.worst < 1e-4, r.worst_leaf << " " << r.worst);
  }

  TEST_CASE("plain autoencoder configuration still trains a step") {
    GeneratorConfig c = tiny();
    c.use_cam = c.use_channel_attn = c.use_spatial_attn = c.use_smoothing = false;
    Generator<double> g(c, 12);
    Rng rng(13);
    const auto x = random_tensor({1, 3, 8, 8}, rng, 0, 1, false);
    auto loss = mean(square(sub(g.forward(x), x)));
    loss.backward();
    for (const auto& p : g.parameters()) CHECK(p.value.has_grad());
  }
}
