#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "demist/checkpoint.hpp"
#include "demist/commands.hpp"
#include "demist/dataset.hpp"
#include "demist/image.hpp"
#include "demist/networks.hpp"

using namespace demist;
namespace fs = std::filesystem;

namespace {

fs::path workdir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "demist_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

KeyValueConfig kv(std::initializer_list<std::pair<const char*, std::string>> items) {
  KeyValueConfig c;
  for (const auto& [k, v] : items) c.set(k, v);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Relative path -> bytes for every regular file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

void tiny_synth(const fs::path& out, const std::string& seed, const std::string& proportions = "0.2,0.4,0.4") {
  std::ostringstream log;
  cmd_synth(kv({{"out", out.string()}, {"seed", seed}, {"height", "16"}, {"width", "16"}, {"train_count", "6"},
                {"val_count", "2"}, {"test_count", "3"}, {"proportions", proportions}}),
            log);
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("fixed seed reproduces the directory") {
    const auto a = workdir("synth_a"), b = workdir("synth_b");
    tiny_synth(a, "11");
    tiny_synth(b, "11");
    auto ta = tree(a), tb = tree(b);
    ta.erase("resolved.cfg");
    tb.erase("resolved.cfg");
    CHECK(ta == tb);
    const auto c = workdir("synth_c");
    tiny_synth(c, "12");
    auto tc = tree(c);
    tc.erase("resolved.cfg");
    CHECK(tc != ta);
  }

  TEST_CASE("all-clean proportions make identical trees") {
    const auto d = workdir("synth_clean");
    tiny_synth(d, "3", "1,0,0");
    for (const char* split : kSplitNames) {
      CHECK(tree(d / split / "degraded") == tree(d / split / "gt"));
    }
  }

  TEST_CASE("default counts give one label row per image") {
    const auto d = workdir("synth_counts");
    std::ostringstream log;
    cmd_synth(kv({{"out", d.string()}, {"height", "16"}, {"width", "16"}}), log);
    const auto rows = read_csv(d / "labels.csv");
    CHECK(rows.front() == std::vector<std::string>{"id", "class_label"});
    CHECK(rows.size() - 1 == 64 + 8 + 8);
    CHECK(read_labels(d).size() == 80);
    CHECK(list_pngs(d / "train" / "gt").size() == 64);
    CHECK(fs::exists(d / "resolved.cfg"));
  }

  TEST_CASE("supplied backgrounds are resized and used") {
    const auto bg = workdir("bgs");
    save_png(ImageRGB(10, 30, 0.25f), bg / "a.png");
    const auto d = workdir("synth_bg");
    std::ostringstream log;
    cmd_synth(kv({{"out", d.string()}, {"backgrounds", bg.string()}, {"height", "16"}, {"width", "16"},
                  {"train_count", "2"}, {"val_count", "0"}, {"test_count", "0"}}),
              log);
    const auto gt = load_png(d / "train" / "gt" / "0000.png");
    CHECK(gt.height == 16);
    CHECK(gt.at(5, 5, 0) == doctest::Approx(64.0f / 255.0f));
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    const auto d = workdir("synth_bad");
    std::ostringstream log;
    CHECK_THROWS_AS(cmd_synth(kv({{"out", d.string()}, {"drop_colour", "red"}}), log), ConfigError);
    CHECK_THROWS(cmd_synth(kv({{"out", d.string()}, {"proportions", "0,0,0"}}), log));
    CHECK_THROWS(cmd_synth(kv({{"out", d.string()}, {"t_min", "1.5"}}), log));
    CHECK_THROWS(run_command("dance", KeyValueConfig{}, log));
  }
}

TEST_SUITE("eval and cam") {
  TEST_CASE("gt against gt gives the caps") {
    const auto data = workdir("eval_data");
    tiny_synth(data, "5");
    const auto out = workdir("eval_gt");
    std::ostringstream log;
    cmd_eval(kv({{"out", out.string()}, {"data", data.string()}, {"baselines", "gt"}}), log);
    const auto rows = read_csv(out / "metrics.csv");
    CHECK(rows.front() == std::vector<std::string>{"id", "psnr_db", "ssim", "split", "variant"});
    CHECK(rows.back()[0] == "mean");
    CHECK(rows.back()[1] == "100.000000");
    CHECK(rows.back()[2] == "1.000000");
  }

  TEST_CASE("mean rows equal the arithmetic mean of their column") {
    const auto data = workdir("eval_data2");
    tiny_synth(data, "6");
    const auto out = workdir("eval_mean");
    std::ostringstream log;
    cmd_eval(kv({{"out", out.string()}, {"data", data.string()}, {"split", "train"}, {"baselines", "degraded,gt"}}), log);
    const auto rows = read_csv(out / "metrics.csv");
    double p = 0, s = 0;
    std::size_t n = 0, means = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i][0] == "mean") {
        CHECK(std::stod(rows[i][1]) == doctest::Approx(p / static_cast<double>(n)).epsilon(1e-6));
        CHECK(std::stod(rows[i][2]) == doctest::Approx(s / static_cast<double>(n)).epsilon(1e-6));
        CHECK(n == 6);
        p = s = 0;
        n = 0;
        ++means;
      } else {
        CHECK(rows[i][3] == "train");
        p += std::stod(rows[i][1]);
        s += std::stod(rows[i][2]);
        ++n;
      }
    }
    CHECK(means == 2);
    const auto report = read_csv(out / "ablation.csv");
    CHECK(report[0] == std::vector<std::string>{"metric", "degraded", "gt"});
    CHECK(report[1][0] == "psnr_db");
    CHECK(report[2][0] == "ssim");
  }

  TEST_CASE("cam with a zero head writes black maps") {
    const auto model = workdir("zero_cls");
    Classifier<float> c(ClassifierConfig{}, 1);
    for (auto& v : c.head().weight.mutable_data()) v = 0;
    for (auto& v : c.head().bias.mutable_data()) v = 0;
    save_params(model / "model.ckpt", c.parameters());
    to_config(c.config()).save(model / "model.cfg");
    const auto inputs = workdir("cam_in");
    save_png(procedural_background(24, 20, 1), inputs / "x.png");
    save_png(procedural_background(24, 20, 2), inputs / "y.png");
    const auto out = workdir("cam_out");
    std::ostringstream log;
    cmd_cam(kv({{"out", out.string()}, {"classifier", model.string()}, {"input", inputs.string()}}), log);
    for (const char* name : {"x_cam.png", "y_cam.png"}) {
      const auto img = load_png(out / name);
      CHECK(img.height == 24);
      for (float v : img.pixels) CHECK(v == 0.0f);
    }
    CHECK(read_csv(out / "cam.csv").size() == 3);
  }

  TEST_CASE("checkpoint that does not fit the config is refused with a diff") {
    const auto model = workdir("mismatch_cls");
    Classifier<float> c(ClassifierConfig{}, 1);
    save_params(model / "model.ckpt", c.parameters());
    ClassifierConfig narrow;
    narrow.base_channels = 8;
    to_config(narrow).save(model / "model.cfg");
    const auto inputs = workdir("mm_in");
    save_png(procedural_background(16, 16, 1), inputs / "x.png");
    std::ostringstream log;
    try {
      cmd_cam(kv({{"out", workdir("mm_out").string()}, {"classifier", model.string()}, {"input", inputs.string()}}),
              log);
      FAIL("expected a checkpoint mismatch");
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("conv.0.weight") != std::string::npos);
      CHECK(msg.find("expected [8,3,3,3]") != std::string::npos);
      CHECK(msg.find("found [16,3,3,3]") != std::string::npos);
    }
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("synth, train both networks, restore and evaluate") {
    const auto data = workdir("pipe_data");
    tiny_synth(data, "9");
    std::ostringstream log;
    const auto cls = workdir("pipe_cls");
    cmd_train_classifier(kv({{"out", cls.string()}, {"data", data.string()}, {"steps", "3"}, {"base_channels", "4"}}),
                         log);
    CHECK(fs::exists(cls / "model.ckpt"));
    const auto clog = read_csv(cls / "classifier_log.csv");
    CHECK(clog.front() == std::vector<std::string>{"epoch", "step", "mean_loss", "accuracy", "macro_f1"});

    const auto models = workdir("pipe_models");
    for (const char* variant : {"full", "non_cam"}) {
      cmd_train(kv({{"out", (models / variant).string()}, {"data", data.string()}, {"classifier", cls.string()},
                    {"variant", variant}, {"steps", "2"}, {"base_channels", "4"}, {"featnet_seed", "3"}}),
                log);
      CHECK(fs::exists(models / variant / "train_log.csv"));
      CHECK(fs::exists(models / variant / "resolved.cfg"));
    }
    CHECK(read_csv(models / "full" / "train_log.csv").size() == 3);

    const auto restored = workdir("pipe_restored");
    cmd_restore(kv({{"out", restored.string()}, {"model", (models / "full").string()}, {"classifier", cls.string()},
                    {"input", (data / "test" / "degraded").string()}}),
                log);
    CHECK(list_pngs(restored).size() == 3);
    CHECK_THROWS(cmd_restore(kv({{"out", restored.string()}, {"model", (models / "full").string()},
                                 {"input", (data / "test" / "degraded").string()}}),
                             log));

    const auto ev = workdir("pipe_eval");
    cmd_eval(kv({{"out", ev.string()}, {"data", data.string()}, {"models", models.string()}, {"classifier", cls.string()},
                 {"baselines", ""}}),
             log);
    const auto report = read_csv(ev / "ablation.csv");
    CHECK(report[0] == std::vector<std::string>{"metric", "full", "non_cam"});
  }
}

TEST_SUITE("binary") {
  TEST_CASE("exit codes") {
    const std::string exe = DEMIST_CLI_PATH;
    const auto out = workdir("bin");
    const std::string ok = exe + " synth --seed 4 --out " + out.string() +
                           " --set height=16 --set width=16 --set train_count=2 --set val_count=1 --set test_count=1"
                           " > /dev/null";
    CHECK(std::system(ok.c_str()) == 0);
    CHECK(fs::exists(out / "labels.csv"));
    CHECK(KeyValueConfig::load(out / "resolved.cfg").get_string("seed", "") == "4");
    const std::string bad = exe + " synth --out " + out.string() + " --set nonsense=1 2> /dev/null";
    CHECK(std::system(bad.c_str()) != 0);
    const std::string config = (out / "run.cfg").string();
    std::ofstream(config) << "# comment\nheight = 16\nwidth = 16\ntrain_count = 1\nval_count = 0\ntest_count = 0\n";
    const std::string from_file = exe + " synth --config " + config + " --out " + (out / "f").string() + " > /dev/null";
    CHECK(std::system(from_file.c_str()) == 0);
    CHECK(list_pngs(out / "f" / "train" / "gt").size() == 1);
  }
}
