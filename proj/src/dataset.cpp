#include "demist/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace demist {

namespace {

std::string file_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

}  // namespace

void write_split(const fs::path& root, const std::string& split, const std::vector<DegradationSample>& samples,
                 std::map<std::string, ClassLabel>& labels) {
  const fs::path gt_dir = root / split / "gt";
  const fs::path deg_dir = root / split / "degraded";
  std::error_code ec;
  fs::create_directories(gt_dir, ec);
  fs::create_directories(deg_dir, ec);
  if (!fs::is_directory(gt_dir) || !fs::is_directory(deg_dir)) {
    throw std::runtime_error("cannot create dataset directories under " + root.string());
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string stem = file_stem(i);
    save_png(samples[i].background, gt_dir / (stem + ".png"));
    save_png(samples[i].degraded, deg_dir / (stem + ".png"));
    labels[split + "/" + stem] = samples[i].label;
  }
}

void write_labels(const fs::path& root, const std::map<std::string, ClassLabel>& labels) {
  std::ofstream os(root / "labels.csv", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (root / "labels.csv").string());
  os << "id,class_label\n";
  for (const auto& [id, label] : labels) os << id << ',' << label_name(label) << '\n';
}

std::map<std::string, ClassLabel> read_labels(const fs::path& root) {
  std::ifstream in(root / "labels.csv");
  if (!in) throw std::runtime_error("cannot read " + (root / "labels.csv").string());
  std::map<std::string, ClassLabel> labels;
  std::string line;
  std::getline(in, line);
  if (line != "id,class_label") throw std::runtime_error("labels.csv: unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("labels.csv: malformed row '" + line + "'");
    labels[line.substr(0, comma)] = parse_label(line.substr(comma + 1));
  }
  return labels;
}

std::vector<fs::path> list_pngs(const fs::path& path) {
  if (fs::is_regular_file(path)) return {path};
  if (!fs::is_directory(path)) throw std::runtime_error("no such file or directory: " + path.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<PairedSample> load_split(const fs::path& root, const std::string& split) {
  const auto labels = read_labels(root);
  const fs::path deg_dir = root / split / "degraded";
  const fs::path gt_dir = root / split / "gt";
  std::vector<PairedSample> out;
  for (const auto& deg : list_pngs(deg_dir)) {
    const std::string stem = deg.stem().string();
    const std::string id = split + "/" + stem;
    const auto it = labels.find(id);
    if (it == labels.end()) throw std::runtime_error("labels.csv has no row for " + id);
    PairedSample s;
    s.id = id;
    s.degraded = load_png(deg);
    s.gt = load_png(gt_dir / deg.filename());
    if (!s.degraded.same_size(s.gt)) throw std::runtime_error("pair " + id + ": degraded and gt differ in size");
    s.label = it->second;
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("split '" + split + "' under " + root.string() + " is empty");
  return out;
}

}  // namespace demist
