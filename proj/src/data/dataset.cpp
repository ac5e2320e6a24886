#include "fct/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

namespace fct {

// ---- rendering ---------------------------------------------------------------

bool covers_pixel(const ObjectSpec& o, int64_t x, int64_t y) {
  const double px = static_cast<double>(x) + 0.5 - o.cx;
  const double py = static_cast<double>(y) + 0.5 - o.cy;
  const double r = 0.5 * o.size;
  switch (class_shape(o.class_id)) {
    case ShapeKind::kCircle:
      return px * px + py * py <= r * r;
    case ShapeKind::kSquare:
      return std::abs(px) <= r && std::abs(py) <= r;
    case ShapeKind::kTriangle: {
      // Apex at the top, base along the bottom edge.
      if (py < -r || py > r) return false;
      const double half_width = 0.5 * (py + r);
      return std::abs(px) <= half_width;
    }
    case ShapeKind::kDiamond:
      return std::abs(px) + std::abs(py) <= r;
  }
  return false;
}

Box object_mask_box(const ObjectSpec& o, int64_t width, int64_t height) {
  int64_t x1 = width, y1 = height, x2 = -1, y2 = -1;
  const auto lo_x = std::max<int64_t>(0, static_cast<int64_t>(std::floor(o.cx - o.size)));
  const auto hi_x = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(o.cx + o.size)));
  const auto lo_y = std::max<int64_t>(0, static_cast<int64_t>(std::floor(o.cy - o.size)));
  const auto hi_y = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(o.cy + o.size)));
  for (int64_t y = lo_y; y <= hi_y; ++y) {
    for (int64_t x = lo_x; x <= hi_x; ++x) {
      if (!covers_pixel(o, x, y)) continue;
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x);
      y2 = std::max(y2, y);
    }
  }
  if (x2 < 0) return {};
  return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1)};
}

namespace {

uint8_t clamp_u8(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

void fill_color(const ObjectSpec& o, int64_t x, int64_t y, uint8_t out[3]) {
  static constexpr int kSolid[3] = {210, 50, 50};
  static constexpr int kStripeA[3] = {50, 90, 220};
  static constexpr int kStripeB[3] = {235, 220, 70};
  static constexpr int kCheckA[3] = {60, 190, 80};
  static constexpr int kCheckB[3] = {25, 25, 25};
  const int64_t lx = x - static_cast<int64_t>(std::floor(o.cx - 0.5 * o.size));
  const int64_t ly = y - static_cast<int64_t>(std::floor(o.cy - 0.5 * o.size));
  const int* base = kSolid;
  switch (class_fill(o.class_id)) {
    case FillKind::kSolid:
      base = kSolid;
      break;
    case FillKind::kStripes:
      base = ((ly / 3) % 2 == 0) ? kStripeA : kStripeB;
      break;
    case FillKind::kChecker:
      base = (((lx / 4) + (ly / 4)) % 2 == 0) ? kCheckA : kCheckB;
      break;
  }
  const bool dark = base == kCheckB;
  for (int c = 0; c < 3; ++c) out[c] = clamp_u8(base[c] + (dark ? 0 : o.color_jitter[c]));
}

void render_background(Image& img, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double gray = 95.0 + 50.0 * u(rng);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double angle = 2.0 * std::numbers::pi * u(rng);
    const double freq = 0.05 + 0.15 * u(rng);
    waves.push_back({freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * u(rng), 4.0 + 4.0 * u(rng)});
  }
  std::uniform_int_distribution<int> noise(-6, 6);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      double v = gray;
      for (const Wave& w : waves) v += w.amp * std::sin(w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y) + w.phase);
      uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = clamp_u8(v + noise(rng));
    }
  }
  // Clutter: a few thin gray strokes.
  const int strokes = 2 + static_cast<int>(3 * u(rng));
  for (int s = 0; s < strokes; ++s) {
    const double x0 = u(rng) * static_cast<double>(img.width), y0 = u(rng) * static_cast<double>(img.height);
    const double x1 = u(rng) * static_cast<double>(img.width), y1 = u(rng) * static_cast<double>(img.height);
    const double shade = 75.0 + 110.0 * u(rng);
    const int steps = 2 * static_cast<int>(img.width + img.height);
    for (int t = 0; t <= steps; ++t) {
      const double f = static_cast<double>(t) / steps;
      const auto x = static_cast<int64_t>(x0 + f * (x1 - x0));
      const auto y = static_cast<int64_t>(y0 + f * (y1 - y0));
      if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
      uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = clamp_u8(shade);
    }
  }
}

}  // namespace

Image render_scene(const SceneSpec& scene) {
  Image img(scene.width, scene.height);
  render_background(img, scene.background_seed);
  for (const ObjectSpec& o : scene.objects) {
    const Box b = object_mask_box(o, scene.width, scene.height);
    for (auto y = static_cast<int64_t>(b.y1); y < static_cast<int64_t>(b.y2); ++y) {
      for (auto x = static_cast<int64_t>(b.x1); x < static_cast<int64_t>(b.x2); ++x) {
        if (covers_pixel(o, x, y)) fill_color(o, x, y, img.px(x, y));
      }
    }
  }
  return img;
}

// ---- index -------------------------------------------------------------------

void DatasetIndex::validate() const {
  for (int b : base_classes) {
    if (std::find(novel_classes.begin(), novel_classes.end(), b) != novel_classes.end()) {
      throw DataError("class " + std::to_string(b) + " is both base and novel");
    }
  }
  for (const Annotation& a : annotations) {
    if (a.image_id < 0 || a.image_id >= static_cast<int64_t>(images.size())) {
      throw DataError("annotation references missing image " + std::to_string(a.image_id));
    }
  }
  if (!pixels.empty() && pixels.size() != images.size()) throw DataError("pixel cache does not match image list");
}

std::vector<int64_t> DatasetIndex::annotations_of_class(int class_id) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < annotations.size(); ++i) {
    if (annotations[i].class_id == class_id) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

std::vector<Box> DatasetIndex::boxes_in_image(int64_t image_id, int class_id) const {
  std::vector<Box> out;
  for (const Annotation& a : annotations) {
    if (a.image_id == image_id && a.class_id == class_id) out.push_back(a.box);
  }
  return out;
}

std::vector<Annotation> DatasetIndex::annotations_in_image(int64_t image_id) const {
  std::vector<Annotation> out;
  for (const Annotation& a : annotations) {
    if (a.image_id == image_id) out.push_back(a);
  }
  return out;
}

const Image& DatasetIndex::image(int64_t image_id) const {
  if (image_id < 0 || image_id >= static_cast<int64_t>(pixels.size())) {
    throw DataError("image " + std::to_string(image_id) + " is not loaded");
  }
  return pixels[static_cast<size_t>(image_id)];
}

std::vector<int> default_novel_classes() { return {0, 4, 8, 9}; }

std::vector<int> default_base_classes() {
  std::vector<int> out;
  const auto novel = default_novel_classes();
  for (int c = 0; c < kNumClasses; ++c) {
    if (std::find(novel.begin(), novel.end(), c) == novel.end()) out.push_back(c);
  }
  return out;
}

DatasetIndex generate_synthetic_corpus(uint64_t seed, int64_t n_images, std::span<const int> classes,
                                       const CorpusOptions& options) {
  if (classes.empty()) throw DataError("corpus needs at least one class");
  for (int c : classes) {
    if (c < 0 || c >= kNumClasses) throw DataError("unknown class id " + std::to_string(c));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-15, 15);
  std::vector<int> cycle(classes.begin(), classes.end());
  std::shuffle(cycle.begin(), cycle.end(), rng);
  size_t next_class = 0;

  DatasetIndex index;
  index.novel_classes = default_novel_classes();
  index.base_classes = default_base_classes();
  const int64_t size = options.image_size;
  for (int64_t i = 0; i < n_images; ++i) {
    SceneSpec scene;
    scene.width = scene.height = size;
    scene.background_seed = rng();
    const int instances = 1 + static_cast<int>(u(rng) * options.max_instances);
    std::vector<Box> placed;
    for (int k = 0; k < instances; ++k) {
      ObjectSpec obj;
      obj.class_id = cycle[next_class % cycle.size()];
      for (int& j : obj.color_jitter) j = jitter(rng);
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        obj.size = options.min_object + u(rng) * (options.max_object - options.min_object);
        const double lo = 0.5 * obj.size + 1.0;
        const double hi = static_cast<double>(size) - 0.5 * obj.size - 1.0;
        obj.cx = lo + u(rng) * (hi - lo);
        obj.cy = lo + u(rng) * (hi - lo);
        const Box b = expand_box(object_mask_box(obj, size, size), 0.1);
        ok = std::none_of(placed.begin(), placed.end(), [&](const Box& p) {
          return iou(expand_box(p, 0.1), b) > 0.0;
        });
      }
      if (!ok) continue;
      ++next_class;
      placed.push_back(object_mask_box(obj, size, size));
      scene.objects.push_back(obj);
    }
    std::ostringstream name;
    name << "images/" << options.name << '_' << std::setw(5) << std::setfill('0') << i << ".ppm";
    index.images.push_back({name.str(), size, size});
    for (const ObjectSpec& o : scene.objects) {
      index.annotations.push_back({i, o.class_id, object_mask_box(o, size, size)});
    }
    index.pixels.push_back(render_scene(scene));
  }
  index.validate();
  return index;
}

// ---- files -------------------------------------------------------------------

void write_annotations(const DatasetIndex& index, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out << std::setprecision(17);
  for (const Annotation& a : index.annotations) {
    out << index.images[static_cast<size_t>(a.image_id)].path << ' ' << a.class_id << ' ' << a.box.x1 << ' '
        << a.box.y1 << ' ' << a.box.x2 << ' ' << a.box.y2 << '\n';
  }
}

void write_split(const DatasetIndex& index, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out << "base:";
  for (int c : index.base_classes) out << ' ' << c;
  out << "\nnovel:";
  for (int c : index.novel_classes) out << ' ' << c;
  out << '\n';
}

void write_dataset(const DatasetIndex& index, const std::filesystem::path& dir) {
  index.validate();
  std::filesystem::create_directories(dir / "images");
  for (size_t i = 0; i < index.images.size(); ++i) {
    if (i < index.pixels.size()) write_ppm(dir / index.images[i].path, index.pixels[i]);
  }
  write_annotations(index, dir / "annotations.txt");
  write_split(index, dir / "split.txt");
}

DatasetIndex read_dataset(const std::filesystem::path& dir) {
  DatasetIndex index;
  std::ifstream split(dir / "split.txt");
  if (!split) throw IoError("missing split file in " + dir.string());
  std::string line;
  while (std::getline(split, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    std::vector<int>* target = nullptr;
    if (key == "base:") {
      target = &index.base_classes;
    } else if (key == "novel:") {
      target = &index.novel_classes;
    } else if (!key.empty()) {
      throw DataError("malformed split line: " + line);
    }
    int c;
    while (target && ls >> c) target->push_back(c);
  }
  std::ifstream ann(dir / "annotations.txt");
  if (!ann) throw IoError("missing annotation file in " + dir.string());
  std::map<std::string, int64_t> ids;
  int64_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path;
    Annotation a;
    if (!(ls >> path >> a.class_id >> a.box.x1 >> a.box.y1 >> a.box.x2 >> a.box.y2)) {
      throw DataError("malformed annotation line " + std::to_string(line_no) + ": " + line);
    }
    auto [it, inserted] = ids.emplace(path, static_cast<int64_t>(index.images.size()));
    if (inserted) {
      index.pixels.push_back(read_ppm(dir / path));
      index.images.push_back({path, index.pixels.back().width, index.pixels.back().height});
    }
    a.image_id = it->second;
    index.annotations.push_back(a);
  }
  index.validate();
  return index;
}

// ---- episodes ----------------------------------------------------------------

Image support_crop(const DatasetIndex& index, int64_t annotation, const EpisodeOptions& options) {
  const Annotation& a = index.annotations.at(static_cast<size_t>(annotation));
  return crop_resize(index.image(a.image_id), expand_box(a.box, options.crop_expand), options.support_size,
                     options.support_size);
}

EpisodeBatch make_episode(const DatasetIndex& index, int64_t query_image, int class_id,
                          std::span<const int64_t> support_annotations, const DatasetIndex& support_index,
                          const EpisodeOptions& options) {
  if (support_annotations.empty()) throw DataError("episode needs at least one support image");
  EpisodeBatch ep;
  ep.class_id = class_id;
  ep.query_image = query_image;
  ep.query = image_to_tensor(index.image(query_image));
  ep.gt = index.boxes_in_image(query_image, class_id);
  std::vector<Image> crops;
  for (int64_t a : support_annotations) {
    if (support_index.annotations.at(static_cast<size_t>(a)).class_id != class_id) {
      throw DataError("support annotation of the wrong class");
    }
    crops.push_back(support_crop(support_index, a, options));
  }
  ep.support = images_to_tensor(crops);
  ep.support_annotations.assign(support_annotations.begin(), support_annotations.end());
  return ep;
}

EpisodeBatch sample_episode(const DatasetIndex& index, int class_id, int64_t support_count, std::mt19937_64& rng,
                            const EpisodeOptions& options) {
  if (support_count < 1) throw DataError("support count must be >= 1");
  const auto anns = index.annotations_of_class(class_id);
  if (!options.allow_query_support && static_cast<int64_t>(anns.size()) < support_count + 1) {
    throw DataError("class " + std::to_string(class_id) + " has " + std::to_string(anns.size()) +
                    " instances; need at least " + std::to_string(support_count + 1));
  }
  if (anns.empty()) throw DataError("class " + std::to_string(class_id) + " has no instances");
  std::set<int64_t> image_set;
  for (int64_t a : anns) image_set.insert(index.annotations[static_cast<size_t>(a)].image_id);
  const std::vector<int64_t> image_ids(image_set.begin(), image_set.end());

  std::uniform_int_distribution<size_t> pick(0, image_ids.size() - 1);
  const int64_t query = image_ids[pick(rng)];
  std::vector<int64_t> candidates;
  for (int64_t a : anns) {
    if (index.annotations[static_cast<size_t>(a)].image_id != query) candidates.push_back(a);
  }
  if (static_cast<int64_t>(candidates.size()) < support_count) {
    if (!options.allow_query_support) {
      throw DataError("not enough support instances of class " + std::to_string(class_id) + " outside the query");
    }
    candidates = anns;
  }
  std::vector<int64_t> chosen;
  for (int64_t i = 0; i < support_count; ++i) {
    // Partial Fisher-Yates; wraps around when candidates run out.
    const auto remaining = static_cast<int64_t>(candidates.size()) - (i % static_cast<int64_t>(candidates.size()));
    std::uniform_int_distribution<int64_t> d(0, remaining - 1);
    const auto base = static_cast<size_t>(i % static_cast<int64_t>(candidates.size()));
    std::swap(candidates[base], candidates[base + static_cast<size_t>(d(rng))]);
    chosen.push_back(candidates[base]);
  }
  return make_episode(index, query, class_id, chosen, index, options);
}

DatasetIndex make_k_shot_subset(const DatasetIndex& index, int k, uint64_t seed) {
  if (k < 1) throw DataError("K must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<int> classes = index.base_classes;
  classes.insert(classes.end(), index.novel_classes.begin(), index.novel_classes.end());
  std::sort(classes.begin(), classes.end());

  std::vector<Annotation> selected;
  for (int c : classes) {
    std::map<int64_t, std::vector<size_t>> per_image;
    for (size_t i = 0; i < index.annotations.size(); ++i) {
      if (index.annotations[i].class_id == c) per_image[index.annotations[i].image_id].push_back(i);
    }
    std::vector<int64_t> order;
    for (const auto& [img, _] : per_image) order.push_back(img);
    bool done = false;
    for (int attempt = 0; attempt < 20 && !done; ++attempt) {
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<size_t> picked;
      for (int64_t img : order) {
        const auto& list = per_image[img];
        if (static_cast<int>(picked.size() + list.size()) > k) continue;
        picked.insert(picked.end(), list.begin(), list.end());
        if (static_cast<int>(picked.size()) == k) break;
      }
      if (static_cast<int>(picked.size()) == k) {
        for (size_t i : picked) selected.push_back(index.annotations[i]);
        done = true;
      }
    }
    if (!done) {
      throw DataError("class " + std::to_string(c) + " cannot provide exactly " + std::to_string(k) + " boxes");
    }
  }

  DatasetIndex out;
  out.base_classes = index.base_classes;
  out.novel_classes = index.novel_classes;
  std::map<int64_t, int64_t> remap;
  for (Annotation a : selected) {
    auto [it, inserted] = remap.emplace(a.image_id, static_cast<int64_t>(out.images.size()));
    if (inserted) {
      out.images.push_back(index.images[static_cast<size_t>(a.image_id)]);
      if (!index.pixels.empty()) out.pixels.push_back(index.pixels[static_cast<size_t>(a.image_id)]);
    }
    a.image_id = it->second;
    out.annotations.push_back(a);
  }
  out.validate();
  return out;
}

// ---- evaluation --------------------------------------------------------------

double average_precision(std::span<const Detection> detections, const std::map<int64_t, std::vector<Box>>& gt,
                         double iou_threshold) {
  size_t total_gt = 0;
  for (const auto& [_, boxes] : gt) total_gt += boxes.size();
  if (total_gt == 0) return 0.0;
  std::vector<size_t> order(detections.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return detections[a].score > detections[b].score; });

  std::map<int64_t, std::vector<bool>> taken;
  for (const auto& [img, boxes] : gt) taken[img].assign(boxes.size(), false);
  std::vector<double> precision, recall;
  size_t tp = 0, fp = 0;
  for (size_t i : order) {
    const Detection& d = detections[i];
    bool hit = false;
    auto it = gt.find(d.image_id);
    if (it != gt.end()) {
      double best = -1.0;
      size_t best_j = 0;
      for (size_t j = 0; j < it->second.size(); ++j) {
        const double v = iou(d.box, it->second[j]);
        if (v > best) {
          best = v;
          best_j = j;
        }
      }
      auto& flags = taken[d.image_id];
      if (best >= iou_threshold && !flags[best_j]) {
        flags[best_j] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

ApReport evaluate_ap50(std::span<const Detection> detections, const DatasetIndex& index, std::span<const int> classes) {
  ApReport report;
  double total = 0.0;
  for (int c : classes) {
    std::map<int64_t, std::vector<Box>> gt;
    for (const Annotation& a : index.annotations) {
      if (a.class_id == c) gt[a.image_id].push_back(a.box);
    }
    if (gt.empty()) {
      report.absent.push_back(c);
      continue;
    }
    std::vector<Detection> dets;
    for (const Detection& d : detections) {
      if (d.class_id == c) dets.push_back(d);
    }
    const double ap = average_precision(dets, gt, 0.5);
    report.per_class[c] = ap;
    total += ap;
  }
  if (!report.per_class.empty()) report.mean = total / static_cast<double>(report.per_class.size());
  return report;
}

RunSummary summarize_runs(std::span<const double> values) {
  RunSummary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace fct
