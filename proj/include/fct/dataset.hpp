#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fct/image.hpp"

namespace fct {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- synthetic scenes ----------------------------------------------------
enum class ShapeKind : int { kCircle = 0, kSquare = 1, kTriangle = 2, kDiamond = 3 };
enum class FillKind : int { kSolid = 0, kStripes = 1, kChecker = 2 };

constexpr int kNumShapes = 4;
constexpr int kNumFills = 3;
constexpr int kNumClasses = kNumShapes * kNumFills;

/// Class id = shape * kNumFills + fill.
inline ShapeKind class_shape(int class_id) { return static_cast<ShapeKind>(class_id / kNumFills); }
inline FillKind class_fill(int class_id) { return static_cast<FillKind>(class_id % kNumFills); }

struct ObjectSpec {
  int class_id = 0;
  double cx = 0, cy = 0, size = 0;  // centre and bounding extent in pixels
  int color_jitter[3] = {0, 0, 0};
};

struct SceneSpec {
  int64_t width = 64;
  int64_t height = 64;
  uint64_t background_seed = 0;
  std::vector<ObjectSpec> objects;
};

/// Deterministic rasterization: cluttered background, then every object
/// (pixel centres inside the shape take the fill pattern).
Image render_scene(const SceneSpec& scene);
/// Tight box of the pixels covered by `object` on a width x height canvas.
Box object_mask_box(const ObjectSpec& object, int64_t width, int64_t height);
bool covers_pixel(const ObjectSpec& object, int64_t x, int64_t y);

// ---- dataset index ---------------------------------------------------------
struct ImageRecord {
  std::string path;
  int64_t width = 0;
  int64_t height = 0;
};

struct Annotation {
  int64_t image_id = 0;
  int class_id = 0;
  Box box;
};

struct DatasetIndex {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  std::vector<Image> pixels;  // parallel to `images` once loaded

  /// Throws DataError if the class split overlaps or an annotation points
  /// at a missing image.
  void validate() const;
  std::vector<int64_t> annotations_of_class(int class_id) const;
  std::vector<Box> boxes_in_image(int64_t image_id, int class_id) const;
  std::vector<Annotation> annotations_in_image(int64_t image_id) const;
  const Image& image(int64_t image_id) const;
};

/// Default 8 base / 4 novel split; every novel (shape, fill) pairing has both
/// its shape and its fill represented among the base classes.
std::vector<int> default_novel_classes();
std::vector<int> default_base_classes();

struct CorpusOptions {
  int64_t image_size = 64;
  double min_object = 16.0;
  double max_object = 30.0;
  int max_instances = 3;
  std::string name = "img";
};

/// Renders `n_images` scenes with 1..max_instances non-overlapping objects
/// drawn from `classes` (class counts balanced round-robin). Annotation boxes
/// are the tight mask boxes. Deterministic per seed.
DatasetIndex generate_synthetic_corpus(uint64_t seed, int64_t n_images, std::span<const int> classes,
                                       const CorpusOptions& options = {});

/// Writes `<dir>/images/*.ppm`, `<dir>/annotations.txt` and `<dir>/split.txt`.
void write_dataset(const DatasetIndex& index, const std::filesystem::path& dir);
/// Reads the files written by write_dataset and loads every image.
DatasetIndex read_dataset(const std::filesystem::path& dir);

/// Annotation lines: `image_path class_id x1 y1 x2 y2`.
void write_annotations(const DatasetIndex& index, const std::filesystem::path& file);
/// Split lines: `base: id...` and `novel: id...`.
void write_split(const DatasetIndex& index, const std::filesystem::path& file);

// ---- episodes --------------------------------------------------------------
struct EpisodeBatch {
  Tensor query;            // [1, H, W, 3]
  std::vector<Box> gt;     // boxes of `class_id` in the query
  Tensor support;          // [B_s, S, S, 3]
  int class_id = 0;
  int64_t query_image = 0;
  std::vector<int64_t> support_annotations;
};

struct EpisodeOptions {
  int64_t support_size = 32;
  double crop_expand = 0.10;
  /// Permit support crops from the query image when the class has too few
  /// instances elsewhere (needed for 1-shot fine-tuning).
  bool allow_query_support = false;
};

EpisodeBatch sample_episode(const DatasetIndex& index, int class_id, int64_t support_count, std::mt19937_64& rng,
                            const EpisodeOptions& options = {});
/// Episode for a fixed query image with explicit support annotations.
EpisodeBatch make_episode(const DatasetIndex& index, int64_t query_image, int class_id,
                          std::span<const int64_t> support_annotations, const DatasetIndex& support_index,
                          const EpisodeOptions& options = {});
Image support_crop(const DatasetIndex& index, int64_t annotation, const EpisodeOptions& options = {});

/// Sub-sample with exactly K annotated boxes per class (base and novel).
/// Only the selected annotations are kept; an image is taken only when all of
/// its instances of the class fit. Throws DataError when K is unattainable.
DatasetIndex make_k_shot_subset(const DatasetIndex& index, int k, uint64_t seed);

// ---- evaluation ------------------------------------------------------------
struct Detection {
  int64_t image_id = 0;
  int class_id = 0;
  double score = 0.0;
  Box box;
};

struct ApReport {
  std::map<int, double> per_class;
  std::vector<int> absent;  // requested classes without ground truth
  double mean = 0.0;
};

/// Area under the precision envelope of one class's ranked detections.
/// Greedy matching: each detection takes the highest-IoU ground truth in its
/// image; it is a true positive only if that IoU >= threshold and the box was
/// not already taken.
double average_precision(std::span<const Detection> detections, const std::map<int64_t, std::vector<Box>>& gt,
                         double iou_threshold = 0.5);

ApReport evaluate_ap50(std::span<const Detection> detections, const DatasetIndex& index, std::span<const int> classes);

struct RunSummary {
  double mean = 0.0;
  double stddev = 0.0;
};
RunSummary summarize_runs(std::span<const double> values);

}  // namespace fct
