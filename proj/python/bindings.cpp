#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fct/config.hpp"
#include "fct/heatmap.hpp"
#include "fct/train.hpp"

namespace py = pybind11;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

fct::Tensor to_tensor(const Array& a) {
  fct::Shape shape(a.shape(), a.shape() + a.ndim());
  return fct::Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const fct::Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array image_array(const fct::Image& img) {
  Array out({img.height, img.width, int64_t{3}});
  std::transform(img.rgb.begin(), img.rgb.end(), out.mutable_data(), [](uint8_t v) { return static_cast<double>(v); });
  return out;
}

std::vector<fct::Box> to_boxes(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 4) throw fct::ShapeError("boxes must be an [K, 4] array");
  std::vector<fct::Box> out;
  const auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back({r(i, 0), r(i, 1), r(i, 2), r(i, 3)});
  return out;
}

Array from_boxes(const std::vector<fct::Box>& boxes) {
  Array out({static_cast<py::ssize_t>(boxes.size()), py::ssize_t{4}});
  auto w = out.mutable_unchecked<2>();
  for (size_t i = 0; i < boxes.size(); ++i) {
    const auto k = static_cast<py::ssize_t>(i);
    w(k, 0) = boxes[i].x1;
    w(k, 1) = boxes[i].y1;
    w(k, 2) = boxes[i].x2;
    w(k, 3) = boxes[i].y2;
  }
  return out;
}

// Model plus the configuration it was built with.
struct Detector {
  fct::PipelineConfig config;
  fct::Checkpoint checkpoint;

  bool two_branch() const { return checkpoint.class_ids.empty(); }
};

fct::PipelineConfig config_from(const std::string& text) {
  return text.empty() ? fct::PipelineConfig{} : fct::parse_config(text);
}

}  // namespace

PYBIND11_MODULE(_fct, m) {
  m.doc() = "Cross-transformer few-shot detector";

  py::register_exception<fct::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<fct::NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<fct::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<fct::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<fct::IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<fct::PointOutsideError>(m, "PointOutsideError", PyExc_IndexError);

  // ---- geometry and evaluation ----
  m.def("iou", [](const Array& a, const Array& b) {
    const auto x = to_boxes(a), y = to_boxes(b);
    Array out({static_cast<py::ssize_t>(x.size()), static_cast<py::ssize_t>(y.size())});
    auto w = out.mutable_unchecked<2>();
    for (size_t i = 0; i < x.size(); ++i) {
      for (size_t j = 0; j < y.size(); ++j) w(static_cast<py::ssize_t>(i), static_cast<py::ssize_t>(j)) = fct::iou(x[i], y[j]);
    }
    return out;
  }, py::arg("a"), py::arg("b"), "Pairwise IoU of two [K, 4] box arrays (x1, y1, x2, y2).");

  m.def("nms", [](const Array& boxes, const std::vector<double>& scores, double iou_threshold) {
    return fct::nms(to_boxes(boxes), scores, iou_threshold);
  }, py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold"));

  m.def("roi_align", [](const Array& features, const Array& boxes, std::vector<int64_t> batch_index, int64_t roi_size,
                        int64_t sampling_ratio, double stride) {
    const fct::TokenSequence feat = fct::from_grid(to_tensor(features), fct::Branch::kQuery);
    const auto b = to_boxes(boxes);
    if (batch_index.empty()) batch_index.assign(b.size(), 0);
    return to_array(fct::roi_align(feat, b, batch_index, roi_size, sampling_ratio, stride));
  }, py::arg("features"), py::arg("boxes"), py::arg("batch_index") = std::vector<int64_t>{}, py::arg("roi_size") = 7,
     py::arg("sampling_ratio") = 2, py::arg("stride") = 16.0,
     "Bilinear RoIAlign of [B, H, W, C] features; returns [K, roi, roi, C].");

  m.def("average_precision", [](const std::vector<std::tuple<int64_t, double, std::array<double, 4>>>& detections,
                                const std::map<int64_t, std::vector<std::array<double, 4>>>& gt, double iou_threshold) {
    std::vector<fct::Detection> dets;
    for (const auto& [img, score, b] : detections) dets.push_back({img, 0, score, {b[0], b[1], b[2], b[3]}});
    std::map<int64_t, std::vector<fct::Box>> g;
    for (const auto& [img, boxes] : gt) {
      for (const auto& b : boxes) g[img].push_back({b[0], b[1], b[2], b[3]});
    }
    return fct::average_precision(dets, g, iou_threshold);
  }, py::arg("detections"), py::arg("gt"), py::arg("iou_threshold") = 0.5,
     "detections: [(image_id, score, (x1, y1, x2, y2))], gt: {image_id: [(x1, y1, x2, y2)]}.");

  m.def("attention_masks", [](const std::vector<double>& row, int64_t qh, int64_t qw, int64_t sh, int64_t sw) {
    const fct::AttentionMasks masks = fct::attention_masks(row, qh, qw, sh, sw);
    auto grid = [](const fct::Heatmap& h) {
      Array out({h.grid_h, h.grid_w});
      std::copy(h.values.begin(), h.values.end(), out.mutable_data());
      return out;
    };
    return py::make_tuple(grid(masks.query), grid(masks.support));
  }, py::arg("row"), py::arg("qh"), py::arg("qw"), py::arg("sh"), py::arg("sw"));

  // ---- configuration and data ----
  m.def("default_config", [] { return fct::config_to_text(fct::PipelineConfig{}); });
  m.def("normalize_config", [](const std::string& text) { return fct::config_to_text(fct::parse_config(text)); },
        "Parses a config and prints it back with every key.");

  py::class_<fct::DatasetIndex>(m, "Dataset")
      .def_static("read", &fct::read_dataset, py::arg("path"))
      .def("write", [](const fct::DatasetIndex& d, const std::filesystem::path& p) { fct::write_dataset(d, p); })
      .def("__len__", [](const fct::DatasetIndex& d) { return d.images.size(); })
      .def("image", [](const fct::DatasetIndex& d, int64_t i) { return image_array(d.image(i)); })
      .def("annotations", [](const fct::DatasetIndex& d) {
        std::vector<std::tuple<int64_t, int, std::array<double, 4>>> out;
        for (const auto& a : d.annotations) out.emplace_back(a.image_id, a.class_id, std::array{a.box.x1, a.box.y1, a.box.x2, a.box.y2});
        return out;
      })
      .def("k_shot", &fct::make_k_shot_subset, py::arg("k"), py::arg("seed"))
      .def_readonly("base_classes", &fct::DatasetIndex::base_classes)
      .def_readonly("novel_classes", &fct::DatasetIndex::novel_classes);

  m.def("generate_corpora", [](const std::string& config, uint64_t seed) {
    fct::Corpora c = fct::generate_corpora(config_from(config), seed);
    return py::make_tuple(std::move(c.base), std::move(c.pool), std::move(c.test));
  }, py::arg("config") = "", py::arg("seed") = 0, "Synthetic (base, pool, test) corpora.");

  // ---- models ----
  py::class_<Detector>(m, "Detector")
      .def_static("load", [](const std::filesystem::path& path, const std::string& config) {
        return Detector{config_from(config), fct::load_checkpoint(path)};
      }, py::arg("path"), py::arg("config") = "")
      .def_static("init_two_branch", [](const std::string& config, uint64_t seed) {
        Detector d{config_from(config), {}};
        d.checkpoint.params = fct::init_two_branch_model(d.config.model, seed);
        d.checkpoint.config_hash = fct::model_hash(d.config.model);
        return d;
      }, py::arg("config") = "", py::arg("seed") = 0)
      .def("save", [](const Detector& d, const std::filesystem::path& p) { fct::save_checkpoint(d.checkpoint, p); })
      .def_property_readonly("two_branch", &Detector::two_branch)
      .def_property_readonly("class_ids", [](const Detector& d) { return d.checkpoint.class_ids; })
      .def_property_readonly("step", [](const Detector& d) { return d.checkpoint.step; })
      .def("parameter_names", [](const Detector& d) { return d.checkpoint.params.names(); })
      .def("parameter", [](const Detector& d, const std::string& name) { return to_array(d.checkpoint.params.get(name)); })
      .def("backbone", [](const Detector& d, const Array& query, const Array& support, bool cross) {
        fct::NoGradGuard guard;
        fct::BackboneOptions opt;
        opt.mode = cross ? fct::AttentionMode::kCross : fct::AttentionMode::kSelf;
        const fct::BackboneOutput out = fct::backbone_forward(to_tensor(query), to_tensor(support), d.checkpoint.params,
                                                              d.config.model.plan, opt);
        return py::make_tuple(to_array(fct::to_grid(out.query_feat)), to_array(fct::to_grid(out.support_feat)));
      }, py::arg("query"), py::arg("support"), py::arg("cross") = true,
         "Standardized images [1, H, W, 3] and [B_s, S, S, 3] to stage-3 feature grids.")
      .def("detect", [](const Detector& d, const fct::DatasetIndex& test, const fct::DatasetIndex& support,
                        std::vector<int> classes, int64_t b_support) {
        std::vector<fct::Detection> dets;
        {
          py::gil_scoped_release release;
          dets = d.two_branch()
                     ? fct::detect_two_branch(d.checkpoint.params, d.config.model, test, support, classes, b_support,
                                              d.config.post)
                     : fct::detect_single_branch(d.checkpoint, d.config.model, test, d.config.post);
        }
        std::vector<std::tuple<int64_t, int, double, std::array<double, 4>>> out;
        for (const auto& x : dets) out.emplace_back(x.image_id, x.class_id, x.score, std::array{x.box.x1, x.box.y1, x.box.x2, x.box.y2});
        return out;
      }, py::arg("test"), py::arg("support"), py::arg("classes"), py::arg("b_support") = 1)
      .def("evaluate", [](const Detector& d, const fct::DatasetIndex& test, const fct::DatasetIndex& support,
                          int64_t b_support) {
        py::gil_scoped_release release;
        const auto& novel = test.novel_classes;
        const auto dets = d.two_branch() ? fct::detect_two_branch(d.checkpoint.params, d.config.model, test, support,
                                                                  novel, b_support, d.config.post)
                                         : fct::detect_single_branch(d.checkpoint, d.config.model, test, d.config.post);
        return fct::evaluate_ap50(dets, test, novel).per_class;
      }, py::arg("test"), py::arg("support"), py::arg("b_support") = 1, "Novel-class AP50 per class.");

  // ---- training steps ----
  auto losses = [](const fct::TrainResult& r) {
    std::vector<double> out;
    for (const auto& rec : r.log) out.push_back(rec.loss);
    return out;
  };
  m.def("pretrain", [losses](const fct::DatasetIndex& base, const std::string& config, uint64_t seed) {
    Detector d{config_from(config), {}};
    py::gil_scoped_release release;
    const fct::TrainResult r = fct::pretrain_single_branch(base, d.config.model, d.config.pretrain, seed);
    d.checkpoint = r.checkpoint;
    return std::make_pair(d, losses(r));
  }, py::arg("base"), py::arg("config") = "", py::arg("seed") = 0, "Step 1; returns (detector, losses).");
  m.def("train_base", [losses](const fct::DatasetIndex& base, const Detector* init, const std::string& config,
                               uint64_t seed) {
    Detector d{config_from(config), {}};
    py::gil_scoped_release release;
    const fct::TrainResult r =
        fct::train_two_branch(base, init ? &init->checkpoint : nullptr, d.config.model, d.config.train_base, seed);
    d.checkpoint = r.checkpoint;
    return std::make_pair(d, losses(r));
  }, py::arg("base"), py::arg("init"), py::arg("config") = "", py::arg("seed") = 0,
     "Step 2 from a step-1 detector (or None); returns (detector, losses).");
  m.def("finetune", [losses](const fct::DatasetIndex& shots, int k, const Detector& init, uint64_t seed) {
    Detector d{init.config, {}};
    py::gil_scoped_release release;
    const fct::TrainResult r =
        init.two_branch()
            ? fct::finetune_k_shot(shots, k, init.checkpoint, d.config.model, d.config.finetune, seed)
            : fct::finetune_single_branch(shots, k, init.checkpoint, d.config.model, d.config.baseline_finetune, seed);
    d.checkpoint = r.checkpoint;
    return std::make_pair(d, losses(r));
  }, py::arg("shots"), py::arg("k"), py::arg("init"), py::arg("seed") = 0,
     "Step 3 (two-branch) or the single-branch baseline, depending on `init`.");
}
