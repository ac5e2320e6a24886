#include "fct/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace fct {

PipelineConfig::PipelineConfig() {
  model.head.roi_size = 5;
  pretrain.steps = 2000;
  pretrain.lr = 1e-3;
  train_base.steps = 2000;
  train_base.lr = 5e-4;
  train_base.b_support = 2;
  train_base.negative_episodes = 0.25;
  finetune.steps = 200;
  finetune.lr = 2e-4;
  finetune.b_support = 5;
  finetune.negative_episodes = 0.25;
  baseline_finetune.steps = 200;
  baseline_finetune.lr = 2e-4;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (!in || !in.eof()) throw ConfigError("not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field number_field(T& ref) {
  return {[&ref](const std::string& v) { ref = parse_number<T>(v); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(ref);
            } else {
              return std::to_string(ref);
            }
          }};
}

Field bool_field(bool& ref) {
  return {[&ref](const std::string& v) { ref = parse_bool(v); }, [&ref] { return std::string(ref ? "true" : "false"); }};
}

using Section = std::vector<std::pair<std::string, Field>>;

Section schedule_fields(Schedule& s) {
  return {{"steps", number_field(s.steps)},
          {"lr", number_field(s.lr)},
          {"weight_decay", number_field(s.weight_decay)},
          {"milestone", number_field(s.milestone)},
          {"clip_norm", number_field(s.clip_norm)},
          {"b_support", number_field(s.b_support)},
          {"negative_episodes", number_field(s.negative_episodes)}};
}

Section stage_fields(StagePlan& st) {
  return {{"channels", number_field(st.channels)},     {"layers", number_field(st.layers)},
          {"heads", number_field(st.heads)},           {"sr_ratio", number_field(st.sr_ratio)},
          {"merge_stride", number_field(st.merge_stride)}, {"mlp_ratio", number_field(st.mlp_ratio)}};
}

// Field table for every section except the per-stage ones.
std::vector<std::pair<std::string, Section>> sections(PipelineConfig& c) {
  BackbonePlan& p = c.model.plan;
  HeadConfig& h = c.model.head;
  Section backbone = {
      {"query_size", number_field(p.query_size)},
      {"support_size", number_field(p.support_size)},
      {"sr_mode", {[&p](const std::string& v) {
                     if (v == "pool") {
                       p.sr_mode = SrMode::kAveragePool;
                     } else if (v == "strided") {
                       p.sr_mode = SrMode::kStridedProjection;
                     } else {
                       throw ConfigError("sr_mode must be pool or strided");
                     }
                   },
                   [&p] { return std::string(p.sr_mode == SrMode::kAveragePool ? "pool" : "strided"); }}},
      {"norm", {[&p](const std::string& v) {
                  if (v == "pre") {
                    p.placement = NormPlacement::kPreNorm;
                  } else if (v == "post") {
                    p.placement = NormPlacement::kPostNorm;
                  } else {
                    throw ConfigError("norm must be pre or post");
                  }
                },
                [&p] { return std::string(p.placement == NormPlacement::kPreNorm ? "pre" : "post"); }}},
      {"sr_norm", bool_field(p.sr_norm)},
      {"overlap_patches", bool_field(p.overlap_patches)},
      {"branch_embedding", bool_field(p.use_branch_embedding)},
      {"eps", number_field(p.eps)},
      {"stages", {[&p](const std::string& v) {
                    const auto n = parse_number<int64_t>(v);
                    if (n < 1 || n > 8) throw ConfigError("stages must be in [1, 8]");
                    p.stages.resize(static_cast<size_t>(n), p.stages.back());
                  },
                  [&p] { return std::to_string(p.stages.size()); }}}};
  Section head = {
      {"anchor_size", number_field(h.anchors.size)},
      {"anchor_ratios", {[&h](const std::string& v) {
                           std::vector<double> r;
                           std::stringstream ss(v);
                           std::string item;
                           while (std::getline(ss, item, ',')) r.push_back(parse_number<double>(trim(item)));
                           if (r.empty()) throw ConfigError("anchor_ratios is empty");
                           h.anchors.ratios = r;
                         },
                         [&h] {
                           std::string s;
                           for (size_t i = 0; i < h.anchors.ratios.size(); ++i) {
                             s += (i ? "," : "") + fmt(h.anchors.ratios[i]);
                           }
                           return s;
                         }}},
      {"rpn_hidden", number_field(h.rpn_hidden)},
      {"roi_size", number_field(h.roi_size)},
      {"sampling_ratio", number_field(h.sampling_ratio)},
      {"proposals", number_field(h.proposals)},
      {"gt_jitter", number_field(h.gt_jitter)},
      {"rpn_nms_iou", number_field(h.rpn_nms_iou)},
      {"rpn_pos_iou", number_field(h.rpn_pos_iou)},
      {"rpn_neg_iou", number_field(h.rpn_neg_iou)},
      {"head_pos_iou", number_field(h.head_pos_iou)},
      {"stage4_layers", number_field(h.stage4_layers)},
      {"stage4_heads", number_field(h.stage4_heads)},
      {"stage4_mlp_ratio", number_field(h.stage4_mlp_ratio)},
      {"match_hidden", number_field(h.match_hidden)},
      {"smooth_l1_beta", number_field(h.smooth_l1_beta)}};
  Section data = {{"base_images", number_field(c.data.base_images)},
                  {"pool_images", number_field(c.data.pool_images)},
                  {"test_images", number_field(c.data.test_images)},
                  {"min_object", number_field(c.data.min_object)},
                  {"max_object", number_field(c.data.max_object)},
                  {"max_instances", number_field(c.data.max_instances)}};
  Section eval = {{"score_thresh", number_field(c.post.score_thresh)},
                  {"nms_iou", number_field(c.post.nms_iou)},
                  {"max_detections", number_field(c.post.max_detections)}};
  return {{"data", data},
          {"backbone", backbone},
          {"head", head},
          {"pretrain", schedule_fields(c.pretrain)},
          {"train_base", schedule_fields(c.train_base)},
          {"finetune", schedule_fields(c.finetune)},
          {"baseline_finetune", schedule_fields(c.baseline_finetune)},
          {"eval", eval}};
}

Section* find_section(std::vector<std::pair<std::string, Section>>& all, const std::string& name) {
  for (auto& [n, s] : all) {
    if (n == name) return &s;
  }
  return nullptr;
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig c;
  auto all = sections(c);
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    Section stage_section;
    Section* fields = nullptr;
    if (section.rfind("stage", 0) == 0 && section.size() > 5) {
      int64_t idx = 0;
      try {
        idx = parse_number<int64_t>(section.substr(5));
      } catch (const ConfigError&) {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      auto& stages = c.model.plan.stages;
      if (idx < 1 || idx > static_cast<int64_t>(stages.size())) {
        throw ConfigError(where + "[" + section + "] is beyond backbone.stages");
      }
      stage_section = stage_fields(stages[static_cast<size_t>(idx - 1)]);
      fields = &stage_section;
    } else {
      fields = find_section(all, section);
      if (!fields) throw ConfigError(where + "unknown section [" + section + "]");
    }
    bool found = false;
    for (auto& [name, field] : *fields) {
      if (name != key) continue;
      try {
        field.set(value);
      } catch (const ConfigError& e) {
        throw ConfigError(where + section + "." + key + ": " + e.what());
      }
      found = true;
    }
    if (!found) throw ConfigError(where + "unknown key " + section + "." + key);
  }
  try {
    c.model.plan.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("inconsistent backbone plan: ") + e.what());
  }
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_to_text(const PipelineConfig& config) {
  PipelineConfig c = config;
  auto all = sections(c);
  std::ostringstream out;
  auto emit = [&out](const std::string& name, Section& s) {
    out << '[' << name << "]\n";
    for (auto& [key, field] : s) out << key << " = " << field.get() << '\n';
    out << '\n';
  };
  for (auto& [name, s] : all) {
    emit(name, s);
    if (name == "backbone") {
      for (size_t i = 0; i < c.model.plan.stages.size(); ++i) {
        Section st = stage_fields(c.model.plan.stages[i]);
        emit("stage" + std::to_string(i + 1), st);
      }
    }
  }
  return out.str();
}

CorpusOptions corpus_options(const PipelineConfig& config) {
  CorpusOptions co;
  co.image_size = config.model.plan.query_size;
  co.min_object = static_cast<double>(config.data.min_object);
  co.max_object = static_cast<double>(config.data.max_object);
  co.max_instances = config.data.max_instances;
  return co;
}

Corpora generate_corpora(const PipelineConfig& config, uint64_t seed) {
  CorpusOptions co = corpus_options(config);
  std::vector<int> all(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) all[static_cast<size_t>(c)] = c;
  Corpora out;
  co.name = "base";
  out.base = generate_synthetic_corpus(seed * 3 + 0, config.data.base_images, default_base_classes(), co);
  co.name = "pool";
  out.pool = generate_synthetic_corpus(seed * 3 + 1, config.data.pool_images, all, co);
  co.name = "test";
  out.test = generate_synthetic_corpus(seed * 3 + 2, config.data.test_images, all, co);
  return out;
}

}  // namespace fct
