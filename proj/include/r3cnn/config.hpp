#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/inference.hpp"
#include "r3cnn/model.hpp"
#include "r3cnn/r3loop.hpp"
#include "r3cnn/synthdata.hpp"

namespace r3cnn {

// Flat namespaced key-value config, e.g. "loop.thresholds = 0.5,0.6,0.7".
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& is) {
    Config cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected 'key = value', got '" +
                                    trimmed + "'");
      cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    return parse(f);
  }

  void serialize(std::ostream& os) const {
    for (const auto& k : order_) os << k << " = " << values_.at(k) << "\n";
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write config: " + path);
    serialize(f);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw std::invalid_argument("config key '" + key +
                                  "': expected integer, got '" + it->second +
                                  "'");
    }
  }

  double get_double(const std::string& key, double dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw std::invalid_argument("config key '" + key +
                                  "': expected number, got '" + it->second +
                                  "'");
    }
  }

  bool get_bool(const std::string& key, bool dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::invalid_argument("config key '" + key +
                                "': expected bool, got '" + it->second + "'");
  }

  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stod(trim(item)));
      } catch (...) {
        throw std::invalid_argument("config key '" + key +
                                    "': expected number list, got '" +
                                    it->second + "'");
      }
    }
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key,
                                     const std::vector<std::size_t>& dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    std::vector<std::size_t> out;
    for (double v : get_doubles(key, {})) {
      if (v < 0 || v != std::floor(v))
        throw std::invalid_argument("config key '" + key +
                                    "': expected non-negative integers");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  bool operator==(const Config& other) const {
    return values_ == other.values_;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

// Everything needed to reproduce a run: dataset spec, model hyperparameters,
// loop schedule, loss/optimizer settings and seeds.
struct RunConfig {
  SceneSpec scene;
  std::size_t train_scenes = 2000;
  std::size_t val_scenes = 200;
  ModelConfig model;
  LoopSchedule schedule{{0.5, 0.6, 0.7}, 3, 3, {1.0, 1.0, 1.0}};
  LossConfig loss;
  SamplerConfig sampler;
  RpnTrainConfig rpn_train;
  OptimConfig optim;
  PostConfig post;
  std::uint64_t seed = 42;
  std::string out_dir = "out";

  static RunConfig from_config(const Config& c) {
    RunConfig r;
    r.scene.image_size =
        static_cast<std::size_t>(c.get_int("data.image_size", 128));
    r.scene.shape_count_min = static_cast<int>(c.get_int("data.shape_count_min", 1));
    r.scene.shape_count_max = static_cast<int>(c.get_int("data.shape_count_max", 4));
    r.scene.min_instance_area = c.get_double("data.min_instance_area", 32.0);
    r.scene.min_visible_fraction = c.get_double("data.min_visible_fraction", 0.25);
    r.scene.seed = static_cast<std::uint64_t>(c.get_int("data.seed", 7));
    r.train_scenes = static_cast<std::size_t>(c.get_int("data.train_scenes", 2000));
    r.val_scenes = static_cast<std::size_t>(c.get_int("data.val_scenes", 200));

    r.model.backbone_channels =
        c.get_sizes("model.backbone_channels", {32, 64, 64, 64});
    r.model.backbone_strides =
        c.get_sizes("model.backbone_strides", {2, 2, 2, 1});
    r.model.num_classes =
        static_cast<std::size_t>(c.get_int("model.num_classes", 3));
    r.model.head_hidden =
        static_cast<std::size_t>(c.get_int("model.head_hidden", 256));
    r.model.roi_size = static_cast<std::size_t>(c.get_int("model.roi_size", 7));
    r.model.mask_roi_size =
        static_cast<std::size_t>(c.get_int("model.mask_roi_size", 14));
    r.model.mask_out_size =
        static_cast<std::size_t>(c.get_int("model.mask_out_size", 28));
    r.model.mask_channels =
        static_cast<std::size_t>(c.get_int("model.mask_channels", 16));
    r.model.num_heads = static_cast<std::size_t>(c.get_int("model.num_heads", 1));
    r.model.anchors.base_sizes =
        c.get_doubles("model.anchor_sizes", {16, 32, 64});
    r.model.anchors.aspect_ratios =
        c.get_doubles("model.anchor_ratios", {0.5, 1.0, 2.0});
    r.model.anchors.stride = r.model.total_stride();
    r.model.rpn_k_pre = static_cast<std::size_t>(c.get_int("rpn.k_pre", 1000));
    r.model.rpn_k_post = static_cast<std::size_t>(c.get_int("rpn.k_post", 64));
    r.model.rpn_nms_threshold = c.get_double("rpn.nms_threshold", 0.7);

    r.schedule.thresholds = c.get_doubles("loop.thresholds", {0.5, 0.6, 0.7});
    r.schedule.train_loops = static_cast<std::size_t>(
        c.get_int("loop.train_loops",
                  static_cast<std::int64_t>(r.schedule.thresholds.size())));
    r.schedule.eval_loops = static_cast<std::size_t>(c.get_int(
        "loop.eval_loops", static_cast<std::int64_t>(r.schedule.train_loops)));
    r.schedule.loop_loss_weights = c.get_doubles(
        "loop.loss_weights",
        std::vector<double>(r.schedule.train_loops, 1.0));

    r.loss.lambda = c.get_double("loss.lambda", 1.0);
    r.loss.smooth_l1_beta = c.get_double("loss.smooth_l1_beta", 1.0);

    r.sampler.total = static_cast<std::size_t>(c.get_int("sampler.total", 64));
    r.sampler.pos_fraction = c.get_double("sampler.pos_fraction", 0.25);
    r.sampler.mask_rois_per_loop =
        static_cast<std::size_t>(c.get_int("sampler.mask_rois_per_loop", 8));

    r.rpn_train.pos_iou = c.get_double("rpn.pos_iou", 0.7);
    r.rpn_train.neg_iou = c.get_double("rpn.neg_iou", 0.3);
    r.rpn_train.sample_total =
        static_cast<std::size_t>(c.get_int("rpn.sample_total", 64));
    r.rpn_train.pos_fraction = c.get_double("rpn.pos_fraction", 0.5);

    r.optim.epochs = static_cast<std::size_t>(c.get_int("opt.epochs", 12));
    r.optim.learning_rate = c.get_double("opt.learning_rate", 0.005);
    r.optim.momentum = c.get_double("opt.momentum", 0.9);
    r.optim.weight_decay = c.get_double("opt.weight_decay", 1e-4);
    r.optim.decay_epochs = c.get_sizes("opt.decay_epochs", {8, 11});
    r.optim.decay_factor = c.get_double("opt.decay_factor", 0.1);

    r.post.score_threshold = c.get_double("post.score_threshold", 0.05);
    r.post.nms_threshold = c.get_double("post.nms_threshold", 0.5);
    r.post.max_detections =
        static_cast<std::size_t>(c.get_int("post.max_detections", 100));
    r.post.average_logits = c.get_bool("post.average_logits", false);

    r.seed = static_cast<std::uint64_t>(c.get_int("seed", 42));
    r.out_dir = c.get_string("out", "out");
    return r;
  }

  Config to_config() const {
    Config c;
    auto num = [](double v) {
      std::ostringstream ss;
      ss.precision(17);
      ss << v;
      return ss.str();
    };
    auto list_d = [&](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + num(v[i]);
      return s;
    };
    auto list_s = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    c.set("data.image_size", std::to_string(scene.image_size));
    c.set("data.shape_count_min", std::to_string(scene.shape_count_min));
    c.set("data.shape_count_max", std::to_string(scene.shape_count_max));
    c.set("data.min_instance_area", num(scene.min_instance_area));
    c.set("data.min_visible_fraction", num(scene.min_visible_fraction));
    c.set("data.seed", std::to_string(scene.seed));
    c.set("data.train_scenes", std::to_string(train_scenes));
    c.set("data.val_scenes", std::to_string(val_scenes));
    c.set("model.backbone_channels", list_s(model.backbone_channels));
    c.set("model.backbone_strides", list_s(model.backbone_strides));
    c.set("model.num_classes", std::to_string(model.num_classes));
    c.set("model.head_hidden", std::to_string(model.head_hidden));
    c.set("model.roi_size", std::to_string(model.roi_size));
    c.set("model.mask_roi_size", std::to_string(model.mask_roi_size));
    c.set("model.mask_out_size", std::to_string(model.mask_out_size));
    c.set("model.mask_channels", std::to_string(model.mask_channels));
    c.set("model.num_heads", std::to_string(model.num_heads));
    c.set("model.anchor_sizes", list_d(model.anchors.base_sizes));
    c.set("model.anchor_ratios", list_d(model.anchors.aspect_ratios));
    c.set("rpn.k_pre", std::to_string(model.rpn_k_pre));
    c.set("rpn.k_post", std::to_string(model.rpn_k_post));
    c.set("rpn.nms_threshold", num(model.rpn_nms_threshold));
    c.set("rpn.pos_iou", num(rpn_train.pos_iou));
    c.set("rpn.neg_iou", num(rpn_train.neg_iou));
    c.set("rpn.sample_total", std::to_string(rpn_train.sample_total));
    c.set("rpn.pos_fraction", num(rpn_train.pos_fraction));
    c.set("loop.thresholds", list_d(schedule.thresholds));
    c.set("loop.train_loops", std::to_string(schedule.train_loops));
    c.set("loop.eval_loops", std::to_string(schedule.eval_loops));
    c.set("loop.loss_weights", list_d(schedule.loop_loss_weights));
    c.set("loss.lambda", num(loss.lambda));
    c.set("loss.smooth_l1_beta", num(loss.smooth_l1_beta));
    c.set("sampler.total", std::to_string(sampler.total));
    c.set("sampler.pos_fraction", num(sampler.pos_fraction));
    c.set("sampler.mask_rois_per_loop",
          std::to_string(sampler.mask_rois_per_loop));
    c.set("opt.epochs", std::to_string(optim.epochs));
    c.set("opt.learning_rate", num(optim.learning_rate));
    c.set("opt.momentum", num(optim.momentum));
    c.set("opt.weight_decay", num(optim.weight_decay));
    c.set("opt.decay_epochs", list_s(optim.decay_epochs));
    c.set("opt.decay_factor", num(optim.decay_factor));
    c.set("post.score_threshold", num(post.score_threshold));
    c.set("post.nms_threshold", num(post.nms_threshold));
    c.set("post.max_detections", std::to_string(post.max_detections));
    c.set("post.average_logits", post.average_logits ? "true" : "false");
    c.set("seed", std::to_string(seed));
    c.set("out", out_dir);
    return c;
  }
};

}  // namespace r3cnn
