#pragma once

// Run configuration: canonical key=value text with '#' comments, overlaid by
// command-line flags. Every key has a default, unknown keys are rejected and
// the effective values can be echoed for a reproducibility log.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "studyformer/backbone.hpp"
#include "studyformer/data.hpp"
#include "studyformer/errors.hpp"
#include "studyformer/losses.hpp"
#include "studyformer/synthetic.hpp"
#include "studyformer/train.hpp"
#include "studyformer/vit.hpp"

namespace studyformer {

class RunConfig {
 public:
  RunConfig() {
    values_ = {
        {"seed", "0"},
        {"scale", "desk"},
        {"synth.studies_before", "2000"},
        {"synth.studies_after", "600"},
        {"synth.image_size", "64"},
        {"synth.noise", "0.06"},
        {"synth.shape_probability", "0.25"},
        {"synth.min_views", "1"},
        {"synth.max_views", "6"},
        {"split.cutoff", "2022-04-01"},
        {"split.val_fraction", "0.5"},
        {"model.kind", "studyformer"},
        {"model.labels", ""},
        {"model.mvcnn_hidden", "32"},
        {"vit.depth", "2"},
        {"vit.heads", "2"},
        {"vit.mlp_dim", "64"},
        {"vit.embed_dim", "32"},
        {"backbone.stage_channels", "16,32"},
        {"backbone.downsample", "4,4"},
        {"backbone.out_grid", "4"},
        {"train.pretrain_epochs", "6"},
        {"train.pretrain_lr", "0.001"},
        {"train.stage1_epochs", "10"},
        {"train.stage2_epochs", "4"},
        {"train.batch_size", "8"},
        {"train.lr_stage1", "0.001"},
        {"train.lr_stage2", "0.0003"},
        {"train.loss", "bce"},
        {"train.focal_alpha", "1"},
        {"train.focal_gamma", "2"},
    };
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // Reads key=value lines; blank lines and '#' comments are ignored.
  void merge_text(std::istream& in, const std::string& origin) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t\r");
      line = line.substr(first, last - first + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
      }
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      if (!has(key)) throw ConfigError("unknown config key '" + key + "' in " + origin);
      values_[key] = trim(line.substr(eq + 1));
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    merge_text(in, path);
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key) const { return parse_u64(get(key), key); }

  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(out)) {
      throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
    }
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& part : detail::split(get(key), ',')) out.push_back(static_cast<std::size_t>(parse_u64(part, key)));
    return out;
  }

  std::vector<std::string> get_list(const std::string& key) const {
    if (get(key).empty()) return {};
    return detail::split(get(key), ',');
  }

  // key=value lines in key order.
  std::string effective_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
    return os.str();
  }

  // ---- typed views ------------------------------------------------------

  bool paper_scale() const {
    const std::string& s = get("scale");
    if (s != "desk" && s != "paper") throw ConfigError("config key 'scale' must be desk or paper, got '" + s + "'");
    return s == "paper";
  }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s = SyntheticSpec::benchmark(get_u64("seed"));
    s.studies_before_cutoff = get_size("synth.studies_before");
    s.studies_after_cutoff = get_size("synth.studies_after");
    s.image_size = get_size("synth.image_size");
    s.noise = get_double("synth.noise");
    s.shape_probability = get_double("synth.shape_probability");
    s.min_views = get_size("synth.min_views");
    s.max_views = get_size("synth.max_views");
    s.cutoff = split_cutoff();
    try {
      s.validate();
    } catch (const ContractError& e) {
      throw ConfigError(std::string("synth: ") + e.what());
    }
    return s;
  }

  Date split_cutoff() const {
    try {
      return parse_date(get("split.cutoff"));
    } catch (const ValidationError&) {
      throw ConfigError("config key 'split.cutoff' needs a YYYY-MM-DD date, got '" + get("split.cutoff") + "'");
    }
  }

  double val_fraction() const {
    const double f = get_double("split.val_fraction");
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("config key 'split.val_fraction' must lie in (0, 1)");
    return f;
  }

  BackboneConfig backbone_config() const {
    if (paper_scale()) return BackboneConfig::paper();
    BackboneConfig b = BackboneConfig::desk();
    b.input_size = get_size("synth.image_size");
    b.stage_channels = get_sizes("backbone.stage_channels");
    b.downsample = get_sizes("backbone.downsample");
    b.out_grid = get_size("backbone.out_grid");
    if (!b.stage_channels.empty()) b.out_channels = b.stage_channels.back();
    b.validate();
    return b;
  }

  ViTConfig vit_config() const {
    ViTConfig v = paper_scale() ? ViTConfig::paper() : ViTConfig::desk();
    if (!paper_scale()) {
      v.depth = get_size("vit.depth");
      v.heads = get_size("vit.heads");
      v.mlp_dim = get_size("vit.mlp_dim");
      v.embed_dim = get_size("vit.embed_dim");
    }
    return v;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.stage1_epochs = get_size("train.stage1_epochs");
    t.stage2_epochs = get_size("train.stage2_epochs");
    t.batch_size = get_size("train.batch_size");
    t.lr_stage1 = get_double("train.lr_stage1");
    t.lr_stage2 = get_double("train.lr_stage2");
    t.loss = parse_loss(get("train.loss"));
    t.focal_alpha = get_double("train.focal_alpha");
    t.focal_gamma = get_double("train.focal_gamma");
    t.seed = get_u64("seed");
    t.validate();
    return t;
  }

  TrainConfig pretrain_config() const {
    TrainConfig t = train_config();
    t.stage1_epochs = 0;
    t.stage2_epochs = get_size("train.pretrain_epochs");
    t.lr_stage2 = get_double("train.pretrain_lr");
    t.validate();
    return t;
  }

  // Label names -> indices into `vocabulary`.
  std::vector<std::size_t> label_subset(const std::vector<std::string>& vocabulary) const {
    std::vector<std::size_t> out;
    for (const auto& name : get_list("model.labels")) {
      const auto it = std::find(vocabulary.begin(), vocabulary.end(), name);
      if (it == vocabulary.end()) throw ConfigError("config key 'model.labels' names unknown label '" + name + "'");
      out.push_back(static_cast<std::size_t>(it - vocabulary.begin()));
    }
    return out;
  }

 private:
  static std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
      out = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size() || v.front() == '-') {
      throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + v + "'");
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace studyformer
