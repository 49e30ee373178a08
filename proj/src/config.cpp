// SPDX-License-Identifier: Apache-2.0
#include "chimera/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "chimera/errors.hpp"

namespace chimera {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw FormatError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw FormatError("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config: " + key + " expects true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Entry {
  std::string key;
  std::function<void(TrainConfig&, const std::string&, const std::filesystem::path&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Entry num(std::string key, T TrainConfig::*member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*member = to_double(key, v);
            } else {
              c.*member = to_int<T>(key, v);
            }
          },
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <typename S, typename T>
Entry nested(std::string key, S TrainConfig::*section, T S::*member) {
  return {key,
          [key, section, member](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*section.*member = to_double(key, v);
            } else {
              c.*section.*member = to_int<T>(key, v);
            }
          },
          [section, member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(c.*section.*member);
            } else {
              return std::to_string(c.*section.*member);
            }
          }};
}

Entry path(std::string key, std::filesystem::path TrainConfig::*member) {
  return {key,
          [member](TrainConfig& c, const std::string& v, const std::filesystem::path& base) {
            std::filesystem::path p(v);
            if (p.empty()) {
              c.*member = p;
              return;
            }
            c.*member = (p.is_relative() && !base.empty()) ? base / p : p;
          },
          [member](const TrainConfig& c) { return (c.*member).string(); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(path("data.root", &TrainConfig::data_root));
    t.push_back(path("clip.bundle", &TrainConfig::clip_bundle));
    t.push_back(path("out.dir", &TrainConfig::out_dir));
    t.push_back(num("train.iterations", &TrainConfig::iterations));
    t.push_back(num("train.batch_size", &TrainConfig::batch_size));
    t.push_back(num("train.lr", &TrainConfig::lr));
    t.push_back(num("train.weight_decay", &TrainConfig::weight_decay));
    t.push_back(num("train.warmup_frac", &TrainConfig::warmup_frac));
    t.push_back(num("train.beta1", &TrainConfig::beta1));
    t.push_back(num("train.beta2", &TrainConfig::beta2));
    t.push_back(num("train.adam_eps", &TrainConfig::adam_eps));
    t.push_back(num("train.seed", &TrainConfig::seed));
    t.push_back(num("train.checkpoint_every", &TrainConfig::checkpoint_every));
    t.push_back({"train.mode",
                 [](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
                   c.mode = parse_zs_mode(v);
                 },
                 [](const TrainConfig& c) { return to_string(c.mode); }});
    t.push_back(nested("model.backbone_channels", &TrainConfig::backbone, &BackboneConfig::channels));
    t.push_back(nested("model.backbone_stride", &TrainConfig::backbone, &BackboneConfig::stride));
    t.push_back({"model.norm",
                 [](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
                   c.csh.norm = parse_norm_kind(v);
                 },
                 [](const TrainConfig& c) { return to_string(c.csh.norm); }});
    t.push_back(nested("model.vencoder_blocks", &TrainConfig::csh, &CSHConfig::vencoder_blocks));
    t.push_back(nested("model.bn_momentum", &TrainConfig::csh, &CSHConfig::bn_momentum));
    t.push_back(nested("model.bn_epsilon", &TrainConfig::csh, &CSHConfig::bn_epsilon));
    t.push_back(nested("model.gn_groups", &TrainConfig::csh, &CSHConfig::gn_groups));
    t.push_back(nested("sgd.k0", &TrainConfig::sgd_schedule, &DecaySchedule::k0));
    t.push_back(nested("sgd.rate", &TrainConfig::sgd_schedule, &DecaySchedule::rate));
    t.push_back(nested("sgd.k_min", &TrainConfig::sgd_schedule, &DecaySchedule::k_min));
    t.push_back({"sgd.mode",
                 [](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
                   c.sgd_schedule.mode = parse_decay_mode(v);
                 },
                 [](const TrainConfig& c) { return to_string(c.sgd_schedule.mode); }});
    t.push_back(num("sgd.tau", &TrainConfig::sgd_tau));
    t.push_back({"sgd.noise",
                 [](TrainConfig& c, const std::string& v, const std::filesystem::path&) {
                   c.sgd_noise = to_bool("sgd.noise", v);
                 },
                 [](const TrainConfig& c) { return std::string(c.sgd_noise ? "true" : "false"); }});
    t.push_back(num("sam.tau_f", &TrainConfig::sam_tau_f));
    t.push_back(num("sam.tau_c", &TrainConfig::sam_tau_c));
    t.push_back(num("sam.lambda", &TrainConfig::lambda_sam));
    t.push_back(num("loss.lambda_sam", &TrainConfig::lambda_sam));
    t.push_back(nested("loss.focal_gamma", &TrainConfig::focal, &FocalConfig::gamma));
    t.push_back(nested("loss.focal_alpha", &TrainConfig::focal, &FocalConfig::alpha));
    t.push_back(nested("pseudo.k_clusters", &TrainConfig::pseudo, &PseudoMaskConfig::k_clusters));
    t.push_back(nested("pseudo.theta", &TrainConfig::pseudo, &PseudoMaskConfig::theta));
    t.push_back(nested("pseudo.min_area", &TrainConfig::pseudo, &PseudoMaskConfig::min_area));
    t.push_back(nested("pseudo.iterations", &TrainConfig::pseudo, &PseudoMaskConfig::iterations));
    t.push_back(num("infer.gamma", &TrainConfig::infer_gamma));
    return t;
  }();
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& e : entries()) keys.push_back(e.key);
  return keys;
}

TrainConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  TrainConfig cfg;
  std::map<std::string, std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const Entry* entry = nullptr;
    for (const auto& e : entries())
      if (e.key == key) entry = &e;
    if (entry == nullptr)
      throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (seen.count(key))
      throw FormatError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = value;
    try {
      entry->set(cfg, value, base_dir);
    } catch (const std::invalid_argument& e) {
      throw FormatError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (seen.count("sam.lambda") && seen.count("loss.lambda_sam") &&
      to_double("sam.lambda", seen["sam.lambda"]) !=
          to_double("loss.lambda_sam", seen["loss.lambda_sam"])) {
    throw FormatError("config: sam.lambda and loss.lambda_sam disagree");
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), file.parent_path());
}

void validate_config(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
  };
  require(c.iterations >= 0, "train.iterations must be >= 0");
  require(c.batch_size >= 1, "train.batch_size must be >= 1");
  require(c.lr > 0.0, "train.lr must be positive");
  require(c.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  require(c.warmup_frac >= 0.0 && c.warmup_frac <= 1.0, "train.warmup_frac must be in [0, 1]");
  require(c.beta1 >= 0.0 && c.beta1 < 1.0, "train.beta1 must be in [0, 1)");
  require(c.beta2 >= 0.0 && c.beta2 < 1.0, "train.beta2 must be in [0, 1)");
  require(c.adam_eps > 0.0, "train.adam_eps must be positive");
  require(c.checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
  require(c.csh.vencoder_blocks <= kMaxVEncoders, "model.vencoder_blocks must be in [0, 3]");
  require(c.csh.bn_momentum >= 0.0 && c.csh.bn_momentum <= 1.0, "model.bn_momentum must be in [0, 1]");
  require(c.csh.bn_epsilon > 0.0, "model.bn_epsilon must be positive");
  require(c.csh.gn_groups >= 1, "model.gn_groups must be >= 1");
  require(c.sgd_schedule.k0 >= 1.0, "sgd.k0 must be >= 1");
  require(c.sgd_schedule.rate >= 0.0, "sgd.rate must be >= 0");
  require(c.sgd_tau > 0.0, "sgd.tau must be positive");
  require(c.sam_tau_f > 0.0, "sam.tau_f must be positive");
  require(c.sam_tau_c > 0.0, "sam.tau_c must be positive");
  require(c.lambda_sam >= 0.0, "sam.lambda must be >= 0");
  require(c.focal.gamma >= 0.0, "loss.focal_gamma must be >= 0");
  require(c.focal.alpha >= 0.0, "loss.focal_alpha must be >= 0");
  require(c.pseudo.k_clusters >= 1, "pseudo.k_clusters must be >= 1");
  require(c.pseudo.iterations >= 1, "pseudo.iterations must be >= 1");
  validate_backbone_config(c.backbone);
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) {
    if (e.key == "loss.lambda_sam") continue;  // alias of sam.lambda
    out += e.key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

}  // namespace chimera
