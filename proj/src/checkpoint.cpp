// SPDX-License-Identifier: Apache-2.0
#include "chimera/checkpoint.hpp"

#include <stdexcept>

#include "chimera/errors.hpp"
#include "chimera/semantic_head.hpp"
#include "chimera/tensor_archive.hpp"

namespace chimera {

namespace {

constexpr const char* kCheckpointFormat = "chimera-checkpoint/1";

}  // namespace

std::map<std::string, Tensor> model_tensors(const ChimeraModel& model) {
  ChimeraModel copy = model;
  std::map<std::string, Tensor> out;
  auto grab = [&](const std::string& name, Tensor& t) { out[name] = t; };
  copy.for_each_trainable(grab);
  copy.for_each_buffer(grab);
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  TensorArchive archive;
  for (auto& [name, t] : model_tensors(ckpt.model)) archive.add(name, t, DType::kFloat64);
  for (const auto& [name, t] : ckpt.adam.m) archive.add("adam.m." + name, t, DType::kFloat64);
  for (const auto& [name, t] : ckpt.adam.v) archive.add("adam.v." + name, t, DType::kFloat64);
  const CSHConfig& csh = ckpt.model.csh.config;
  const BackboneConfig& bb = ckpt.model.backbone.config;
  auto& md = archive.metadata();
  md["format"] = kCheckpointFormat;
  md["iteration"] = ckpt.iteration;
  md["adam_step"] = ckpt.adam.step;
  md["rng_state"] = ckpt.rng_state;
  md["fingerprint"] = ckpt.fingerprint;
  md["config"] = ckpt.config_snapshot;
  md["d_vis"] = ckpt.model.csh.d_vis();
  md["backbone"] = {{"channels", bb.channels}, {"stride", bb.stride}};
  md["csh"] = {{"norm", to_string(csh.norm)},
               {"vencoder_blocks", csh.vencoder_blocks},
               {"bn_momentum", csh.bn_momentum},
               {"bn_epsilon", csh.bn_epsilon},
               {"gn_groups", csh.gn_groups},
               {"bn_batches_tracked", ckpt.model.csh.bn_batches_tracked}};
  archive.save(dir);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const TensorArchive archive = TensorArchive::load(dir);
  const auto& md = archive.metadata();
  try {
    if (md.at("format").get<std::string>() != kCheckpointFormat)
      throw FormatError(dir.string() + ": not a checkpoint");
    BackboneConfig bb;
    bb.channels = md.at("backbone").at("channels").get<std::size_t>();
    bb.stride = md.at("backbone").at("stride").get<std::size_t>();
    CSHConfig csh;
    const auto& c = md.at("csh");
    csh.norm = parse_norm_kind(c.at("norm").get<std::string>());
    csh.vencoder_blocks = c.at("vencoder_blocks").get<std::size_t>();
    csh.bn_momentum = c.at("bn_momentum").get<double>();
    csh.bn_epsilon = c.at("bn_epsilon").get<double>();
    csh.gn_groups = c.at("gn_groups").get<std::size_t>();

    Checkpoint ckpt;
    ckpt.model = init_model(bb, csh, md.at("d_vis").get<std::size_t>(), 0);
    ckpt.model.csh.bn_batches_tracked = c.at("bn_batches_tracked").get<std::uint64_t>();
    auto fill = [&](const std::string& name, Tensor& t) { t = archive.get(name, t.shape()); };
    ckpt.model.for_each_trainable(fill);
    ckpt.model.for_each_buffer(fill);
    for (const auto& e : archive.entries()) {
      if (e.name.rfind("adam.m.", 0) == 0) ckpt.adam.m[e.name.substr(7)] = e.tensor;
      if (e.name.rfind("adam.v.", 0) == 0) ckpt.adam.v[e.name.substr(7)] = e.tensor;
    }
    ckpt.adam.step = md.at("adam_step").get<std::int64_t>();
    ckpt.iteration = md.at("iteration").get<std::int64_t>();
    ckpt.rng_state = md.at("rng_state").get<std::string>();
    ckpt.fingerprint = md.at("fingerprint").get<std::string>();
    ckpt.config_snapshot = md.at("config").get<std::string>();
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + ": bad checkpoint metadata: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
}

void check_compatible(const Checkpoint& ckpt, const ClipWeightBundle& bundle) {
  const std::string fp = frozen_fingerprint(bundle);
  if (ckpt.fingerprint != fp) {
    throw std::runtime_error("checkpoint was trained against bundle " + ckpt.fingerprint.substr(0, 12) +
                             "... not " + fp.substr(0, 12));
  }
  if (ckpt.model.csh.d_vis() != bundle.d_vis)
    throw std::runtime_error("checkpoint d_vis " + std::to_string(ckpt.model.csh.d_vis()) +
                             " != bundle d_vis " + std::to_string(bundle.d_vis));
  if (ckpt.model.csh.config.vencoder_blocks > bundle.vencoders.size())
    throw std::runtime_error("checkpoint needs more VEncoder blocks than the bundle carries");
}

}  // namespace chimera
