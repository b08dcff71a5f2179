/* Copyright 2026 The Canvasflow Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "canvasflow/io.hpp"
#include "canvasflow/model.hpp"
#include "canvasflow/trainer.hpp"

namespace canvasflow {

using io::json;

struct TrainerSection {
  std::array<std::size_t, 3> steps{200, 200, 400};
  std::array<double, 3> lr{1e-3, 1e-4, 1e-4};
  std::size_t warmup = 100;
  std::size_t batch_size = 4;
  double grad_clip = 1.0;
  std::size_t checkpoint_every = 0;
  std::vector<std::pair<Task, double>> task_ratios{{Task::kT2I, 1.0}};
  std::size_t fixed_samples = 0;  // 0: fresh samples every step
  double lr_final_ratio = 1.0;

  TrainStagePlan plan(int stage) const {
    stage_groups(stage);
    TrainStagePlan p;
    p.stage = stage;
    p.task_ratios = task_ratios;
    p.steps = steps[static_cast<std::size_t>(stage - 1)];
    p.lr = lr[static_cast<std::size_t>(stage - 1)];
    p.grad_clip = grad_clip;
    p.warmup = warmup;
    p.batch_size = batch_size;
    p.checkpoint_every = checkpoint_every;
    p.lr_final_ratio = lr_final_ratio;
    return p;
  }
};

struct EvalSection {
  std::size_t prompts = 200;
  std::size_t sample_steps = 8;
  double t_mid = 0.5;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t ablation_steps = 300;
  std::uint64_t prompt_seed = 20260101;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainerSection trainer;
  EvalSection eval;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
};

inline const char* variant_name(ConditioningVariant v) {
  static const char* w[] = {"text_only", "query_1d", "canvas", "canvas_plus_text"};
  return w[static_cast<int>(v)];
}

namespace detail {

// Reads fields from a JSON object and rejects keys it never asked for.
class StrictReader {
 public:
  StrictReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw config_error("config: " + where() + " must be an object");
  }
  ~StrictReader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw config_error("config: unknown key " + join(it.key()));
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw config_error("");
      } else if constexpr (std::is_integral_v<V>) {
        if (!it->is_number_integer() || (std::is_unsigned_v<V> && it->template get<std::int64_t>() < 0))
          throw config_error("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw config_error("");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!it->is_string()) throw config_error("");
      }
      out = it->template get<V>();
    } catch (const std::exception&) {
      throw config_error("config: bad value for " + join(key) + ": " + it->dump());
    }
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["codec"] = {{"spatial_factor", m.codec.spatial_factor},
                {"mode", m.codec.mode == MediaMode::kImage ? "image" : "video"},
                {"height", m.height},
                {"width", m.width},
                {"video_frames", m.video_frames}};
  j["mllm"] = {{"vocab_size", m.mllm.vocab_size}, {"width", m.mllm.width},
               {"layers", m.mllm.layers},         {"heads", m.mllm.heads},
               {"mlp_ratio", m.mllm.mlp_ratio},   {"vision_patch", m.mllm.vision_patch},
               {"use_mrope", m.mllm.use_mrope},   {"rope_base", m.mllm.rope_base},
               {"use_lora", m.mllm.use_lora},     {"lora_rank", m.mllm.lora_rank},
               {"lora_alpha", m.mllm.lora_alpha}, {"context_dropout", m.context_dropout}};
  const auto& cc = m.connector;
  j["connector"] = {{"enabled", cc.enabled},
                    {"use_align_block", cc.use_align_block},
                    {"use_dit_block", cc.use_dit_block},
                    {"use_timestep_cond", cc.use_timestep_cond},
                    {"fuse_after_patchify", cc.fuse_after_patchify},
                    {"keyframes", cc.keyframes},
                    {"canvas_height", cc.canvas_height},
                    {"canvas_width", cc.canvas_width},
                    {"heads", cc.heads},
                    {"mixffn_ratio", cc.mixffn_ratio},
                    {"timestep_freq_dim", cc.timestep_freq_dim}};
  j["dit"] = {{"depth", m.dit.depth},
              {"width", m.dit.width},
              {"heads", m.dit.heads},
              {"mlp_ratio", m.dit.mlp_ratio},
              {"timestep_freq_dim", m.dit.timestep_freq_dim},
              {"variant", variant_name(m.dit.variant)},
              {"query_tokens", m.dit.query_tokens},
              {"rope_base", m.dit.rope_base}};
  json ratios = json::object();
  for (const auto& [t, r] : c.trainer.task_ratios) ratios[task_name(t)] = r;
  j["trainer"] = {{"steps", c.trainer.steps},
                  {"lr", c.trainer.lr},
                  {"warmup", c.trainer.warmup},
                  {"batch_size", c.trainer.batch_size},
                  {"grad_clip", c.trainer.grad_clip},
                  {"checkpoint_every", c.trainer.checkpoint_every},
                  {"task_ratios", ratios},
                  {"fixed_samples", c.trainer.fixed_samples},
                  {"lr_final_ratio", c.trainer.lr_final_ratio}};
  j["eval"] = {{"prompts", c.eval.prompts},
               {"sample_steps", c.eval.sample_steps},
               {"t_mid", c.eval.t_mid},
               {"seeds", c.eval.seeds},
               {"ablation_steps", c.eval.ablation_steps},
               {"prompt_seed", c.eval.prompt_seed}};
  return j;
}

// Missing keys keep their defaults; unknown keys are rejected with their path.
inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  auto& m = c.model;
  detail::StrictReader root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  if (auto* s = root.sub("codec")) {
    detail::StrictReader r(*s, "codec");
    r.get("spatial_factor", m.codec.spatial_factor);
    std::string mode = m.codec.mode == MediaMode::kImage ? "image" : "video";
    r.get("mode", mode);
    if (mode != "image" && mode != "video") throw config_error("config: codec.mode must be image or video");
    m.codec.mode = mode == "image" ? MediaMode::kImage : MediaMode::kVideo;
    r.get("height", m.height);
    r.get("width", m.width);
    r.get("video_frames", m.video_frames);
  }
  if (auto* s = root.sub("mllm")) {
    detail::StrictReader r(*s, "mllm");
    r.get("vocab_size", m.mllm.vocab_size);
    r.get("width", m.mllm.width);
    r.get("layers", m.mllm.layers);
    r.get("heads", m.mllm.heads);
    r.get("mlp_ratio", m.mllm.mlp_ratio);
    r.get("vision_patch", m.mllm.vision_patch);
    r.get("use_mrope", m.mllm.use_mrope);
    r.get("rope_base", m.mllm.rope_base);
    r.get("use_lora", m.mllm.use_lora);
    r.get("lora_rank", m.mllm.lora_rank);
    r.get("lora_alpha", m.mllm.lora_alpha);
    r.get("context_dropout", m.context_dropout);
  }
  if (auto* s = root.sub("connector")) {
    detail::StrictReader r(*s, "connector");
    auto& cc = m.connector;
    r.get("enabled", cc.enabled);
    r.get("use_align_block", cc.use_align_block);
    r.get("use_dit_block", cc.use_dit_block);
    r.get("use_timestep_cond", cc.use_timestep_cond);
    r.get("fuse_after_patchify", cc.fuse_after_patchify);
    r.get("keyframes", cc.keyframes);
    r.get("canvas_height", cc.canvas_height);
    r.get("canvas_width", cc.canvas_width);
    r.get("heads", cc.heads);
    r.get("mixffn_ratio", cc.mixffn_ratio);
    r.get("timestep_freq_dim", cc.timestep_freq_dim);
  }
  if (auto* s = root.sub("dit")) {
    detail::StrictReader r(*s, "dit");
    r.get("depth", m.dit.depth);
    r.get("width", m.dit.width);
    r.get("heads", m.dit.heads);
    r.get("mlp_ratio", m.dit.mlp_ratio);
    r.get("timestep_freq_dim", m.dit.timestep_freq_dim);
    std::string v = variant_name(m.dit.variant);
    r.get("variant", v);
    bool found = false;
    for (int i = 0; i < 4; ++i)
      if (v == variant_name(static_cast<ConditioningVariant>(i))) {
        m.dit.variant = static_cast<ConditioningVariant>(i);
        found = true;
      }
    if (!found) throw config_error("config: dit.variant unknown: " + v);
    r.get("query_tokens", m.dit.query_tokens);
    r.get("rope_base", m.dit.rope_base);
  }
  if (auto* s = root.sub("trainer")) {
    detail::StrictReader r(*s, "trainer");
    auto& t = c.trainer;
    r.get("steps", t.steps);
    r.get("lr", t.lr);
    r.get("warmup", t.warmup);
    r.get("batch_size", t.batch_size);
    r.get("grad_clip", t.grad_clip);
    r.get("checkpoint_every", t.checkpoint_every);
    r.get("fixed_samples", t.fixed_samples);
    r.get("lr_final_ratio", t.lr_final_ratio);
    if (auto* tr = r.sub("task_ratios")) {
      if (!tr->is_object()) throw config_error("config: trainer.task_ratios must be an object");
      t.task_ratios.clear();
      for (auto it = tr->begin(); it != tr->end(); ++it) {
        auto task = task_from_name(it.key());
        if (!task) throw config_error("config: unknown key trainer.task_ratios." + it.key());
        if (!it->is_number()) throw config_error("config: bad value for trainer.task_ratios." + it.key());
        t.task_ratios.emplace_back(*task, it->get<double>());
      }
    }
  }
  if (auto* s = root.sub("eval")) {
    detail::StrictReader r(*s, "eval");
    auto& e = c.eval;
    r.get("prompts", e.prompts);
    r.get("sample_steps", e.sample_steps);
    r.get("t_mid", e.t_mid);
    r.get("seeds", e.seeds);
    r.get("ablation_steps", e.ablation_steps);
    r.get("prompt_seed", e.prompt_seed);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw config_error("config: cannot parse " + path + ": " + e.what());
  }
  return from_json(j);
}

// `key.path=value` on a scalar leaf; array elements are addressed by index
// (trainer.steps.2=500). The value is parsed as JSON, falling back to a bare
// string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw config_error("config: override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_array()) {
      const bool digits = !part.empty() && part.find_first_not_of("0123456789") == std::string::npos;
      if (!digits || std::stoul(part) >= node->size()) throw config_error("config: unknown key " + key);
      node = &(*node)[std::stoul(part)];
    } else {
      if (!node->is_object() || !node->contains(part))
        throw config_error("config: unknown key " + key);
      node = &(*node)[part];
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object() || node->is_array())
    throw config_error("config: override target is not a scalar leaf: " + key);
  json v;
  try {
    v = json::parse(raw);
  } catch (const json::parse_error&) {
    v = raw;
  }
  *node = v;
}

inline ExperimentConfig with_overrides(const ExperimentConfig& base,
                                       const std::vector<std::string>& assignments) {
  json j = to_json(base);
  for (const auto& a : assignments) apply_override(j, a);
  return from_json(j);
}

// Training data for a stage: a fresh stream, or a fixed pool of
// `fixed_samples` drawn from the stream's first step.
inline DataSource training_source(const ExperimentConfig& c, const TrainStagePlan& plan) {
  DataSource data = stream_source(c.seed, c.model.scene_options());
  if (!c.trainer.fixed_samples) return data;
  std::vector<Sample> pool;
  for (std::size_t i = 0; i < c.trainer.fixed_samples; ++i)
    pool.push_back(data(0, i, plan.task_ratios.front().first));
  return fixed_source(std::move(pool), plan.batch_size);
}

// output_dir only says where artifacts land, so relocated runs hash alike.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return io::hex64(io::fnv1a64(j.dump()));
}

// Hash of the sections that determine parameter shapes and semantics.
inline std::string arch_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  json a = {{"codec", j["codec"]}, {"mllm", j["mllm"]}, {"connector", j["connector"]}, {"dit", j["dit"]}};
  a["mllm"].erase("context_dropout");
  return io::hex64(io::fnv1a64(a.dump()));
}

}  // namespace canvasflow
