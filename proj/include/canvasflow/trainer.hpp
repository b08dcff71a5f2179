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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/io.hpp"
#include "canvasflow/model.hpp"

namespace canvasflow {

// z_t = (1 - t) z + t eps per frame; target u = eps - z.
template <typename T>
struct FlowMatchBatch {
  Tensor<T> z, eps, zt, u;
  std::vector<double> t;  // per frame
};

template <typename T>
FlowMatchBatch<T> make_flow_batch(const Tensor<T>& z, const Tensor<T>& eps,
                                  std::vector<double> t_per_frame) {
  if (!z.same_shape(eps)) throw shape_error("flow batch: z and eps shapes differ");
  const std::size_t frames = t_per_frame.size();
  if (frames == 0 || z.rows() % frames) throw shape_error("flow batch: rows not divisible by frames");
  const std::size_t per = z.rows() / frames * z.cols();
  FlowMatchBatch<T> b{z, eps, Tensor<T>(z.rows(), z.cols()), Tensor<T>(z.rows(), z.cols()),
                      std::move(t_per_frame)};
  for (std::size_t f = 0; f < frames; ++f) {
    const T t = static_cast<T>(b.t[f]), s = T(1) - t;
    for (std::size_t i = f * per; i < (f + 1) * per; ++i) {
      b.zt[i] = s * z[i] + t * eps[i];
      b.u[i] = eps[i] - z[i];
    }
  }
  return b;
}

// Mean squared error over the rows of frames with mask 1.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target,
                  const std::vector<std::uint8_t>& frame_mask) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw shape_error("loss: prediction " + shape_str(pred.value()) + " vs target " +
                      shape_str(target));
  const std::size_t frames = frame_mask.size();
  if (frames == 0 || pred.rows() % frames) throw shape_error("loss: frame mask length mismatch");
  const std::size_t per = pred.rows() / frames;
  std::vector<std::size_t> rows;
  for (std::size_t f = 0; f < frames; ++f)
    if (frame_mask[f])
      for (std::size_t r = 0; r < per; ++r) rows.push_back(f * per + r);
  if (rows.empty()) throw shape_error("loss: every frame is masked");
  const T inv = static_cast<T>(1.0 / static_cast<double>(rows.size() * pred.cols()));
  auto diff = ops::sub(pred, Var<T>::constant(target));
  if (rows.size() != pred.rows()) diff = ops::gather_rows(diff, std::move(rows));
  return ops::scale(ops::sum_squares(diff), inv);
}

inline std::vector<ParamGroup> stage_groups(int stage) {
  using G = ParamGroup;
  switch (stage) {
    case 1: return {G::kContextMlp};
    case 2: return {G::kContextMlp, G::kDitCrossAttn};
    case 3:
      return {G::kContextMlp, G::kDitCrossAttn, G::kDitOther, G::kConnector,
              G::kCanvasGrid, G::kMllmLora,   G::kQueryTokens};
    default: throw config_error("trainer: stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
}

inline double default_stage_lr(int stage) { return stage == 1 ? 1e-3 : 1e-4; }

struct TrainStagePlan {
  int stage = 1;
  std::vector<std::pair<Task, double>> task_ratios{{Task::kT2I, 1.0}};
  std::size_t steps = 1000;
  double lr = 1e-3;
  double grad_clip = 1.0;
  std::size_t warmup = 100;
  std::size_t batch_size = 4;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  double lr_final_ratio = 1.0;        // cosine decay target after warmup; 1 keeps lr flat

  std::vector<ParamGroup> groups() const { return stage_groups(stage); }

  void validate(MediaMode mode) const {
    stage_groups(stage);
    if (task_ratios.empty()) throw config_error("trainer: task_ratios is empty");
    double sum = 0;
    for (const auto& [task, r] : task_ratios) {
      if (!(r >= 0)) throw config_error("trainer: negative task ratio");
      if (r > 0 && !task_supported(task, mode))
        throw config_error(std::string("trainer: task ") + task_name(task) +
                           " needs the other codec mode");
      sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw config_error("trainer: task ratios sum to " + std::to_string(sum) + ", expected 1");
    if (batch_size == 0) throw config_error("trainer: batch_size must be >= 1");
    if (!(grad_clip > 0)) throw config_error("trainer: grad_clip must be positive");
    if (!(lr_final_ratio >= 0 && lr_final_ratio <= 1))
      throw config_error("trainer: lr_final_ratio must lie in [0, 1]");
  }

  // Linear warmup to `lr`, then cosine from `lr` to lr * lr_final_ratio at the
  // last step.
  double lr_at(std::size_t step) const {
    if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (lr_final_ratio == 1.0 || steps <= warmup + 1) return lr;
    const double u = std::min(1.0, static_cast<double>(step - warmup) /
                                       static_cast<double>(steps - warmup - 1));
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * u));
    return lr * (lr_final_ratio + (1.0 - lr_final_ratio) * c);
  }

  Task pick_task(std::mt19937_64& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0;
    for (const auto& [task, r] : task_ratios) {
      acc += r;
      if (u < acc) return task;
    }
    for (auto it = task_ratios.rbegin(); it != task_ratios.rend(); ++it)
      if (it->second > 0) return it->first;
    return task_ratios.back().first;
  }
};

// Adam with bias correction. The schedule lives in TrainStagePlan::lr_at.
template <typename T>
class Adam {
 public:
  struct Slot {
    Tensor<T> m, v;
  };
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;

  void update(ParamStore<T>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (auto& e : store.entries()) {
      if (!e.var.requires_grad() || e.var.grad().empty()) continue;
      auto& slot = slots_[e.name];
      auto& w = e.var.mutable_value();
      const auto& g = e.var.grad();
      if (slot.m.empty()) {
        slot.m = Tensor<T>(w.rows(), w.cols());
        slot.v = Tensor<T>(w.rows(), w.cols());
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double m = beta1 * slot.m[i] + (1 - beta1) * gi;
        const double v = beta2 * slot.v[i] + (1 - beta2) * gi * gi;
        slot.m[i] = static_cast<T>(m);
        slot.v[i] = static_cast<T>(v);
        w[i] = static_cast<T>(w[i] - lr * (m / c1) / (std::sqrt(v / c2) + eps));
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  std::uint64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

// Global L2 norm of trainable gradients; scales them to `clip` if larger.
// Returns {pre, post}.
template <typename T>
std::pair<double, double> clip_gradients(ParamStore<T>& store, double clip) {
  double sq = 0;
  for (auto& e : store.entries()) {
    if (!e.var.requires_grad() || e.var.grad().empty()) continue;
    for (std::size_t i = 0; i < e.var.grad().size(); ++i) {
      const double g = e.var.grad()[i];
      sq += g * g;
    }
  }
  const double pre = std::sqrt(sq);
  if (!std::isfinite(pre)) return {pre, pre};
  if (pre <= clip) return {pre, pre};
  const T s = static_cast<T>(clip / pre);
  double post_sq = 0;
  for (auto& e : store.entries()) {
    if (!e.var.requires_grad() || e.var.grad().empty()) continue;
    auto& g = e.var.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] *= s;
      post_sq += static_cast<double>(g[i]) * g[i];
    }
  }
  return {pre, std::sqrt(post_sq)};
}

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0;
  double grad_norm = 0;       // pre-clip
  double grad_norm_post = 0;  // post-clip
  double lr = 0;
  Task task = Task::kT2I;
  double seconds = 0;
};

// Sample for (step, slot); `task` is the task drawn for the step.
using DataSource = std::function<Sample(std::uint64_t step, std::size_t slot, Task task)>;

inline DataSource stream_source(std::uint64_t seed, SceneOptions opt) {
  return [seed, opt](std::uint64_t step, std::size_t slot, Task task) {
    return generate_one(mix_seed(mix_seed(seed, step), slot), task, opt);
  };
}

// Cycles through a fixed pool; the drawn task is ignored.
inline DataSource fixed_source(std::vector<Sample> pool, std::size_t batch_size) {
  return [pool = std::move(pool), batch_size](std::uint64_t step, std::size_t slot, Task) {
    return pool[(step * batch_size + slot) % pool.size()];
  };
}

// Loss of one example with noise/timestep/dropout drawn from `rng`.
template <typename T>
Var<T> example_loss(const CanvasModel<T>& model, const Example<T>& ex, std::mt19937_64& rng) {
  const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::vector<double> ts(ex.grid.frames, t);
  for (std::size_t f = 0; f < ts.size(); ++f)
    if (ex.pinned[f]) ts[f] = 0.0;
  auto eps = model.noise(ex, rng);
  auto batch = make_flow_batch(ex.target, eps, ts);
  std::mt19937_64 drop(rng());
  auto cond = model.encode_condition(ex, &drop);
  auto pred = model.velocity(ex, cond, Var<T>::constant(batch.zt), ts);
  return masked_mse(pred, batch.u, ex.loss_mask);
}

inline std::uint64_t step_seed(std::uint64_t seed, int stage, std::uint64_t step) {
  return mix_seed(mix_seed(seed, static_cast<std::uint64_t>(stage)), step);
}

template <typename T>
class Trainer {
 public:
  Trainer(CanvasModel<T>& model, TrainStagePlan plan, DataSource data, std::uint64_t seed)
      : model_(model), plan_(std::move(plan)), data_(std::move(data)), seed_(seed) {
    plan_.validate(model.config().codec.mode);
    model_.params().set_trainable(plan_.groups());
  }

  const TrainStagePlan& plan() const { return plan_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  Adam<T>& optimizer() { return adam_; }

  // Loss for the current step without updating anything.
  double peek_loss() {
    NoGradGuard g;
    return compute(step_).first.item();
  }

  StepMetrics train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    auto [loss, task] = compute(step_);
    StepMetrics m;
    m.step = step_;
    m.task = task;
    m.loss = static_cast<double>(loss.item());
    if (!std::isfinite(m.loss))
      throw Error(ErrorKind::kNumeric, "trainer: non-finite loss " + std::to_string(m.loss) +
                                           " at stage " + std::to_string(plan_.stage) + " step " +
                                           std::to_string(step_) + " task " + task_name(task));
    model_.params().zero_grad();
    backward(loss);
    auto [pre, post] = clip_gradients(model_.params(), plan_.grad_clip);
    if (!std::isfinite(pre))
      throw Error(ErrorKind::kNumeric, "trainer: non-finite gradient norm at step " +
                                           std::to_string(step_));
    m.grad_norm = pre;
    m.grad_norm_post = post;
    m.lr = plan_.lr_at(step_);
    adam_.update(model_.params(), m.lr);
    model_.params().zero_grad();
    ++step_;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
  }

 private:
  std::pair<Var<T>, Task> compute(std::size_t step) {
    const std::uint64_t ss = step_seed(seed_, plan_.stage, step);
    std::mt19937_64 task_rng(mix_seed(ss, 0));
    const Task task = plan_.pick_task(task_rng);
    std::vector<Var<T>> losses;
    Task first = task;
    for (std::size_t b = 0; b < plan_.batch_size; ++b) {
      Sample s = data_(step, b, task);
      if (b == 0) first = s.task;
      auto ex = make_example<T>(s, model_.config());
      std::mt19937_64 rng(mix_seed(ss, 1 + b));
      losses.push_back(example_loss(model_, ex, rng));
    }
    Var<T> total = losses.front();
    for (std::size_t b = 1; b < losses.size(); ++b) total = ops::add(total, losses[b]);
    if (losses.size() > 1)
      total = ops::scale(total, static_cast<T>(1.0 / static_cast<double>(losses.size())));
    return {total, first};
  }

  CanvasModel<T>& model_;
  TrainStagePlan plan_;
  DataSource data_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  Adam<T> adam_;
};

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + <module>.cfta per parameter prefix +
// optimizer.cfta. Written to a temporary directory, then renamed.

struct CheckpointInfo {
  std::string config_hash, arch_hash;
  int stage = 1;
  std::size_t step = 0;
  std::uint64_t optimizer_steps = 0;
};

inline std::string module_of(const std::string& param) { return param.substr(0, param.find('.')); }

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const CanvasModel<T>& model,
                     const Adam<T>* adam, const CheckpointInfo& info) {
  io::AtomicDir out(dir);
  std::map<std::string, std::vector<std::pair<std::string, const Tensor<T>*>>> modules;
  for (const auto& e : model.params().entries())
    modules[module_of(e.name)].emplace_back(e.name, &e.var.value());
  io::json manifest;
  manifest["format"] = "canvasflow-checkpoint-1";
  manifest["config_hash"] = info.config_hash;
  manifest["arch_hash"] = info.arch_hash;
  manifest["stage"] = info.stage;
  manifest["step"] = info.step;
  manifest["modules"] = io::json::array();
  for (const auto& [name, items] : modules) {
    io::write_archive<T>(out.path() / (name + ".cfta"), items);
    manifest["modules"].push_back(name);
  }
  if (adam) {
    std::vector<std::pair<std::string, const Tensor<T>*>> items;
    for (const auto& [name, slot] : adam->slots()) {
      items.emplace_back(name + "#m", &slot.m);
      items.emplace_back(name + "#v", &slot.v);
    }
    io::write_archive<T>(out.path() / "optimizer.cfta", items);
    manifest["optimizer_steps"] = adam->steps();
  }
  io::write_text(out.path() / "manifest.json", manifest.dump(2) + "\n");
  out.commit();
}

inline CheckpointInfo read_manifest(const std::filesystem::path& dir) {
  io::json m;
  try {
    m = io::json::parse(io::read_text(dir / "manifest.json"));
  } catch (const io::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, "bad manifest in " + dir.string() + ": " + e.what());
  }
  CheckpointInfo info;
  info.config_hash = m.value("config_hash", "");
  info.arch_hash = m.value("arch_hash", "");
  info.stage = m.value("stage", 0);
  info.step = m.value("step", std::size_t{0});
  info.optimizer_steps = m.value("optimizer_steps", std::uint64_t{0});
  return info;
}

// Loads parameters (and optimizer state when `adam` is given). Rejects an
// architecture hash mismatch and any missing or misshapen tensor.
template <typename T>
CheckpointInfo load_checkpoint(const std::filesystem::path& dir, CanvasModel<T>& model,
                               Adam<T>* adam, const std::string& expected_arch_hash) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw Error(ErrorKind::kCheckpoint, "no checkpoint at " + dir.string());
  CheckpointInfo info = read_manifest(dir);
  if (!expected_arch_hash.empty() && info.arch_hash != expected_arch_hash)
    throw Error(ErrorKind::kCheckpoint, "checkpoint architecture " + info.arch_hash +
                                            " does not match config " + expected_arch_hash);
  std::map<std::string, std::map<std::string, Tensor<T>>> cache;
  for (auto& e : model.params().entries()) {
    const std::string mod = module_of(e.name);
    if (!cache.count(mod)) cache[mod] = io::read_archive<T>(dir / (mod + ".cfta"));
    auto it = cache[mod].find(e.name);
    if (it == cache[mod].end())
      throw Error(ErrorKind::kCheckpoint, "checkpoint lacks parameter " + e.name);
    if (!it->second.same_shape(e.var.value()))
      throw Error(ErrorKind::kCheckpoint, "checkpoint shape mismatch for " + e.name);
    e.var.mutable_value() = it->second;
  }
  if (adam && std::filesystem::exists(dir / "optimizer.cfta")) {
    auto st = io::read_archive<T>(dir / "optimizer.cfta");
    adam->slots().clear();
    for (auto& [key, t] : st) {
      const auto hash = key.rfind('#');
      auto& slot = adam->slots()[key.substr(0, hash)];
      (key.substr(hash + 1) == "m" ? slot.m : slot.v) = std::move(t);
    }
    adam->set_steps(info.optimizer_steps);
  }
  return info;
}

inline std::string metrics_line(const StepMetrics& m, const std::string& config_hash = {}) {
  io::json j;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  j["step"] = m.step;
  j["loss"] = m.loss;
  j["grad_norm"] = m.grad_norm;
  j["lr"] = m.lr;
  j["task"] = task_name(m.task);
  return j.dump();
}

struct RunOptions {
  std::filesystem::path out_dir;  // stage directory
  std::string config_hash, arch_hash;
  bool resume = true;
  std::function<void(const StepMetrics&)> on_step;
};

// Trains up to plan.steps steps, writing metrics.jsonl, periodic "latest"
// and a final checkpoint. Resumes from the most advanced of the two.
template <typename T>
std::filesystem::path run_stage(CanvasModel<T>& model, const TrainStagePlan& plan,
                                DataSource data, std::uint64_t seed, const RunOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  Trainer<T> trainer(model, plan, std::move(data), seed);
  const fs::path latest = opt.out_dir / "latest", final_dir = opt.out_dir / "final";
  const fs::path log_path = opt.out_dir / "metrics.jsonl";
  std::vector<std::string> kept;
  fs::path resume_from;
  for (const auto& cand : {latest, final_dir})
    if (opt.resume && fs::exists(cand / "manifest.json") &&
        (resume_from.empty() || read_manifest(cand).step > read_manifest(resume_from).step))
      resume_from = cand;
  if (!resume_from.empty()) {
    auto info = load_checkpoint(resume_from, model, &trainer.optimizer(), opt.arch_hash);
    if (info.stage != plan.stage)
      throw Error(ErrorKind::kCheckpoint, "resume checkpoint belongs to another stage");
    trainer.set_step(info.step);
    if (fs::exists(log_path)) {
      std::ifstream in(log_path);
      for (std::string line; std::getline(in, line) && kept.size() < info.step;) kept.push_back(line);
    }
  }
  {
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& l : kept) log << l << '\n';
  }
  std::ofstream log(log_path, std::ios::app);
  auto info_at = [&](std::size_t step) {
    return CheckpointInfo{opt.config_hash, opt.arch_hash, plan.stage, step,
                          trainer.optimizer().steps()};
  };
  while (trainer.step() < plan.steps) {
    auto m = trainer.train_step();
    log << metrics_line(m, opt.config_hash) << '\n';
    log.flush();
    if (opt.on_step) opt.on_step(m);
    if (plan.checkpoint_every && trainer.step() % plan.checkpoint_every == 0 &&
        trainer.step() < plan.steps)
      save_checkpoint(latest, model, &trainer.optimizer(), info_at(trainer.step()));
  }
  save_checkpoint(final_dir, model, &trainer.optimizer(), info_at(trainer.step()));
  return final_dir;
}

}  // namespace canvasflow
