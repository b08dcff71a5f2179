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

// canvasflow: gen-data, train, sample, eval, visualize-canvas, ablate.
//
// Every command writes below the config's output directory, holds that
// directory's lock while it runs, and stamps its artifacts with the config
// hash. An artifact directory whose recorded fingerprint matches the current
// invocation is left alone; a different one is only replaced with --force.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "canvasflow/config.hpp"
#include "canvasflow/eval.hpp"
#include "canvasflow/io.hpp"
#include "canvasflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace canvasflow;
using io::json;

namespace {

using Model = CanvasModel<float>;

struct Context {
  ExperimentConfig cfg;
  std::string hash, arch;
  fs::path root;
  bool force = false;
};

Context make_context(const std::string& config_path, const std::vector<std::string>& sets,
                     bool force) {
  Context c;
  c.cfg = with_overrides(load_config(config_path), sets);
  if (const char* env = std::getenv("CANVASFLOW_OUTPUT_DIR"); env && *env) c.cfg.output_dir = env;
  c.hash = config_hash(c.cfg);
  c.arch = arch_hash(c.cfg);
  c.root = c.cfg.output_dir;
  c.force = force;
  return c;
}

std::string stamp(const Context& c) { return "canvasflow config_hash=" + c.hash; }

// Returns true when `dir` already holds this exact artifact.
bool up_to_date(const Context& c, const fs::path& dir, const std::string& fingerprint) {
  const fs::path marker = dir / "artifact.json";
  if (fs::exists(marker)) {
    json j = json::parse(io::read_text(marker), nullptr, false);
    if (!j.is_discarded() && j.value("fingerprint", "") == fingerprint && !c.force) return true;
  }
  if (fs::exists(dir) && !fs::is_empty(dir) && !c.force)
    throw io_error(dir.string() + " holds artifacts from a different invocation; pass --force to replace them");
  fs::remove_all(dir);
  fs::create_directories(dir);
  return false;
}

void finish(const Context& c, const fs::path& dir, const std::string& fingerprint,
            const std::string& command) {
  json j{{"config_hash", c.hash}, {"arch_hash", c.arch}, {"fingerprint", fingerprint}, {"command", command}};
  io::write_text(dir / "artifact.json", j.dump(2) + "\n");
}

std::string fingerprint(const Context& c, const std::string& args) {
  return io::hex64(io::fnv1a64(c.hash + "|" + args));
}

Task parse_task(const std::string& name) {
  auto t = task_from_name(name);
  if (!t) throw config_error("unknown task '" + name + "'");
  return *t;
}

json scene_json(const SceneSpec& s) {
  json j;
  j["height"] = s.height;
  j["width"] = s.width;
  j["frames"] = s.frames;
  j["task"] = task_name(s.task);
  j["kind"] = prompt_kind_name(s.kind);
  j["entities"] = json::array();
  for (const auto& e : s.entities)
    j["entities"].push_back({{"shape", shape_word(e.shape)},
                             {"color", color_word(e.color)},
                             {"row", e.cell.row},
                             {"col", e.cell.col},
                             {"vrow", e.vrow},
                             {"vcol", e.vcol}});
  j["relations"] = json::array();
  for (const auto& r : s.relations)
    j["relations"].push_back(
        {{"subject", r.subject}, {"object", r.object}, {"relation", relation_word(r.relation)}});
  return j;
}

fs::path stage_dir(const Context& c, int stage) { return c.root / ("stage" + std::to_string(stage)); }

// Highest stage with a final checkpoint, or the requested one.
fs::path checkpoint_for(const Context& c, int stage) {
  if (stage > 0) return stage_dir(c, stage) / "final";
  for (int s = 3; s >= 1; --s)
    if (fs::exists(stage_dir(c, s) / "final" / "manifest.json")) return stage_dir(c, s) / "final";
  throw Error(ErrorKind::kCheckpoint, "no trained checkpoint under " + c.root.string());
}

void load_model(const Context& c, Model& model, int stage) {
  const fs::path ck = checkpoint_for(c, stage);
  load_checkpoint<float>(ck, model, nullptr, c.arch);
  std::cerr << "loaded " << ck.string() << "\n";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Context& c, const std::string& task_name_arg, std::size_t count,
                 std::uint64_t seed) {
  const Task task = parse_task(task_name_arg);
  const fs::path dir = c.root / "data" / task_name(task);
  const auto fp = fingerprint(c, "gen-data|" + task_name_arg + "|" + std::to_string(count) + "|" +
                                     std::to_string(seed));
  if (up_to_date(c, dir, fp)) {
    std::cout << dir.string() << " is up to date\n";
    return 0;
  }
  const auto& vocab = Vocabulary::standard();
  std::string manifest;
  for (std::size_t i = 0; i < count; ++i) {
    const Sample s = generate_one(mix_seed(seed, i), task, c.cfg.model.scene_options());
    char stem[32];
    std::snprintf(stem, sizeof stem, "s%05zu", i);
    json j;
    j["config_hash"] = c.hash;
    j["index"] = i;
    j["id"] = s.id;
    j["task"] = task_name(task);
    j["caption"] = vocab.decode(s.caption);
    j["spec"] = scene_json(s.spec);
    j["target"] = io::write_media(dir, std::string(stem) + "_target", s.media, stamp(c));
    if (s.source) j["source"] = io::write_media(dir, std::string(stem) + "_source", *s.source, stamp(c));
    if (s.source_spec) j["source_spec"] = scene_json(*s.source_spec);
    if (s.reference)
      j["reference"] = io::write_media(dir, std::string(stem) + "_reference", *s.reference, stamp(c));
    manifest += j.dump() + "\n";
  }
  io::write_text(dir / "manifest.jsonl", manifest);
  finish(c, dir, fp, "gen-data");
  std::cout << "wrote " << count << " " << task_name(task) << " samples to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const Context& c, int stage) {
  if (stage < 1 || stage > 3) throw config_error("--stage must be 1, 2 or 3");
  const auto plan = c.cfg.trainer.plan(stage);
  plan.validate(c.cfg.model.codec.mode);
  const fs::path dir = stage_dir(c, stage);
  const auto fp = fingerprint(c, "train|" + std::to_string(stage));
  const fs::path marker = dir / "artifact.json";
  if (fs::exists(marker)) {
    json j = json::parse(io::read_text(marker), nullptr, false);
    const bool same = !j.is_discarded() && j.value("fingerprint", "") == fp;
    if (same && !c.force) {
      std::cout << "stage " << stage << " is already complete in " << dir.string() << "\n";
      return 0;
    }
    if (!same && !c.force)
      throw io_error(dir.string() + " was trained with a different config; pass --force to retrain");
    fs::remove_all(dir);
  } else if (fs::exists(dir) && c.force) {
    fs::remove_all(dir);
  } else if (fs::exists(dir / "config.json")) {
    // An interrupted run resumes only under the same config.
    json j = json::parse(io::read_text(dir / "config.json"), nullptr, false);
    if (j.is_discarded() || j.value("config_hash", "") != c.hash)
      throw io_error(dir.string() + " holds a run with a different config; pass --force to restart");
  }
  fs::create_directories(dir);
  io::write_text(dir / "config.json",
                 json{{"config_hash", c.hash}, {"arch_hash", c.arch}, {"config", to_json(c.cfg)}}.dump(2) + "\n");

  Model model(c.cfg.model, c.cfg.seed);
  if (stage > 1) {
    const fs::path prev = stage_dir(c, stage - 1) / "final";
    if (!fs::exists(prev / "manifest.json"))
      throw Error(ErrorKind::kCheckpoint, "stage " + std::to_string(stage) + " needs " +
                                              prev.string() + "; run --stage " +
                                              std::to_string(stage - 1) + " first");
    load_checkpoint<float>(prev, model, nullptr, c.arch);
    std::cerr << "initialized from " << prev.string() << "\n";
  }
  RunOptions opt;
  opt.out_dir = dir;
  opt.config_hash = c.hash;
  opt.arch_hash = c.arch;
  const std::size_t every = std::max<std::size_t>(1, plan.steps / 10);
  opt.on_step = [&](const StepMetrics& m) {
    if (m.step % every == 0 || m.step + 1 == plan.steps)
      std::cerr << "stage " << stage << " step " << m.step << " loss " << m.loss << " task "
                << task_name(m.task) << "\n";
  };
  run_stage(model, plan, training_source(c.cfg, plan), step_seed(c.cfg.seed, stage, 0), opt);
  finish(c, dir, fp, "train");
  std::cout << "stage " << stage << " checkpoint: " << (dir / "final").string() << "\n";
  return 0;
}

int cmd_sample(const Context& c, int stage, const std::string& task_arg, std::uint64_t seed,
               const std::string& image, const std::string& caption_text) {
  const Task task = parse_task(task_arg);
  Sample s = generate_one(seed, task, c.cfg.model.scene_options());
  if (!caption_text.empty()) {
    s.caption = Vocabulary::standard().encode(caption_text);
    if (s.caption.empty() || s.caption.back() != Vocabulary::kEos) s.caption.push_back(Vocabulary::kEos);
  }
  std::string image_hash;
  if (!image.empty()) {
    const auto img = io::read_ppm(image);
    if (img.height != c.cfg.model.height || img.width != c.cfg.model.width)
      throw shape_error("--image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", config expects " + std::to_string(c.cfg.model.width) + "x" +
                        std::to_string(c.cfg.model.height));
    image_hash = io::hex64(io::fnv1a64(io::read_text(image)));
    if (task == Task::kI2V) {
      // Every frame carries the image; only frame 0 conditions the sample.
      for (std::size_t f = 0; f < s.media.frames; ++f)
        std::copy(img.data.begin(), img.data.end(),
                  s.media.data.begin() + static_cast<long>(f * img.data.size()));
    } else if (task == Task::kEdit) {
      s.source = img;
    } else {
      throw config_error("--image applies to i2v and edit only");
    }
  }
  const fs::path dir = c.root / "samples" / (std::string(task_name(task)) + "_" + std::to_string(seed));
  const auto fp = fingerprint(c, "sample|" + std::to_string(stage) + "|" + task_arg + "|" +
                                     std::to_string(seed) + "|" + image_hash + "|" + caption_text);
  Model model(c.cfg.model, c.cfg.seed);
  load_model(c, model, stage);  // architecture check precedes any disk change
  if (up_to_date(c, dir, fp)) {
    std::cout << dir.string() << " is up to date\n";
    return 0;
  }
  const auto ex = make_example<float>(s, c.cfg.model);
  const auto out = model.decode_generated(model.sample(ex, mix_seed(seed, 99), c.cfg.eval.sample_steps), ex);
  json j{{"config_hash", c.hash},
         {"task", task_name(task)},
         {"seed", seed},
         {"caption", Vocabulary::standard().decode(s.caption)},
         {"frames", io::write_media(dir, "sample", out, stamp(c))}};
  if (task == Task::kI2V) {
    io::write_media(dir, "condition", s.media.frame(0), stamp(c));
  }
  if (s.source) j["source"] = io::write_media(dir, "source", *s.source, stamp(c));
  if (s.reference) j["reference"] = io::write_media(dir, "reference", *s.reference, stamp(c));
  io::write_text(dir / "sample.json", j.dump(2) + "\n");
  finish(c, dir, fp, "sample");
  std::cout << "wrote " << out.frames << " frame(s) to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const Context& c, int stage) {
  const fs::path dir = c.root / "eval";
  const auto fp = fingerprint(c, "eval|" + std::to_string(stage));
  Model model(c.cfg.model, c.cfg.seed);
  load_model(c, model, stage);  // architecture check precedes any disk change
  if (up_to_date(c, dir, fp)) {
    std::cout << dir.string() << " is up to date\n";
    return 0;
  }
  const auto opt = c.cfg.model.scene_options();
  const auto suite = prompt_suite(c.cfg.eval.prompt_seed, c.cfg.eval.prompts, c.cfg.model.codec.mode, opt);
  const auto report = mini_geneval(model_generator(model, mix_seed(c.cfg.seed, 77), c.cfg.eval.sample_steps), suite);
  json j{{"config_hash", c.hash}, {"arch_hash", c.arch}, {"geneval", report.to_json()}};
  std::cout << "mini-GenEval overall " << report.overall << "\n";

  // Preserved-region PSNR of edits, for configs trained on edit/v2v.
  const Task edit_task = c.cfg.model.codec.mode == MediaMode::kImage ? Task::kEdit : Task::kV2V;
  bool trains_edit = false;
  for (const auto& [t, r] : c.cfg.trainer.task_ratios) trains_edit |= t == edit_task && r > 0;
  if (trains_edit) {
    const std::size_t n = std::max<std::size_t>(1, c.cfg.eval.prompts / 4);
    double psnr = 0, changed = 0;
    std::size_t finite = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = generate_one(mix_seed(c.cfg.eval.prompt_seed, 1000 + i), edit_task, opt);
      const auto ex = make_example<float>(s, c.cfg.model);
      const auto out = model.decode_generated(model.sample(ex, mix_seed(c.cfg.seed, 500 + i), c.cfg.eval.sample_steps), ex);
      const auto m = edit_metrics(*s.source, out, s.edit_mask);
      if (m.psnr && std::isfinite(*m.psnr)) psnr += *m.psnr, ++finite;
      changed += m.changed_fraction;
    }
    j["edit"] = {{"task", task_name(edit_task)},
                 {"count", n},
                 {"mean_preserved_psnr", finite ? psnr / double(finite) : 0.0},
                 {"mean_changed_fraction", changed / double(n)}};
  }
  io::write_text(dir / "report.json", j.dump(2) + "\n");
  finish(c, dir, fp, "eval");
  std::cout << "report: " << (dir / "report.json").string() << "\n";
  return 0;
}

PixelMedia<float> upscale(const PixelMedia<float>& m, std::size_t h, std::size_t w) {
  PixelMedia<float> out(1, h, w);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(0, ch, y, x) = m.at(0, ch, y * m.height / h, x * m.width / w);
  return out;
}

int cmd_visualize(const Context& c, int stage, std::size_t count) {
  const fs::path dir = c.root / "canvas";
  const auto fp = fingerprint(c, "visualize-canvas|" + std::to_string(stage) + "|" + std::to_string(count));
  Model model(c.cfg.model, c.cfg.seed);
  load_model(c, model, stage);  // architecture check precedes any disk change
  if (up_to_date(c, dir, fp)) {
    std::cout << dir.string() << " is up to date\n";
    return 0;
  }
  const auto opt = c.cfg.model.scene_options();
  const auto suite = prompt_suite(c.cfg.eval.prompt_seed, count, c.cfg.model.codec.mode, opt);
  json j{{"config_hash", c.hash}, {"t_mid", c.cfg.eval.t_mid}, {"prompts", json::array()}};
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto ex = make_example<float>(suite[i], c.cfg.model);
    const auto map = canvas_pca(model, ex, c.cfg.eval.t_mid, mix_seed(c.cfg.seed, 300 + i), c.cfg.eval.sample_steps);
    json p{{"caption", Vocabulary::standard().decode(suite[i].caption)}, {"keyframes", json::array()}};
    for (const auto& k : map.keyframes) {
      const std::string stem = "prompt" + std::to_string(i) + "_k" + std::to_string(k.keyframe);
      io::write_ppm(dir / (stem + ".ppm"), upscale(pca_image(k.pca), opt.height, opt.width), 0, stamp(c));
      p["keyframes"].push_back({{"keyframe", k.keyframe},
                                {"frame", k.frame},
                                {"components", k.pca.components},
                                {"degenerate", k.pca.degenerate},
                                {"file", stem + ".ppm"}});
    }
    io::write_media(dir, "prompt" + std::to_string(i) + "_target", suite[i].media, stamp(c));
    j["prompts"].push_back(p);
  }
  io::write_text(dir / "canvas.json", j.dump(2) + "\n");
  finish(c, dir, fp, "visualize-canvas");
  std::cout << "wrote canvas maps for " << suite.size() << " prompts to " << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const Context& c, const std::string& suite) {
  const fs::path dir = c.root / ("ablate_" + suite);
  const auto fp = fingerprint(c, "ablate|" + suite);
  ablation_arms(c.cfg, suite);  // reject unknown suites before touching disk
  if (up_to_date(c, dir, fp)) {
    std::cout << dir.string() << " is up to date\n";
    return 0;
  }
  const auto table = run_ablations<float>(c.cfg, suite, [](const AblationRow& r) {
    std::cerr << r.arm << " seed " << r.seed << " step0 " << r.step0_loss << " final " << r.final_loss
              << " geneval " << r.report.overall << "\n";
  });
  io::write_text(dir / "table.csv", "# config_hash=" + c.hash + "\n" + table.to_csv());
  json j = table.to_json();
  j["config_hash"] = c.hash;
  io::write_text(dir / "table.json", j.dump(2) + "\n");
  finish(c, dir, fp, "ablate");
  std::cout << table.to_csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"canvasflow: synthetic canvas-conditioned generation toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  bool force = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override a scalar leaf, key.path=value (repeatable)");
    sub->add_flag("--force", force, "replace artifacts from a different invocation");
  };
  std::string task = "t2i", image, caption, suite;
  std::size_t count = 16, vis_count = 4;
  std::uint64_t seed = 0;
  int stage = 0;

  auto* gen = app.add_subcommand("gen-data", "render synthetic samples with spec sidecars");
  common(gen);
  gen->add_option("--task", task, "t2i, t2v, i2v, edit, ref2v or v2v");
  gen->add_option("--count", count, "number of samples");
  gen->add_option("--seed", seed, "generation seed");

  auto* train = app.add_subcommand("train", "run one training stage");
  common(train);
  train->add_option("--stage", stage, "1, 2 or 3")->required();

  auto* sample = app.add_subcommand("sample", "sample one output from a trained checkpoint");
  common(sample);
  sample->add_option("--stage", stage, "checkpoint stage (default: latest trained)");
  sample->add_option("--task", task, "task to sample");
  sample->add_option("--seed", seed, "prompt and noise seed");
  sample->add_option("--image", image, "P6 conditioning image (i2v first frame, edit source)")
      ->check(CLI::ExistingFile);
  sample->add_option("--caption", caption, "caption or instruction in vocabulary words");

  auto* eval = app.add_subcommand("eval", "mini-GenEval (and edit PSNR) of a checkpoint");
  common(eval);
  eval->add_option("--stage", stage, "checkpoint stage (default: latest trained)");

  auto* vis = app.add_subcommand("visualize-canvas", "PCA maps of canvas features");
  common(vis);
  vis->add_option("--stage", stage, "checkpoint stage (default: latest trained)");
  vis->add_option("--count", vis_count, "number of prompts");

  auto* ablate = app.add_subcommand("ablate", "train and score every arm of a suite");
  common(ablate);
  ablate->add_option("--suite", suite, "table3, keyframes, mrope or conditioning")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::kConfig);
  }

  try {
    const Context c = make_context(config_path, sets, force);
    io::DirLock lock(c.root);
    if (gen->parsed()) return cmd_gen_data(c, task, count, seed);
    if (train->parsed()) return cmd_train(c, stage);
    if (sample->parsed()) return cmd_sample(c, stage, task, seed, image, caption);
    if (eval->parsed()) return cmd_eval(c, stage);
    if (vis->parsed()) return cmd_visualize(c, stage, vis_count);
    if (ablate->parsed()) return cmd_ablate(c, suite);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kInternal);
  }
  return static_cast<int>(ErrorKind::kInternal);
}
