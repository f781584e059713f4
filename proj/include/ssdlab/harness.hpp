#pragma once

#include <json.hpp>
#include <optional>
#include <string>

#include "ssdlab/distill.hpp"
#include "ssdlab/eval.hpp"

namespace ssdlab {

/// One experiment = one distillation run. Parsed from JSON against a strict
/// schema: unknown keys and out-of-bounds values are rejected before any
/// compute.
struct ExperimentConfig {
  std::string mode = "canvas2d";  // canvas2d | voxel3d
  std::string prompt;
  std::string model_path;
  std::string method;  // label used by the evaluation pipeline

  // style block (optional: absent means lambda == 0 throughout)
  bool has_style = false;
  std::string style_image_path;
  std::string style_reference_path;  // prebuilt reference checkpoint
  std::string style_caption;
  std::string style_origin = "generated";  // generated | inverted
  std::string style_prompt;                // y_s text (generated origin)

  std::string loss = "ssd";
  std::string schedule_kind = "sqrt";
  Scalar lambda_max = 0.6;
  Scalar beta = 7.5;
  long iterations = -1;  // default: 2000 canvas / 5000 grid
  Scalar lr = -1.0;      // default: 1e-2 canvas / 5e-2 grid
  std::uint64_t seed = 0;
  std::string out_dir;

  std::string baseline = "none";  // none|style-in-prompt|neural-style-loss|textual-inversion
  Scalar style_loss_weight = 1e-3;
  std::string extractor_path;  // needed by the neural-style-loss baseline

  int grid_size = 32;
  int snapshot_every = 0;
  Scalar t_threshold_frac = 0.2;
  std::optional<Scalar> t_min_frac, t_max_frac;
  std::optional<std::string> weighting;  // sigma2 | one
  std::string negative_prompt = "unrealistic blurry low quality";
  int textual_inversion_steps = 300;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
  void validate() const;
};

struct RunMetrics {
  nlohmann::json json;  // deterministic contents only
};

/// Executes the experiment: artifact directory gets config.json,
/// trajectory.jsonl, renders, scene.ckpt and metrics.json.
RunMetrics run_experiment(const ExperimentConfig& cfg);

/// Loads a finished run directory into tournament inputs: renders 4 turntable
/// views (RGB + normals) of the final scene. Canvas runs reuse the canvas as
/// every view with a flat neutral normal map.
struct LoadedRun {
  ExperimentConfig config;
  Scene scene;
  std::vector<ViewPair> views;
  Image style;  // style image if the run had one, else mid-gray
  std::string case_id;
};
LoadedRun load_run_dir(const std::string& dir);

}  // namespace ssdlab
