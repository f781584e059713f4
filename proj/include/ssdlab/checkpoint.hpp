#pragma once

#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "ssdlab/common.hpp"
#include "ssdlab/denoiser.hpp"
#include "ssdlab/distill.hpp"
#include "ssdlab/schedule.hpp"

namespace ssdlab {

/// Single-file container: magic, JSON header, raw little-endian doubles.
/// Shared by denoiser, scene and style-reference checkpoints.
namespace ckpt {

void write(const std::string& path, nlohmann::json header, const std::vector<const Mat*>& tensors);

struct Contents {
  nlohmann::json header;
  std::vector<Mat> tensors;
};
Contents read(const std::string& path);

}  // namespace ckpt

/// Denoiser checkpoint: parameters, architecture descriptor, schedule
/// constants and vocabulary in one file.
void save_denoiser(const UNet& net, const NoiseSchedule& sched, const std::string& path);

struct LoadedDenoiser {
  std::unique_ptr<UNet> net;
  NoiseSchedule schedule;
};
LoadedDenoiser load_denoiser(const std::string& path);

nlohmann::json schedule_to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

/// Scene checkpoint: parameter tensors plus mode/resolution/iteration metadata.
void save_scene(const Scene& scene, long iteration, const std::string& path);

struct LoadedScene {
  Scene scene;
  long iteration = 0;
};
LoadedScene load_scene(const std::string& path);

}  // namespace ssdlab
