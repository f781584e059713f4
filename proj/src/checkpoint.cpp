#include "ssdlab/checkpoint.hpp"

#include <cstdint>
#include <fstream>

namespace ssdlab {

namespace ckpt {

namespace {
constexpr char kMagic[8] = {'S', 'S', 'D', 'L', 'A', 'B', 'C', 'K'};
}

void write(const std::string& path, nlohmann::json header,
           const std::vector<const Mat*>& tensors) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const Mat* m : tensors)
    shapes.push_back({{"rows", m->rows()}, {"cols", m->cols()}});
  header["tensors"] = shapes;
  const std::string head = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ContractError("checkpoint: cannot open for write: " + path);
  f.write(kMagic, 8);
  const std::uint64_t len = head.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Mat* m : tensors)
    f.write(reinterpret_cast<const char*>(m->data()),
            static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(m->size())));
  if (!f) throw ContractError("checkpoint: write failed: " + path);
}

Contents read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ContractError("checkpoint: cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw ContractError("checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string head(len, '\0');
  f.read(head.data(), static_cast<std::streamsize>(len));
  Contents out;
  out.header = nlohmann::json::parse(head);
  for (const auto& sh : out.header.at("tensors")) {
    Mat m(sh.at("rows").get<Eigen::Index>(), sh.at("cols").get<Eigen::Index>());
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(m.size())));
    out.tensors.push_back(std::move(m));
  }
  if (!f) throw ContractError("checkpoint: truncated file: " + path);
  return out;
}

}  // namespace ckpt

nlohmann::json schedule_to_json(const NoiseSchedule& s) {
  return {{"num_steps", s.num_steps()},
          {"weighting", s.weighting() == Weighting::sigma2 ? "sigma2" : "one"},
          {"t_min_frac", s.t_min_frac()},
          {"t_max_frac", s.t_max_frac()}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  return NoiseSchedule(j.at("num_steps").get<int>(),
                       j.at("weighting").get<std::string>() == "one" ? Weighting::one
                                                                     : Weighting::sigma2,
                       j.at("t_min_frac").get<Scalar>(), j.at("t_max_frac").get<Scalar>());
}

void save_denoiser(const UNet& net, const NoiseSchedule& sched, const std::string& path) {
  const ArchConfig& a = net.arch();
  nlohmann::json header = {
      {"kind", "denoiser"},
      {"arch",
       {{"image_size", a.image_size},
        {"in_channels", a.in_channels},
        {"base", a.base},
        {"embed_dim", a.embed_dim},
        {"token_dim", a.token_dim}}},
      {"schedule", schedule_to_json(sched)},
      {"vocab", net.vocab().words()},
      {"trained", net.is_trained()},
      {"final_loss", net.final_training_loss()},
  };
  nlohmann::json names = nlohmann::json::array();
  std::vector<const Mat*> tensors;
  for (int i = 0; i < net.params().size(); ++i) {
    names.push_back(net.params()[i].name);
    tensors.push_back(net.params()[i].value);
  }
  header["param_names"] = names;
  ckpt::write(path, std::move(header), tensors);
}

LoadedDenoiser load_denoiser(const std::string& path) {
  auto contents = ckpt::read(path);
  const auto& h = contents.header;
  check(h.at("kind") == "denoiser", "load_denoiser: not a denoiser checkpoint");
  ArchConfig a;
  a.image_size = h.at("arch").at("image_size").get<int>();
  a.in_channels = h.at("arch").at("in_channels").get<int>();
  a.base = h.at("arch").at("base").get<int>();
  a.embed_dim = h.at("arch").at("embed_dim").get<int>();
  a.token_dim = h.at("arch").at("token_dim").get<int>();
  Vocabulary vocab(h.at("vocab").get<std::vector<std::string>>());

  LoadedDenoiser out{std::make_unique<UNet>(a, vocab, 0), schedule_from_json(h.at("schedule"))};
  auto& ps = out.net->params();
  check(static_cast<int>(contents.tensors.size()) == ps.size(),
        "load_denoiser: tensor count mismatch");
  for (int i = 0; i < ps.size(); ++i) {
    check(contents.tensors[static_cast<std::size_t>(i)].rows() == ps[i].value->rows() &&
              contents.tensors[static_cast<std::size_t>(i)].cols() == ps[i].value->cols(),
          "load_denoiser: tensor shape mismatch for " + ps[i].name);
    *ps[i].value = contents.tensors[static_cast<std::size_t>(i)];
  }
  if (h.value("trained", false)) out.net->mark_trained(h.value("final_loss", 0.0));
  return out;
}

void save_scene(const Scene& scene, long iteration, const std::string& path) {
  const bool grid = scene.mode == Scene::Mode::voxel3d;
  nlohmann::json header = {{"kind", "scene"},
                           {"mode", grid ? "voxel3d" : "canvas2d"},
                           {"iteration", iteration}};
  std::vector<const Mat*> tensors;
  if (grid) {
    header["n"] = scene.grid.n;
    header["extent"] = scene.grid.extent;
    tensors = {&scene.grid.density_logits, &scene.grid.color_logits};
  } else {
    header["h"] = scene.canvas.logits.h;
    header["w"] = scene.canvas.logits.w;
    tensors = {&scene.canvas.logits.data};
  }
  ckpt::write(path, std::move(header), tensors);
}

LoadedScene load_scene(const std::string& path) {
  auto contents = ckpt::read(path);
  const auto& h = contents.header;
  check(h.at("kind") == "scene", "load_scene: not a scene checkpoint");
  LoadedScene out;
  out.iteration = h.at("iteration").get<long>();
  if (h.at("mode") == "voxel3d") {
    out.scene = Scene::make_grid(h.at("n").get<int>());
    out.scene.grid.extent = h.at("extent").get<Scalar>();
    out.scene.grid.density_logits = contents.tensors.at(0);
    out.scene.grid.color_logits = contents.tensors.at(1);
  } else {
    const int ih = h.at("h").get<int>(), iw = h.at("w").get<int>();
    out.scene = Scene::make_canvas(ih, iw);
    out.scene.canvas.logits = Image(ih, iw, contents.tensors.at(0));
  }
  return out;
}

}  // namespace ssdlab
