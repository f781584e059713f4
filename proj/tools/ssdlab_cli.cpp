#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sys/wait.h>
#include <unistd.h>

#include "ssdlab/baselines.hpp"
#include "ssdlab/checkpoint.hpp"
#include "ssdlab/dataset.hpp"
#include "ssdlab/eval.hpp"
#include "ssdlab/harness.hpp"
#include "ssdlab/image_io.hpp"
#include "ssdlab/training.hpp"

namespace fs = std::filesystem;
using namespace ssdlab;

namespace {

int cmd_gen_dataset(const std::string& out, int size, int per_class, Scalar negative_fraction,
                    std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.image_size = size;
  cfg.per_class = per_class;
  cfg.negative_fraction = negative_fraction;
  cfg.seed = seed;
  auto ds = ToyDataset::generate(cfg, Vocabulary::standard());
  ds.save(out);
  std::cout << "wrote " << ds.size() << " images + manifest.json to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& dataset_dir, const std::string& out, int steps, int batch,
              Scalar lr, std::uint64_t seed, int image_size, int base, int timesteps,
              int extractor_steps) {
  fs::create_directories(out);
  Vocabulary vocab = Vocabulary::standard();
  auto data = ToyDataset::load(dataset_dir, vocab);
  check(data.image_size() == image_size,
        "train-denoiser: dataset resolution != requested image size");

  ArchConfig arch;
  arch.image_size = image_size;
  arch.base = base;
  UNet net(arch, vocab, seed);
  NoiseSchedule sched(timesteps);

  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.lr = lr;
  tc.seed = seed;
  auto result = train_toy_denoiser(net, data, sched, tc, &std::cout);
  save_denoiser(net, sched, (fs::path(out) / "model.ckpt").string());

  FeatureExtractor extractor(image_size, seed + 1);
  const Scalar ex_loss = extractor.train(data, extractor_steps, 16, 2e-3, seed + 1, &std::cout);
  extractor.save((fs::path(out) / "extractor.ckpt").string());

  nlohmann::json summary = {{"final_train_loss", result.final_train_loss},
                            {"holdout_loss", result.holdout_loss},
                            {"converged", result.converged},
                            {"extractor_loss", ex_loss},
                            {"empty_cond_fraction",
                             static_cast<Scalar>(result.empty_cond_samples) /
                                 std::max(1, result.total_samples)}};
  std::ofstream f(fs::path(out) / "training.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  if (!result.converged)
    std::cout << "WARNING: training did not reach the convergence threshold\n";
  return 0;
}

int cmd_run(const ExperimentConfig& cfg) {
  auto metrics = run_experiment(cfg);
  std::cout << metrics.json.dump(2) << "\n";
  std::cout << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::vector<std::string>& run_dirs, const std::string& out, int pairs,
                 const std::string& judge_kind, std::uint64_t seed, const std::string& anchor,
                 const std::string& judge_host, int judge_port, const std::string& judge_path) {
  fs::create_directories(out);
  // group runs by method label; every method must cover every case
  std::map<std::string, MethodResults> by_method;
  std::map<std::string, PromptCase> cases;
  for (const auto& dir : run_dirs) {
    LoadedRun run = load_run_dir(dir);
    std::string method = run.config.method.empty()
                             ? run.config.loss + "-" + run.config.schedule_kind
                             : run.config.method;
    auto& m = by_method[method];
    m.id = method;
    m.views_by_case[run.case_id] = run.views;
    if (cases.count(run.case_id) == 0)
      cases[run.case_id] = PromptCase{run.case_id, run.config.prompt, run.style};
  }
  std::vector<MethodResults> methods;
  for (auto& [id, m] : by_method) methods.push_back(std::move(m));
  std::vector<PromptCase> case_list;
  for (auto& [id, c] : cases) case_list.push_back(c);

  TournamentConfig tc;
  tc.pairs = pairs;
  tc.seed = seed;
  tc.anchor = anchor;

  std::unique_ptr<JudgeClient> judge;
  if (judge_kind == "mock") {
    const int cell = methods.at(0).views_by_case.begin()->second.at(0).rgb.h;
    judge = std::make_unique<MockMetricJudge>(4, cell);
  } else if (judge_kind == "external") {
    JudgeEndpoint ep;
    ep.host = judge_host;
    ep.port = judge_port;
    ep.path = judge_path;
    ep.transcript_dir = (fs::path(out) / "transcripts").string();
    check(!ep.host.empty(), "evaluate: external judge needs --judge-host");
    judge = std::make_unique<HttpJudge>(ep);
  } else {
    throw ConfigError("evaluate: judge must be mock or external");
  }

  auto report = run_tournament(methods, case_list, *judge, tc);

  std::ofstream(fs::path(out) / "elo.json") << report.json.dump(2) << "\n";
  std::ofstream(fs::path(out) / "report.md") << report.markdown;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : report.records) {
    nlohmann::json verdicts = nlohmann::json::array();
    for (auto v : r.verdicts)
      verdicts.push_back(v == Verdict::left ? "left" : v == Verdict::right ? "right" : "tie");
    records.push_back({{"left", r.left}, {"right", r.right}, {"prompt", r.prompt_id},
                       {"verdicts", verdicts}});
  }
  std::ofstream(fs::path(out) / "records.json") << records.dump(2) << "\n";
  std::cout << report.markdown << "\nskipped pairings: " << report.skipped << "\n";
  return 0;
}

int cmd_make_grid(const std::string& left, const std::string& right, const std::string& style_path,
                  const std::string& out) {
  LoadedRun a = load_run_dir(left);
  LoadedRun b = load_run_dir(right);
  Image style = style_path.empty() ? a.style : load_png(style_path);
  Image grid = build_comparison_grid(a.views, b.views, style);
  fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path().string());
  save_png(grid, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_invert_style(const std::string& model_path, const std::string& image_path,
                     const std::string& out, int t_end, Scalar threshold) {
  auto loaded = load_denoiser(model_path);
  Image image = load_png(image_path);
  InvertOptions opts;
  opts.t_end = t_end;
  opts.recon_error_threshold = threshold;
  auto report = invert_style_image(*loaded.net, loaded.schedule, image, opts);
  fs::path out_path(out);
  if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
  save_style_reference(report.ref, out);
  std::cout << "reconstruction MAE " << report.recon_mae << (report.warning ? " (WARNING: above threshold)" : "")
            << "\nwrote " << out << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out, const std::string& self, int jobs) {
  std::ifstream f(config_path);
  if (!f) throw ConfigError("sweep: cannot open " + config_path);
  nlohmann::json base = nlohmann::json::parse(f);

  // parse key=v1,v2 into value lists
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep: --set expects key=v1,v2");
    std::vector<std::string> values;
    std::string rest = s.substr(eq + 1);
    std::stringstream ss(rest);
    std::string v;
    while (std::getline(ss, v, ',')) values.push_back(v);
    axes.emplace_back(s.substr(0, eq), values);
  }

  // cartesian product, one child process per combination
  std::vector<nlohmann::json> combos = {base};
  for (const auto& [key, values] : axes) {
    std::vector<nlohmann::json> next;
    for (const auto& c : combos)
      for (const auto& v : values) {
        nlohmann::json cc = c;
        // numeric if it parses, string otherwise
        try {
          cc[key] = nlohmann::json::parse(v);
        } catch (...) {
          cc[key] = v;
        }
        next.push_back(cc);
      }
    combos = next;
  }

  fs::create_directories(out);
  std::vector<pid_t> running;
  int failures = 0;
  auto reap_one = [&]() {
    int status = 0;
    pid_t pid = wait(&status);
    if (pid > 0 && (!WIFEXITED(status) || WEXITSTATUS(status) != 0)) ++failures;
    running.erase(std::remove(running.begin(), running.end(), pid), running.end());
  };

  for (std::size_t i = 0; i < combos.size(); ++i) {
    auto combo = combos[i];
    const std::string run_dir = (fs::path(out) / ("run_" + std::to_string(i))).string();
    combo["out"] = run_dir;
    const std::string cfg_path = (fs::path(out) / ("config_" + std::to_string(i) + ".json")).string();
    std::ofstream(cfg_path) << combo.dump(2) << "\n";

    while (static_cast<int>(running.size()) >= std::max(1, jobs)) reap_one();
    pid_t pid = fork();
    if (pid == 0) {
      execl(self.c_str(), self.c_str(), "run", "--config", cfg_path.c_str(), (char*)nullptr);
      _exit(127);
    }
    check(pid > 0, "sweep: fork failed");
    running.push_back(pid);
  }
  while (!running.empty()) reap_one();
  std::cout << combos.size() << " runs, " << failures << " failures\n";
  return failures == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stylized score distillation laboratory"};
  app.require_subcommand(1);

  // ---- gen-dataset -------------------------------------------------------
  auto* gen = app.add_subcommand("gen-dataset", "emit the procedural toy dataset");
  std::string gen_out = "dataset";
  int gen_size = 32, gen_per_class = 16;
  Scalar gen_negfrac = 0.1;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--size", gen_size, "image size");
  gen->add_option("--per-class", gen_per_class, "samples per (shape, style) pair");
  gen->add_option("--negative-fraction", gen_negfrac, "degraded negative-prompt fraction");
  gen->add_option("--seed", gen_seed, "rng seed");

  // ---- train-denoiser ----------------------------------------------------
  auto* train = app.add_subcommand("train-denoiser", "train the toy denoiser + extractor");
  std::string train_data, train_out = "model";
  int train_steps = 1500, train_batch = 8, train_size = 32, train_base = 16, train_T = 1000;
  int train_extractor_steps = 400;
  Scalar train_lr = 2e-3;
  std::uint64_t train_seed = 0;
  train->add_option("--dataset", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--steps", train_steps);
  train->add_option("--batch", train_batch);
  train->add_option("--lr", train_lr);
  train->add_option("--seed", train_seed);
  train->add_option("--image-size", train_size);
  train->add_option("--base-channels", train_base);
  train->add_option("--timesteps", train_T);
  train->add_option("--extractor-steps", train_extractor_steps);

  // ---- distill -------------------------------------------------------------
  auto* distill = app.add_subcommand("distill", "optimize a scene against the trained model");
  ExperimentConfig dc;
  std::string d_style_image, d_style_ref, d_style_origin = "generated", d_style_prompt;
  distill->add_option("--model", dc.model_path, "denoiser checkpoint")->required();
  distill->add_option("--prompt", dc.prompt, "content prompt")->required();
  distill->add_option("--out", dc.out_dir, "artifact directory")->required();
  distill->add_option("--mode", dc.mode, "canvas2d | voxel3d");
  distill->add_option("--loss", dc.loss, "sds | ssd | snf-ssd | vsd-ssd");
  distill->add_option("--schedule", dc.schedule_kind, "constant | sqrt | quad");
  distill->add_option("--lambda-max", dc.lambda_max);
  distill->add_option("--cfg-scale", dc.beta);
  distill->add_option("--iters", dc.iterations);
  distill->add_option("--lr", dc.lr);
  distill->add_option("--seed", dc.seed);
  distill->add_option("--grid-size", dc.grid_size);
  distill->add_option("--snapshot-every", dc.snapshot_every);
  distill->add_option("--style-image", d_style_image, "style reference PNG");
  distill->add_option("--style-ref", d_style_ref, "prebuilt style reference checkpoint");
  distill->add_option("--style-caption", dc.style_caption);
  distill->add_option("--style-origin", d_style_origin, "generated | inverted");
  distill->add_option("--style-prompt", d_style_prompt, "y_s text for generated origin");
  distill->add_option("--baseline", dc.baseline,
                      "none | style-in-prompt | neural-style-loss | textual-inversion");
  distill->add_option("--extractor", dc.extractor_path);
  distill->add_option("--style-loss-weight", dc.style_loss_weight);
  distill->add_option("--method", dc.method, "method label for evaluation");
  distill->add_option("--negative-prompt", dc.negative_prompt);

  // ---- run ----------------------------------------------------------------
  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  std::string run_config;
  run->add_option("--config", run_config, "experiment config path")->required();

  // ---- evaluate -------------------------------------------------------------
  auto* eval = app.add_subcommand("evaluate", "pairwise tournament + Elo over finished runs");
  std::vector<std::string> eval_runs;
  std::string eval_out = "evaluation", eval_judge = "mock", eval_anchor;
  std::string eval_judge_host, eval_judge_path = "/judge";
  int eval_pairs = 120, eval_judge_port = 80;
  std::uint64_t eval_seed = 0;
  eval->add_option("--runs", eval_runs, "finished run directories")->required()->expected(-1);
  eval->add_option("--out", eval_out, "output directory");
  eval->add_option("--pairs", eval_pairs, "total pairwise comparisons");
  eval->add_option("--judge", eval_judge, "mock | external");
  eval->add_option("--seed", eval_seed);
  eval->add_option("--anchor", eval_anchor, "anchor method id (rating pinned to 1000)");
  eval->add_option("--judge-host", eval_judge_host);
  eval->add_option("--judge-port", eval_judge_port);
  eval->add_option("--judge-path", eval_judge_path);

  // ---- make-grid -------------------------------------------------------------
  auto* grid = app.add_subcommand("make-grid", "compose a judge comparison grid");
  std::string grid_left, grid_right, grid_style, grid_out = "grid.png";
  grid->add_option("--left", grid_left, "run directory (object 1)")->required();
  grid->add_option("--right", grid_right, "run directory (object 2)")->required();
  grid->add_option("--style", grid_style, "style PNG (default: left run's style)");
  grid->add_option("--out", grid_out);

  // ---- invert-style --------------------------------------------------------
  auto* invert = app.add_subcommand("invert-style", "DDIM-invert a style image");
  std::string inv_model, inv_image, inv_out = "style_ref.ckpt";
  int inv_t_end = -1;
  Scalar inv_threshold = 0.05;
  invert->add_option("--model", inv_model)->required();
  invert->add_option("--image", inv_image)->required();
  invert->add_option("--out", inv_out);
  invert->add_option("--t-end", inv_t_end);
  invert->add_option("--threshold", inv_threshold, "reconstruction MAE warning threshold");

  // ---- sweep -----------------------------------------------------------------
  auto* sweep = app.add_subcommand("sweep", "launch a parameter grid as child processes");
  std::string sweep_config, sweep_out = "sweep";
  std::vector<std::string> sweep_sets;
  int sweep_jobs = 1;
  sweep->add_option("--config", sweep_config, "base experiment config")->required();
  sweep->add_option("--set", sweep_sets, "key=v1,v2 (repeatable)")->expected(-1);
  sweep->add_option("--out", sweep_out);
  sweep->add_option("--jobs", sweep_jobs, "concurrent child processes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_dataset(gen_out, gen_size, gen_per_class, gen_negfrac, gen_seed);
    if (train->parsed())
      return cmd_train(train_data, train_out, train_steps, train_batch, train_lr, train_seed,
                       train_size, train_base, train_T, train_extractor_steps);
    if (distill->parsed()) {
      if (!d_style_image.empty() || !d_style_ref.empty()) {
        dc.has_style = true;
        dc.style_image_path = d_style_image;
        dc.style_reference_path = d_style_ref;
        dc.style_origin = d_style_origin;
        dc.style_prompt = d_style_prompt;
      }
      dc.validate();
      return cmd_run(dc);
    }
    if (run->parsed()) return cmd_run(ExperimentConfig::from_file(run_config));
    if (eval->parsed())
      return cmd_evaluate(eval_runs, eval_out, eval_pairs, eval_judge, eval_seed, eval_anchor,
                          eval_judge_host, eval_judge_port, eval_judge_path);
    if (grid->parsed()) return cmd_make_grid(grid_left, grid_right, grid_style, grid_out);
    if (invert->parsed())
      return cmd_invert_style(inv_model, inv_image, inv_out, inv_t_end, inv_threshold);
    if (sweep->parsed())
      return cmd_sweep(sweep_config, sweep_sets, sweep_out, argv[0], sweep_jobs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ExternalServiceError& e) {
    std::cerr << "external service error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
