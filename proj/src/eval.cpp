#include "ssdlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <sstream>

#include "ssdlab/image_io.hpp"

namespace ssdlab {

const std::array<std::string, kNumCriteria>& criteria_names() {
  static const std::array<std::string, kNumCriteria> names = {
      "text_asset_alignment", "plausibility_3d",  "geometry_texture_alignment",
      "texture_details",      "geometry_details", "style_alignment",
      "overall"};
  return names;
}

const std::array<std::string, kNumCriteria>& criteria_labels() {
  static const std::array<std::string, kNumCriteria> labels = {
      "Text-Asset Alignment", "3D Plausibility",  "Text-Geometry Alignment",
      "Texture Details",      "Geometry Details", "Style Alignment",
      "Overall"};
  return labels;
}

std::array<Verdict, kNumCriteria> parse_judge_verdict(const std::string& response) {
  const std::string marker = "Final answer:";
  const auto pos = response.rfind(marker);
  if (pos == std::string::npos)
    throw ContractError("parse_judge_verdict: no 'Final answer:' line in response: " + response);
  std::istringstream is(response.substr(pos + marker.size()));
  std::vector<int> numbers;
  std::string tok;
  while (is >> tok) {
    if (tok == "1" || tok == "2" || tok == "3") numbers.push_back(tok[0] - '0');
  }
  if (numbers.size() != kNumCriteria) {
    std::ostringstream os;
    os << "parse_judge_verdict: expected " << kNumCriteria << " verdicts, got " << numbers.size()
       << " in response: " << response;
    throw ContractError(os.str());
  }
  std::array<Verdict, kNumCriteria> out;
  for (int i = 0; i < kNumCriteria; ++i)
    out[static_cast<std::size_t>(i)] = numbers[static_cast<std::size_t>(i)] == 1   ? Verdict::left
                                       : numbers[static_cast<std::size_t>(i)] == 2 ? Verdict::right
                                                                                   : Verdict::tie;
  return out;
}

std::string format_verdicts(const std::array<Verdict, kNumCriteria>& verdicts) {
  std::ostringstream os;
  os << "Final answer:\n";
  for (int i = 0; i < kNumCriteria; ++i) {
    if (i) os << " ";
    os << (verdicts[static_cast<std::size_t>(i)] == Verdict::left    ? 1
           : verdicts[static_cast<std::size_t>(i)] == Verdict::right ? 2
                                                                     : 3);
  }
  return os.str();
}

const std::string& judge_prompt_template() {
  static const std::string tmpl = R"(Our task here is the compare two 3D objects, both generated from the same text description.
We want to decide which one is better according to the provided criteria.

I will provide you with a specific multi-view images of two 3D objects, where the left part of it are image renderings and normal renderings of 3D object 1, and the right part denotes those of 3D object 2.
At the bottom of the image, last row, you can see the style image duplicated four times. This image is the reference image for the style of the 3D object.

# Instruction
1. Text prompt and Asset Alignment. Focus on how well they correspond to the given text description. An ideal model should accurately reflect all objects and surroundings mentioned in the text prompt, capturing the corresponding attributes as described. Please first describe each of the two models, and then evaluate how well it covers all the attributes in the original text prompt.

2. 3D Plausibility. Look at both the RGB and normal images and imagine a 3D model from the multi-view images. Determine which model appears more natural, solid, and plausible. Pay attention to any irregularities, such as abnormal body proportions, duplicated parts, or the presence of noisy or meaningless 3D structures. An ideal model should possess accurate proportions, shapes, and structures that closely resemble the real-world object or scene.

3. Geometry-Texture Alignment. This examines how well the texture adheres to the geometry. The texture and shape should align with each other locally. For instance, a flower should resemble a flower in both the RGB and normal map, rather than solely in the RGB. The RGB image and its corresponding normal image should exhibit matching structures.

4. Low-Level Texture Details. Focus on local parts of the RGB images. Assess which model effectively captures fine details without appearing blurry and which one aligns with the desired aesthetic of the 3D model. Note that overly abstract and stylized textures are not desired unless specifically mentioned in the text prompt.

5. Low-Level Geometry Details. Focus on the local parts of the normal maps. The geometry should accurately represent the intended shape. Note that meaningless noise is not considered as high-frequency details. Determine which one has a more well-organized and efficient structure, which one exhibits intricate details, and which one is more visually pleasing and smooth.

6. Style Image Alignment. Look at the style image at the bottom and determine which model better aligns with the desired style. Do you see any patterns from style image that are present in any of 3D objects? 3D object should ideally represent the provided prompt, but in the style from the style image. It should be a good combination of the prompt and reference style.

7. Considering all the degrees above, which one is better overall?

Take a really close look at each of the multi-view images for these two 3D objects before providing your answer.

When evaluating these aspects, focus on one of them at a time.

Try to make independent decisions between these criteria.

# Output format
To provide an answer, please provide a short analysis for each of the abovementioned evaluation criteria.
The analysis should be very concise and accurate.

For each of the criteria, you need to make a decision using these three options:
1. Left (object 1) is better;
2. Right (object 2) is better;
3. Cannot decide.
IMPORTANT: PLEASE USE THE THIRD OPTION SPARSELY.

Then, in the last row, summarize your final decision by "<option for criterion 1> <option for criterion 2> <option for criterion 3> <option for criterion 4> <option for criterion 5> <option for criterion 6> <option for criterion 7>".

An example output looks like follows:
"
Analysis:
1. Text prompt & Asset Alignment: The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

2. 3D Plausibility. The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

3. Geometry-Texture Alignment. The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

4. Low-Level Texture Details. The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

5. Low-Level Geometry Details. The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

6. Style Image Alignment. The left one xxxx; The right one xxxx;
The left/right one is better or cannot decide.

7. Overall, xxxxxx
The left/right one is better or cannot decide.

Final answer:
x x x x x x x (e.g., 1 2 2 3 2 1 1/ 3 3 3 2 1 3 3 / 3 2 2 1 1 1 1)
"
Following is the text prompt from which these two 3D objects are generated:
"<PROMPT>"
Please compare these two 3D objects as instructed.
)";
  return tmpl;
}

std::string render_judge_prompt(const std::string& prompt_text) {
  std::string out = judge_prompt_template();
  const std::string key = "<PROMPT>";
  const auto pos = out.find(key);
  check(pos != std::string::npos, "judge prompt template lost its <PROMPT> slot");
  out.replace(pos, key.size(), prompt_text);
  return out;
}

// ---------------------------------------------------------------------------

Scalar EloTable::rating(int criterion, const std::string& method) const {
  auto it = std::find(methods.begin(), methods.end(), method);
  check(it != methods.end(), "EloTable: unknown method " + method);
  return ratings(criterion, it - methods.begin());
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

EloTable compute_elo(const std::vector<ComparisonRecord>& records, const std::string& anchor) {
  check(!records.empty(), "compute_elo: no records");
  EloTable table;
  table.anchor = anchor;
  for (const auto& r : records) {
    for (const auto& m : {r.left, r.right}) {
      if (std::find(table.methods.begin(), table.methods.end(), m) == table.methods.end())
        table.methods.push_back(m);
      table.comparison_count[m] += 1;
    }
  }
  std::sort(table.methods.begin(), table.methods.end());
  const int m = static_cast<int>(table.methods.size());
  check(m >= 2, "compute_elo: need at least two methods");
  auto idx = [&](const std::string& name) {
    return static_cast<int>(std::find(table.methods.begin(), table.methods.end(), name) -
                            table.methods.begin());
  };
  check(std::find(table.methods.begin(), table.methods.end(), anchor) != table.methods.end(),
        "compute_elo: anchor method has no records");

  // connectivity of the raw comparison graph
  UnionFind uf(m);
  for (const auto& r : records) uf.unite(idx(r.left), idx(r.right));
  std::map<int, std::vector<std::string>> components;
  for (int i = 0; i < m; ++i)
    components[uf.find(i)].push_back(table.methods[static_cast<std::size_t>(i)]);
  if (components.size() > 1) {
    std::ostringstream os;
    os << "compute_elo: disconnected comparison graph; components:";
    for (const auto& [root, names] : components) {
      os << " {";
      for (std::size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
      os << "}";
    }
    throw ContractError(os.str());
  }

  table.ratings = Mat::Zero(kNumCriteria, m);
  for (int c = 0; c < kNumCriteria; ++c) {
    Mat W = Mat::Constant(m, m, 0.5);  // 0.5 pseudo-win per ordered pair
    W.diagonal().setZero();
    for (const auto& r : records) {
      const int l = idx(r.left), g = idx(r.right);
      switch (r.verdicts[static_cast<std::size_t>(c)]) {
        case Verdict::left: W(l, g) += 1.0; break;
        case Verdict::right: W(g, l) += 1.0; break;
        case Verdict::tie:
          W(l, g) += 0.5;
          W(g, l) += 0.5;
          break;
      }
    }
    // Bradley-Terry MLE via the minorization-maximization fixed point
    Vec gamma = Vec::Ones(m);
    for (int iter = 0; iter < 5000; ++iter) {
      Vec next(m);
      Scalar delta = 0.0;
      for (int i = 0; i < m; ++i) {
        const Scalar wins = W.row(i).sum();
        Scalar denom = 0.0;
        for (int j = 0; j < m; ++j) {
          if (j == i) continue;
          denom += (W(i, j) + W(j, i)) / (gamma(i) + gamma(j));
        }
        next(i) = wins / denom;
      }
      // normalize to geometric mean 1
      const Scalar log_mean = next.array().log().mean();
      next = (next.array().log() - log_mean).exp().matrix();
      delta = (next.array().log() - gamma.array().log()).abs().maxCoeff();
      gamma = next;
      if (delta < 1e-13) break;
    }
    const int a = idx(anchor);
    for (int i = 0; i < m; ++i)
      table.ratings(c, i) = 1000.0 + 400.0 * (std::log10(gamma(i)) - std::log10(gamma(a)));
    table.ratings(c, a) = 1000.0;  // exact anchor
  }
  return table;
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kHistBins = 8;

/// Per-channel normalized histograms over the selected pixels.
std::array<Vec, 3> channel_histograms(const Image& im, const Image* mask, long* n_pixels) {
  std::array<Vec, 3> hist;
  for (auto& h : hist) h = Vec::Zero(kHistBins);
  long n = 0;
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      if (mask && mask->at(0, y, x) <= 0.5) continue;
      ++n;
      for (int c = 0; c < 3; ++c) {
        const Scalar v = std::clamp(im.at(c, y, x), 0.0, 1.0);
        const int bin = std::min(kHistBins - 1, static_cast<int>(v * kHistBins));
        hist[static_cast<std::size_t>(c)](bin) += 1.0;
      }
    }
  if (n_pixels) *n_pixels = n;
  if (n > 0)
    for (auto& h : hist) h /= static_cast<Scalar>(n);
  return hist;
}

Scalar normalized_emd_1d(const Vec& a, const Vec& b) {
  Scalar cdf_a = 0.0, cdf_b = 0.0, emd = 0.0;
  for (int i = 0; i < kHistBins; ++i) {
    cdf_a += a(i);
    cdf_b += b(i);
    emd += std::abs(cdf_a - cdf_b);
  }
  return emd / (kHistBins - 1);
}

}  // namespace

Scalar style_alignment_metric(const Image& render, const Image& style, const Image* mask,
                              bool* empty_warning) {
  long n_fg = 0;
  auto hr = channel_histograms(render, mask, &n_fg);
  if (empty_warning) *empty_warning = (n_fg == 0);
  if (n_fg == 0) return 0.0;
  auto hs = channel_histograms(style, nullptr, nullptr);
  Scalar worst = 0.0;
  for (int c = 0; c < 3; ++c)
    worst = std::max(worst, normalized_emd_1d(hr[static_cast<std::size_t>(c)],
                                              hs[static_cast<std::size_t>(c)]));
  return 1.0 - worst;
}

Scalar silhouette_consistency(const RadianceGrid& grid, int n_views, int res,
                              Scalar elevation_deg, Scalar radius) {
  check(n_views >= 2, "silhouette_consistency: need at least 2 views");
  RenderOptions opts;
  std::vector<std::vector<bool>> masks;
  for (int v = 0; v < n_views; ++v) {
    Camera cam;
    cam.azimuth_deg = 360.0 * v / n_views;
    cam.elevation_deg = elevation_deg;
    cam.radius = radius;
    cam.res = res;
    auto out = render_grid(grid, cam, opts);
    std::vector<bool> mask(static_cast<std::size_t>(res) * res);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        mask[static_cast<std::size_t>(y) * res + x] = out.weight_sum.at(0, y, x) > 0.5;
    masks.push_back(std::move(mask));
  }
  Scalar total = 0.0;
  for (int v = 0; v < n_views; ++v) {
    const auto& a = masks[static_cast<std::size_t>(v)];
    const auto& b = masks[static_cast<std::size_t>((v + 1) % n_views)];
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inter += (a[i] && b[i]) ? 1 : 0;
      uni += (a[i] || b[i]) ? 1 : 0;
    }
    total += uni == 0 ? 0.0 : static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
  }
  return total / n_views;
}

// ---------------------------------------------------------------------------

namespace {

void blit(Image& dst, const Image& src, int y0, int x0) {
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      for (int c = 0; c < 3; ++c) dst.at(c, y0 + y, x0 + x) = src.at(c, y, x);
}

Image crop(const Image& src, int y0, int x0, int h, int w) {
  Image out(src.channels(), h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < src.channels(); ++c) out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
  return out;
}

}  // namespace

Image build_comparison_grid(const std::vector<ViewPair>& views_a,
                            const std::vector<ViewPair>& views_b, const Image& style) {
  check(!views_a.empty(), "build_comparison_grid: no views");
  if (views_a.size() != views_b.size())
    throw ContractError("build_comparison_grid: mismatched view counts");
  const int cell = views_a[0].rgb.h;
  for (const auto& vp : views_a)
    check(vp.rgb.h == cell && vp.rgb.w == cell && vp.normal.h == cell,
          "build_comparison_grid: inconsistent cell sizes");
  const int rows = static_cast<int>(views_a.size()) + 1;
  Image grid(3, rows * cell, 4 * cell);
  for (std::size_t v = 0; v < views_a.size(); ++v) {
    const int y0 = static_cast<int>(v) * cell;
    blit(grid, views_a[v].rgb, y0, 0);
    blit(grid, views_a[v].normal, y0, cell);
    blit(grid, views_b[v].rgb, y0, 2 * cell);
    blit(grid, views_b[v].normal, y0, 3 * cell);
  }
  Image style_cell = (style.h == cell && style.w == cell) ? style : resize_nearest(style, cell, cell);
  const int y0 = (rows - 1) * cell;
  for (int c = 0; c < 4; ++c) blit(grid, style_cell, y0, c * cell);
  return grid;
}

std::string MockMetricJudge::judge(const Image& grid, const std::string&) const {
  const Image style = crop(grid, n_views_ * cell_, 0, cell_, cell_);
  Scalar score_left = 0.0, score_right = 0.0;
  for (int v = 0; v < n_views_; ++v) {
    score_left += style_alignment_metric(crop(grid, v * cell_, 0, cell_, cell_), style);
    score_right += style_alignment_metric(crop(grid, v * cell_, 2 * cell_, cell_, cell_), style);
  }
  std::array<Verdict, kNumCriteria> verdicts;
  verdicts.fill(Verdict::tie);
  if (std::abs(score_left - score_right) > 1e-12) {
    const Verdict winner = score_left > score_right ? Verdict::left : Verdict::right;
    verdicts[5] = winner;  // style alignment
    verdicts[6] = winner;  // overall follows the only informative criterion
  }
  return "Analysis: style-metric mock judge.\n\n" + format_verdicts(verdicts);
}

TournamentReport run_tournament(const std::vector<MethodResults>& methods,
                                const std::vector<PromptCase>& cases, const JudgeClient& judge,
                                const TournamentConfig& cfg) {
  const int m = static_cast<int>(methods.size());
  check(m >= 2, "run_tournament: need at least two methods");
  check(!cases.empty(), "run_tournament: no prompt cases");
  std::vector<std::pair<int, int>> pair_list;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) pair_list.emplace_back(i, j);
  check(cfg.pairs >= static_cast<int>(pair_list.size()),
        "run_tournament: pairs must cover every unordered method pair");
  for (const auto& meth : methods)
    for (const auto& pc : cases)
      check(meth.views_by_case.count(pc.id) > 0,
            "run_tournament: method " + meth.id + " missing case " + pc.id);

  struct Job {
    int left_idx, right_idx;  // after placement randomization
    const PromptCase* c;
    bool flipped;
  };
  Rng rng = Rng::substream(cfg.seed, "evaluation");
  std::vector<Job> jobs;
  for (int p = 0; p < cfg.pairs; ++p) {
    auto [i, j] = pair_list[static_cast<std::size_t>(p) % pair_list.size()];
    const auto& pc = cases[(static_cast<std::size_t>(p) / pair_list.size()) % cases.size()];
    const bool flip = rng.uniform() < 0.5;
    jobs.push_back(Job{flip ? j : i, flip ? i : j, &pc, flip});
  }

  TournamentReport report;
  std::vector<std::optional<ComparisonRecord>> slots(jobs.size());
  const int in_flight = std::max(1, cfg.max_in_flight);

  auto run_job = [&](std::size_t index) -> std::optional<ComparisonRecord> {
    const Job& job = jobs[index];
    const auto& left = methods[static_cast<std::size_t>(job.left_idx)];
    const auto& right = methods[static_cast<std::size_t>(job.right_idx)];
    Image grid = build_comparison_grid(left.views_by_case.at(job.c->id),
                                       right.views_by_case.at(job.c->id), job.c->style);
    const std::string prompt = render_judge_prompt(job.c->text);
    for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
      try {
        const std::string response = judge.judge(grid, prompt);
        auto verdicts = parse_judge_verdict(response);
        ComparisonRecord rec;
        rec.prompt_id = job.c->id;
        rec.left = left.id;
        rec.right = right.id;
        rec.verdicts = verdicts;
        return rec;
      } catch (const std::exception&) {
        if (attempt == cfg.retries) return std::nullopt;  // recorded as skipped
      }
    }
    return std::nullopt;
  };

  for (std::size_t base = 0; base < jobs.size(); base += static_cast<std::size_t>(in_flight)) {
    std::vector<std::future<std::optional<ComparisonRecord>>> futures;
    const std::size_t end = std::min(jobs.size(), base + static_cast<std::size_t>(in_flight));
    for (std::size_t k = base; k < end; ++k)
      futures.push_back(std::async(std::launch::async, run_job, k));
    for (std::size_t k = base; k < end; ++k) slots[k] = futures[k - base].get();
  }

  for (auto& slot : slots) {
    if (slot.has_value())
      report.records.push_back(std::move(*slot));
    else
      ++report.skipped;
  }
  check(!report.records.empty(), "run_tournament: every pairing failed");

  const std::string anchor = cfg.anchor.empty() ? methods[0].id : cfg.anchor;
  report.elo = compute_elo(report.records, anchor);

  // report artifacts
  nlohmann::json criteria_json;
  for (int c = 0; c < kNumCriteria; ++c) {
    nlohmann::json per_method;
    for (std::size_t i = 0; i < report.elo.methods.size(); ++i)
      per_method[report.elo.methods[i]] = report.elo.ratings(c, static_cast<Eigen::Index>(i));
    criteria_json[criteria_names()[static_cast<std::size_t>(c)]] = per_method;
  }
  report.json = {{"anchor", anchor},
                 {"pairs", cfg.pairs},
                 {"skipped", report.skipped},
                 {"records", report.records.size()},
                 {"criteria", criteria_json}};

  std::ostringstream md;
  md << "| Methods |";
  for (const auto& label : criteria_labels()) md << " " << label << " |";
  md << "\n|---|";
  for (int c = 0; c < kNumCriteria; ++c) md << "---|";
  md << "\n";
  for (const auto& method : report.elo.methods) {
    md << "| " << method << " |";
    for (int c = 0; c < kNumCriteria; ++c) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), " %.3f |", report.elo.rating(c, method));
      md << buf;
    }
    md << "\n";
  }
  report.markdown = md.str();
  return report;
}

}  // namespace ssdlab
