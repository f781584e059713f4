#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssdlab/eval.hpp"
#include "ssdlab/image_io.hpp"

using namespace ssdlab;

namespace {

std::array<Verdict, kNumCriteria> all_of(Verdict v) {
  std::array<Verdict, kNumCriteria> a;
  a.fill(v);
  return a;
}

ComparisonRecord rec(const std::string& l, const std::string& r,
                     std::array<Verdict, kNumCriteria> v) {
  ComparisonRecord c;
  c.left = l;
  c.right = r;
  c.prompt_id = "p";
  c.verdicts = v;
  return c;
}

/// Independent oracle: log-likelihood of a two-player win record as a
/// function of the challenger's rating (anchor fixed at 1000).
Scalar pair_log_likelihood(Scalar rating, Scalar wins_challenger, Scalar wins_anchor) {
  const Scalar p = 1.0 / (1.0 + std::pow(10.0, (1000.0 - rating) / 400.0));
  return wins_challenger * std::log(p) + wins_anchor * std::log(1.0 - p);
}

}  // namespace

TEST_CASE("parse_judge_verdict handles the documented formats") {
  auto v = parse_judge_verdict("blah analysis...\nFinal answer:\n1 2 2 3 2 1 1");
  CHECK(v[0] == Verdict::left);
  CHECK(v[1] == Verdict::right);
  CHECK(v[2] == Verdict::right);
  CHECK(v[3] == Verdict::tie);
  CHECK(v[4] == Verdict::right);
  CHECK(v[5] == Verdict::left);
  CHECK(v[6] == Verdict::left);

  auto ties = parse_judge_verdict("Final answer: 3 3 3 3 3 3 3");
  for (auto t : ties) CHECK(t == Verdict::tie);

  CHECK_THROWS_AS(parse_judge_verdict("Final answer: 1 2 3 1 2 3"), ContractError);
  CHECK_THROWS_AS(parse_judge_verdict("no answer line at all"), ContractError);
  // the raw text must ride along in the error
  CHECK_THROWS_WITH_AS(parse_judge_verdict("Final answer: 1 2"), doctest::Contains("Final answer: 1 2"),
                       ContractError);
}

TEST_CASE("verdict format/parse round-trips all 3^7 combinations") {
  const Verdict options[3] = {Verdict::left, Verdict::right, Verdict::tie};
  int count = 0;
  for (int code = 0; code < 2187; ++code) {
    int c = code;
    std::array<Verdict, kNumCriteria> v;
    for (int i = 0; i < kNumCriteria; ++i) {
      v[static_cast<std::size_t>(i)] = options[c % 3];
      c /= 3;
    }
    auto parsed = parse_judge_verdict(format_verdicts(v));
    if (parsed == v) ++count;
  }
  CHECK(count == 2187);
}

TEST_CASE("judge prompt substitution") {
  const std::string p = render_judge_prompt("a toy car");
  CHECK(p.find("\"a toy car\"") != std::string::npos);
  CHECK(p.find("<PROMPT>") == std::string::npos);
  CHECK(judge_prompt_template().find("<PROMPT>") != std::string::npos);
}

TEST_CASE("compute_elo: all ties pin everyone to the anchor rating") {
  std::vector<ComparisonRecord> records;
  for (int i = 0; i < 10; ++i) {
    records.push_back(rec("anchor", "b", all_of(Verdict::tie)));
    records.push_back(rec("b", "c", all_of(Verdict::tie)));
    records.push_back(rec("anchor", "c", all_of(Verdict::tie)));
  }
  auto table = compute_elo(records, "anchor");
  for (int c = 0; c < kNumCriteria; ++c)
    for (const auto& m : table.methods) CHECK(std::abs(table.rating(c, m) - 1000.0) < 0.5);
  CHECK(table.rating(0, "anchor") == 1000.0);
}

TEST_CASE("compute_elo: unanimous winner ranks above the anchor, matching a brute-force MLE") {
  std::vector<ComparisonRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(rec("winner", "anchor", all_of(Verdict::left)));
  auto table = compute_elo(records, "anchor");
  const Scalar fitted = table.rating(0, "winner");
  CHECK(fitted > 1000.0);

  // oracle: grid-search the two-player likelihood with the same pseudo-counts
  // (10.5 wins for the winner, 0.5 for the anchor)
  Scalar best_r = 0.0, best_ll = -1e18;
  for (Scalar r = 900.0; r <= 2500.0; r += 0.25) {
    const Scalar ll = pair_log_likelihood(r, 10.5, 0.5);
    if (ll > best_ll) {
      best_ll = ll;
      best_r = r;
    }
  }
  CHECK(std::abs(fitted - best_r) < 1.0);
}

TEST_CASE("compute_elo: left/right relabeling leaves ratings unchanged") {
  std::vector<ComparisonRecord> records, flipped;
  Rng rng(5);
  const std::vector<std::string> methods = {"a", "b", "c"};
  for (int i = 0; i < 30; ++i) {
    const auto l = methods[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    auto r = l;
    while (r == l) r = methods[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    std::array<Verdict, kNumCriteria> v;
    for (auto& x : v) {
      const auto roll = rng.uniform_int(0, 2);
      x = roll == 0 ? Verdict::left : roll == 1 ? Verdict::right : Verdict::tie;
    }
    records.push_back(rec(l, r, v));
    auto f = v;
    for (auto& x : f)
      x = x == Verdict::left ? Verdict::right : (x == Verdict::right ? Verdict::left : Verdict::tie);
    flipped.push_back(rec(r, l, f));
  }
  auto t1 = compute_elo(records, "a");
  auto t2 = compute_elo(flipped, "a");
  for (int c = 0; c < kNumCriteria; ++c)
    for (const auto& m : t1.methods) CHECK(t1.rating(c, m) == doctest::Approx(t2.rating(c, m)).epsilon(1e-9));
}

TEST_CASE("compute_elo: disconnected graph raises naming components") {
  std::vector<ComparisonRecord> records;
  records.push_back(rec("a", "b", all_of(Verdict::left)));
  records.push_back(rec("c", "d", all_of(Verdict::left)));
  CHECK_THROWS_WITH_AS(compute_elo(records, "a"), doctest::Contains("components"), ContractError);
}

TEST_CASE("style_alignment_metric anchors") {
  Rng rng(3);
  Image noise(3, 16, 16);
  noise.data = (rng.uniform_mat(3, 256, 0.0, 1.0));
  CHECK(style_alignment_metric(noise, noise) == doctest::Approx(1.0));

  Image red = Image::constant(3, 16, 16, 0.0);
  red.data.row(0).setConstant(1.0);
  Image blue = Image::constant(3, 16, 16, 0.0);
  blue.data.row(2).setConstant(1.0);
  // analytic: R and B histograms are opposite one-bin spikes -> EMD 1 each
  CHECK(style_alignment_metric(red, blue) <= 0.1);

  // permutation invariance
  Image perm = noise;
  std::vector<Eigen::Index> order(256);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(8);
  for (Eigen::Index i = 255; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
  for (Eigen::Index i = 0; i < 256; ++i)
    perm.data.col(i) = noise.data.col(order[static_cast<std::size_t>(i)]);
  Image target = Image::constant(3, 16, 16, 0.25);
  CHECK(style_alignment_metric(noise, target) ==
        doctest::Approx(style_alignment_metric(perm, target)).epsilon(1e-12));

  // empty foreground -> defined as 0 with warning
  Image mask = Image::constant(1, 16, 16, 0.0);
  bool warn = false;
  CHECK(style_alignment_metric(noise, target, &mask, &warn) == 0.0);
  CHECK(warn);
}

TEST_CASE("build_comparison_grid layout contracts") {
  Rng rng(9);
  auto mk_view = [&](Scalar v) {
    ViewPair vp;
    vp.rgb = Image::constant(3, 8, 8, v);
    vp.normal = Image::constant(3, 8, 8, 1.0 - v);
    return vp;
  };
  std::vector<ViewPair> a = {mk_view(0.1), mk_view(0.2), mk_view(0.3), mk_view(0.4)};
  std::vector<ViewPair> b = {mk_view(0.9), mk_view(0.8), mk_view(0.7), mk_view(0.6)};
  Image style = Image::constant(3, 8, 8, 0.5);

  Image grid = build_comparison_grid(a, b, style);
  CHECK(grid.h == 5 * 8);  // 4 views + style row
  CHECK(grid.w == 4 * 8);
  // cell (0,0) pixel-equals the first RGB view of A
  CHECK(grid.at(0, 0, 0) == doctest::Approx(0.1));
  CHECK(grid.at(0, 3, 5) == doctest::Approx(0.1));
  // column order: [RGB_A, normal_A, RGB_B, normal_B]
  CHECK(grid.at(0, 0, 8) == doctest::Approx(0.9));   // normal_A = 1-0.1
  CHECK(grid.at(0, 0, 16) == doctest::Approx(0.9));  // RGB_B
  CHECK(grid.at(0, 0, 24) == doctest::Approx(0.1));  // normal_B
  // style row repeated 4x
  for (int c = 0; c < 4; ++c) CHECK(grid.at(1, 4 * 8 + 2, c * 8 + 2) == doctest::Approx(0.5));

  // identical inputs -> left and right column pairs pixel-identical
  Image grid_same = build_comparison_grid(a, a, style);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x)
      CHECK(grid_same.at(0, y, x) == grid_same.at(0, y, x + 16));

  std::vector<ViewPair> three = {mk_view(0.1), mk_view(0.2), mk_view(0.3)};
  CHECK_THROWS_AS(build_comparison_grid(a, three, style), ContractError);
}

TEST_CASE("mock tournament: deterministic, criterion-6 Elo ranking matches the metric ranking") {
  // four methods whose views are flat colors at increasing distance from the style
  const int cell = 8;
  Image style = Image::constant(3, cell, cell, 0.0);
  style.data.row(0).setConstant(0.95);  // strongly red style

  auto method = [&](const std::string& id, Scalar redness) {
    MethodResults m;
    m.id = id;
    ViewPair vp;
    vp.rgb = Image::constant(3, cell, cell, 0.1);
    vp.rgb.data.row(0).setConstant(redness);
    vp.normal = Image::constant(3, cell, cell, 0.5);
    m.views_by_case["case0"] = {vp, vp, vp, vp};
    return m;
  };
  std::vector<MethodResults> methods = {method("anchor", 0.2), method("mid", 0.55),
                                        method("good", 0.8), method("best", 0.93)};
  std::vector<PromptCase> cases = {{"case0", "a red thing", style}};

  MockMetricJudge judge(4, cell);
  TournamentConfig cfg;
  cfg.pairs = 120;
  cfg.seed = 11;
  cfg.anchor = "anchor";

  auto report = run_tournament(methods, cases, judge, cfg);
  CHECK(report.records.size() == 120);  // 4 methods -> 6 unordered pairs, 20 each
  CHECK(report.skipped == 0);

  // per-pair pairing count: 20 each
  std::map<std::pair<std::string, std::string>, int> pair_counts;
  for (const auto& r : report.records) {
    auto key = std::minmax(r.left, r.right);
    pair_counts[{key.first, key.second}] += 1;
  }
  CHECK(pair_counts.size() == 6);
  for (const auto& [k, v] : pair_counts) CHECK(v == 20);

  // criterion-6 (index 5) ranking matches the known metric ordering
  const Scalar r_anchor = report.elo.rating(5, "anchor");
  const Scalar r_mid = report.elo.rating(5, "mid");
  const Scalar r_good = report.elo.rating(5, "good");
  const Scalar r_best = report.elo.rating(5, "best");
  CHECK(r_anchor < r_mid);
  CHECK(r_mid < r_good);
  CHECK(r_good < r_best);
  CHECK(report.elo.rating(5, "anchor") == 1000.0);

  // determinism: bit-identical report on rerun
  auto report2 = run_tournament(methods, cases, judge, cfg);
  CHECK(report.json.dump() == report2.json.dump());
  CHECK(report.markdown == report2.markdown);
}
