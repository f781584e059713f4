#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssdlab/image.hpp"
#include "ssdlab/rng.hpp"
#include "ssdlab/scene.hpp"

namespace ssdlab {

// ---------------------------------------------------------------------------
// criteria and verdicts

inline constexpr int kNumCriteria = 7;  // six aspects + overall

/// Canonical criteria order (matches the judge instructions 1..7).
const std::array<std::string, kNumCriteria>& criteria_names();
/// Column labels used by the report table.
const std::array<std::string, kNumCriteria>& criteria_labels();

enum class Verdict { left, right, tie };

struct ComparisonRecord {
  std::string left, right;
  std::string prompt_id;
  std::array<Verdict, kNumCriteria> verdicts;
};

/// Parses the "Final answer: x x x x x x x" line (1=left, 2=right, 3=tie).
/// Missing line or wrong arity raises a ContractError carrying the raw text.
std::array<Verdict, kNumCriteria> parse_judge_verdict(const std::string& response);

/// Inverse of parse_judge_verdict (used by mocks and round-trip tests).
std::string format_verdicts(const std::array<Verdict, kNumCriteria>& verdicts);

/// The verbatim judge prompt template; "<PROMPT>" is substituted per pairing.
const std::string& judge_prompt_template();
std::string render_judge_prompt(const std::string& prompt_text);

// ---------------------------------------------------------------------------
// Elo

struct EloTable {
  std::vector<std::string> methods;
  std::string anchor;
  Mat ratings;  // kNumCriteria x methods
  std::map<std::string, int> comparison_count;

  Scalar rating(int criterion, const std::string& method) const;
};

/// Bradley-Terry maximum likelihood per criterion (Elo scale 400/log10),
/// ties as half-wins, 0.5 pseudo-win per ordered pair, anchor pinned to 1000.
/// A disconnected comparison graph raises, naming the components.
EloTable compute_elo(const std::vector<ComparisonRecord>& records, const std::string& anchor);

// ---------------------------------------------------------------------------
// direct metrics

/// 1 - max-over-channels normalized EMD between 8-bin-per-channel foreground
/// color histograms. mask (optional, 1 channel, >0.5 = foreground) selects the
/// render's foreground; the style image is histogrammed whole. Empty
/// foreground yields 0 (and sets *empty_warning when provided).
Scalar style_alignment_metric(const Image& render, const Image& style,
                              const Image* mask = nullptr, bool* empty_warning = nullptr);

/// Mean IoU of foreground silhouettes between adjacent turntable views
/// (higher = more view-consistent geometry). Empty-vs-empty pairs count 0.
Scalar silhouette_consistency(const RadianceGrid& grid, int n_views, int res,
                              Scalar elevation_deg = 15.0, Scalar radius = 2.7);

// ---------------------------------------------------------------------------
// comparison grids and tournaments

struct ViewPair {
  Image rgb, normal;
};

/// Rows: one per view with columns [RGB_A, normal_A, RGB_B, normal_B];
/// final row: the style image repeated four times. Cells share the views'
/// resolution; the style image is resized to fit.
Image build_comparison_grid(const std::vector<ViewPair>& views_a,
                            const std::vector<ViewPair>& views_b, const Image& style);

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  /// Returns the judge's raw text response for a composed grid.
  virtual std::string judge(const Image& grid, const std::string& prompt_text) const = 0;
};

/// Deterministic judge: slices the grid, scores both sides with
/// style_alignment_metric against the style row, answers criteria 6 and 7 by
/// the higher score and ties the rest. Content-based, so position-free.
class MockMetricJudge final : public JudgeClient {
 public:
  MockMetricJudge(int n_views, int cell) : n_views_(n_views), cell_(cell) {}
  std::string judge(const Image& grid, const std::string& prompt_text) const override;

 private:
  int n_views_, cell_;
};

struct JudgeEndpoint {
  std::string host;
  int port = 80;
  std::string path = "/judge";
  std::string api_key_env = "SSDLAB_JUDGE_API_KEY";
  int timeout_s = 30;
  std::string transcript_dir;  // persisted request/response JSON when set
};

/// External LLM judge over HTTP: posts {prompt, image: base64 PNG}, expects
/// {text}. Implemented in http_clients.cpp.
class HttpJudge final : public JudgeClient {
 public:
  explicit HttpJudge(JudgeEndpoint endpoint) : endpoint_(std::move(endpoint)) {}
  std::string judge(const Image& grid, const std::string& prompt_text) const override;

 private:
  JudgeEndpoint endpoint_;
};

struct PromptCase {
  std::string id;
  std::string text;
  Image style;
};

struct MethodResults {
  std::string id;
  std::map<std::string, std::vector<ViewPair>> views_by_case;
};

struct TournamentConfig {
  int pairs = 120;
  std::uint64_t seed = 0;
  int max_in_flight = 4;
  int retries = 1;
  std::string anchor;
};

struct TournamentReport {
  std::vector<ComparisonRecord> records;
  EloTable elo;
  int skipped = 0;
  nlohmann::json json;
  std::string markdown;
};

/// Round-robin pairing schedule with randomized left/right placement; builds
/// grids, queries the judge (bounded parallelism), parses verdicts, computes
/// Elo per criterion and emits the report. Judge failures retry, then the
/// pairing is recorded as skipped, never fabricated.
TournamentReport run_tournament(const std::vector<MethodResults>& methods,
                                const std::vector<PromptCase>& cases, const JudgeClient& judge,
                                const TournamentConfig& cfg);

}  // namespace ssdlab
