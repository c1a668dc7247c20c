#pragma once

// Command-line front end: `generate`, `bench` and `gradcheck`, plus the
// configuration loading and artifact writers they share.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loco/backbone.hpp"
#include "loco/evaluate.hpp"
#include "loco/guidance.hpp"

namespace loco::cli {

// Fields named as in GuidanceConfig; absent fields keep their value in
// `base`. Unknown fields and wrong types throw ParseError.
GuidanceConfig apply_guidance_json(const nlohmann::json& doc, GuidanceConfig base = {});
GuidanceConfig load_guidance_config(const std::string& path, GuidanceConfig base = {});

// Seed from LOCO_SEED if set, otherwise `fallback`. A malformed value throws
// ParseError.
std::uint64_t default_seed(std::uint64_t fallback = 1);

// Comma-separated list, e.g. "1,5,30,300".
std::vector<double> parse_double_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

struct RunConfig {
  std::string layout_path;
  GuidanceConfig guidance;
  BackboneConfig backbone;
  std::uint64_t seed = 1;
  std::string out_dir;
  double label_threshold = kDefaultLabelThreshold;
};

// Plain "P2" graymap, value = round(255 * v / max(v)); all zeros if max is 0.
std::string to_pgm(const std::vector<double>& values, std::size_t resolution);

struct GenerateResult {
  std::vector<std::string> files;  // written paths, in write order
  bool guidance_enabled = false;
  LayoutMetrics metrics;
};

// Runs one guided generation and writes loss.csv, labels.txt, one heatmap
// per padding token and object, and summary.json into cfg.out_dir.
GenerateResult generate(const RunConfig& cfg);

struct GradcheckOptions {
  std::uint64_t seed = 7;
  int instances = 20;
  std::size_t resolution = 8;
  std::size_t min_tokens = 4;  // including [SoT] and [EoT]
  std::size_t max_tokens = 8;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::vector<bool> detach_modes = {false, true};
  // Negative control: perturb the analytic gradient before comparing.
  bool corrupt_gradient = false;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  int instances = 0;         // instance x detach-mode pairs checked
  std::size_t compared = 0;  // coordinates compared
  std::size_t skipped = 0;   // coordinates straddling a max-norm tie
  // Worst coordinate.
  int worst_instance = -1;
  bool worst_detach = false;
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

// |a - f| / max(|a|, |f|, 1e-3 * max|f|, 1e-12), maximized over coordinates.
double relative_error(double analytic, double numeric, double scale);

GradcheckReport gradcheck(const GradcheckOptions& opts);

// Parses argv and dispatches; returns the process exit status.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace loco::cli
