#pragma once

// Scoring of attention layouts: attention is decoded into a label map, each
// object's largest connected region stands in for a detection, and the
// detections are compared against the requested boxes.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loco/backbone.hpp"
#include "loco/guidance.hpp"
#include "loco/layout.hpp"

namespace loco {

inline constexpr double kDefaultLabelThreshold = 0.3;
inline constexpr double kIouThreshold = 0.5;

// Row-major object labels; 0 is background, i + 1 is layout object i.
struct LabelMap {
  std::size_t resolution = 16;
  std::vector<int> labels;

  int at(std::size_t r, std::size_t c) const { return labels[r * resolution + c]; }
  bool operator==(const LabelMap&) const = default;
};

struct Detection {
  std::size_t object = 0;  // 0-based layout object index
  BoundingBox box;
  std::size_t area = 0;
  double cx = 0.0;
  double cy = 0.0;
};

// Per cell, the object with the largest max-normalized attention, or
// background when that value is below `threshold`.
LabelMap decode_labels(const AttentionMaps& attn, const Layout& layout,
                       double threshold = kDefaultLabelThreshold);

// Largest 4-connected component per object, in object order.
std::vector<Detection> detect_regions(const LabelMap& labels);

double iou(const BoundingBox& a, const BoundingBox& b);

// Centroid comparison; false when either object is undetected.
bool relation_holds(const Relation& rel, const std::vector<Detection>& dets);

struct ObjectMetrics {
  bool detected = false;
  double iou = 0.0;
  double inbox_mass = 0.0;
  bool correct = false;
};

struct LayoutMetrics {
  std::vector<ObjectMetrics> objects;
  bool all_correct = false;
  std::optional<double> relation_accuracy;
  double mean_iou = 0.0;
  double mean_inbox_mass = 0.0;
  // Mean over ordered pairs (a, b), a != b, of a's attention summed over b's box.
  double cross_box_mass = 0.0;
};

LayoutMetrics layout_metrics(const std::vector<Detection>& dets, const Layout& layout,
                             const AttentionMaps& attn);

// Object a's attention summed over the cells of object b's mask.
double cross_box_mass(const AttentionMaps& attn, const Layout& layout, std::size_t a,
                      std::size_t b);

// ---------------------------------------------------------------------------
// Benchmark harness

struct BenchArm {
  std::string name;
  GuidanceConfig guidance;
};

// none / lac_no_norm / lac / lac_ptc, derived from `base`.
std::vector<BenchArm> ablation_arms(const GuidanceConfig& base);

struct BenchOptions {
  std::vector<std::string> suite;  // layout file paths
  std::vector<std::uint64_t> seeds;
  GuidanceConfig guidance;
  BackboneConfig backbone;
  double label_threshold = kDefaultLabelThreshold;
  bool run_ablation = true;
  std::vector<double> gamma_sweep;  // empty: no sweep
  unsigned jobs = 1;
};

struct BenchRecord {
  std::string layout;  // file stem
  std::uint64_t seed = 0;
  std::string arm;     // ablation arm name, or "gamma_sweep"
  double gamma = 0.0;
  LayoutMetrics metrics;
  std::vector<double> lac_curve;    // per guided iteration
  std::vector<double> total_curve;  // per guided iteration
  bool adjacent = false;            // layout has touching boxes
  // Attention rows stayed normalized and L_LAC stayed in [0, 1] throughout.
  bool invariants_held = true;
};

struct BenchAggregate {
  std::string arm;
  double gamma = 0.0;
  std::size_t runs = 0;
  double accuracy = 0.0;  // percent of runs with all objects correct
  double mean_iou = 0.0;
  double mean_inbox_mass = 0.0;
  double mean_cross_box_mass = 0.0;
  std::optional<double> relation_accuracy;  // percent, over runs with relations
};

struct BenchReport {
  std::vector<BenchRecord> records;
  std::vector<BenchAggregate> arms;
  std::vector<BenchAggregate> gamma_sweep;
  GuidanceConfig guidance;
  BackboneConfig backbone;
  std::vector<std::uint64_t> seeds;
  double label_threshold = kDefaultLabelThreshold;
};

// Aggregate of the records matching (arm, gamma); gamma < 0 matches any.
BenchAggregate aggregate(const std::vector<BenchRecord>& records, const std::string& arm,
                         double gamma = -1.0);

// Runs one layout under one guidance config and scores the final attention.
BenchRecord run_layout(const Layout& layout, const std::string& name, std::uint64_t seed,
                       const std::string& arm, const GuidanceConfig& guidance,
                       const BackboneConfig& backbone, double label_threshold);

// Throws ParseError naming the first file that fails to parse, before any
// run starts.
BenchReport run_benchmark(const BenchOptions& opts);

nlohmann::json to_json(const BenchReport& report);
nlohmann::json to_json(const GuidanceConfig& cfg);
nlohmann::json to_json(const BackboneConfig& cfg);
nlohmann::json to_json(const LayoutMetrics& m);

// True if any two boxes in the layout share an edge or overlap.
bool has_adjacent_boxes(const Layout& layout, std::size_t resolution = 16);

}  // namespace loco
