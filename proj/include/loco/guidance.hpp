#pragma once

// Layout guidance on cross-attention: the localized attention loss, the
// padding-token loss, their weighted sum, and the latent update loop that
// applies them during the first denoising steps.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "loco/backbone.hpp"
#include "loco/diffmath.hpp"
#include "loco/layout.hpp"

namespace loco {

inline constexpr double kDenomEps = 1e-8;
inline constexpr double kProbEps = 1e-7;

enum class ScheduleKind { linear, exponential };
enum class PtcTarget { foreground_map, union_mask };

std::string_view schedule_name(ScheduleKind kind);
ScheduleKind schedule_from_name(std::string_view name);

struct GuidanceConfig {
  double gamma = 30.0;
  double alpha = 0.2;
  double beta = 0.8;
  int guided_steps = 10;
  int iterations_per_step = 5;
  // Treat every max-norm denominator as a constant when differentiating.
  bool detach_norms = false;
  ScheduleKind schedule_kind = ScheduleKind::linear;
  // false gives the unnormalized localized loss (ablation arm).
  bool normalize_lac = true;
  PtcTarget ptc_target = PtcTarget::foreground_map;

  // Throws ContractError if an invariant fails.
  void validate(int total_steps) const;
  bool enabled() const { return guided_steps > 0; }
};

struct LossBreakdown {
  double lac = 0.0;
  double ptc = 0.0;
  double total = 0.0;
  std::vector<double> per_object_inbox_fraction;
};

// Per-object targets A_i * M_i, their elementwise max, and the box union.
struct TargetMaps {
  std::vector<std::vector<double>> objects;
  std::vector<double> foreground;
  Mask union_of_boxes;
};

// Mean of the span's token columns, as a q x 1 node.
Var object_attention(Tape& tape, Var attn, const Phrase& phrase);
std::vector<double> object_attention(const AttentionMaps& attn, const Phrase& phrase);

TargetMaps target_maps(const AttentionMaps& attn, const Layout& layout,
                       const std::vector<Mask>& masks);

struct LacOptions {
  bool normalize = true;
  bool detach_norms = false;
};

// [1 - sum_i sum(M_i * A_i / |A_i|inf) / sum_i sum(A_i / |A_i|inf)]^2
Var lac_loss(Tape& tape, Var attn, const Layout& layout, const std::vector<Mask>& masks,
             LacOptions opts = {});

// beta (1 - A_sot) / |1 - A_sot|inf + (1 - beta) A_eot / |A_eot|inf, as q x 1.
Var ptc_maps(Tape& tape, Var attn, double beta, bool detach_norms = false);

// Mean binary cross-entropy of sigmoid(a_pt) against a fixed target.
Var ptc_loss(Tape& tape, Var a_pt, const std::vector<double>& target);

struct LossGraph {
  Var lac;
  Var ptc;
  Var total;
  LossBreakdown breakdown;
};

LossGraph loco_loss(Tape& tape, Var attn, const Layout& layout, const std::vector<Mask>& masks,
                    const GuidanceConfig& cfg);
LossBreakdown loco_loss(const AttentionMaps& attn, const Layout& layout,
                        const GuidanceConfig& cfg);

// Step-size multiplier for guided step `step_index` (0-based).
double schedule(int step_index, const GuidanceConfig& cfg);

// z - gamma * lambda * grad. Timestep is left alone.
LatentState update_latent(const LatentState& z, const Matrix& grad, double gamma, double lambda);

struct LossGradient {
  LossBreakdown loss;
  Matrix grad;                           // d(total)/dz
  std::vector<std::size_t> max_branches;  // argmax of every max-norm on the tape
};

// One forward/backward pass of the combined loss at latent `z`.
LossGradient loss_and_gradient(const Matrix& z, const Backbone& backbone, const Layout& layout,
                               const std::vector<Mask>& masks, const GuidanceConfig& cfg);

struct IterationRecord {
  int step = 0;       // denoising step index, 0-based
  int iteration = 0;  // inner iteration within the step
  double lambda = 0.0;
  LossBreakdown loss;  // measured before the update
};

struct Trajectory {
  // states[s] is the latent at the start of step s, before any guidance
  // update; states.back() is the final latent at t = 0.
  std::vector<LatentState> states;
  // attention[s] is the attention used by denoise step s (after guidance);
  // attention.back() is the attention at the final latent.
  std::vector<AttentionMaps> attention;
  std::vector<IterationRecord> iterations;
  bool guidance_enabled = false;

  const AttentionMaps& final_attention() const { return attention.back(); }
  std::size_t latent_updates() const { return iterations.size(); }
};

Trajectory guided_sample(const Layout& layout, const GuidanceConfig& cfg,
                         const BackboneConfig& backbone_cfg, std::uint64_t rng_seed);

}  // namespace loco
