#include "loco/guidance.hpp"

#include <algorithm>
#include <cmath>

namespace loco {

std::string_view schedule_name(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "exponential";
}

ScheduleKind schedule_from_name(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "exponential") return ScheduleKind::exponential;
  throw ContractError("unknown schedule kind: " + std::string(name));
}

void GuidanceConfig::validate(int total_steps) const {
  if (!(gamma > 0.0)) throw ContractError("gamma must be > 0");
  if (!(alpha >= 0.0)) throw ContractError("alpha must be >= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must lie in [0, 1]");
  if (guided_steps < 0 || guided_steps > total_steps)
    throw ContractError("guided_steps must lie in [0, " + std::to_string(total_steps) + "]");
  if (iterations_per_step < 1) throw ContractError("iterations_per_step must be >= 1");
}

namespace {

Var masked_constant(Tape& tape, const Mask& m) {
  Matrix v(m.cells.size(), 1);
  for (std::size_t i = 0; i < m.cells.size(); ++i) v[i] = m.cells[i] ? 1.0 : 0.0;
  return tape.constant(std::move(v));
}

// x / max(|x|inf, eps), optionally with the norm held constant.
Var normalize_by_max(Tape& tape, Var x, bool detach_norm) {
  Var norm = tape.max_norm(x);
  if (detach_norm) norm = tape.detach(norm);
  Var guarded = tape.maximum(norm, tape.constant(Matrix::scalar(kDenomEps)));
  return tape.div(x, guarded);
}

void check_span(const Phrase& phrase, std::size_t tokens) {
  if (phrase.span.empty()) throw ContractError("phrase \"" + phrase.text + "\" has an empty span");
  for (std::size_t j : phrase.span) {
    if (j == 0 || j + 1 >= tokens) {
      throw ContractError("phrase \"" + phrase.text + "\": token index " + std::to_string(j) +
                          " outside the content range of " + std::to_string(tokens) +
                          " tokens");
    }
  }
}

std::vector<double> inbox_fractions(const AttentionMaps& attn, const Layout& layout,
                                    const std::vector<Mask>& masks) {
  std::vector<double> out;
  out.reserve(layout.k());
  for (std::size_t i = 0; i < layout.k(); ++i) {
    const auto a = object_attention(attn, layout.objects[i].phrase);
    double in = 0.0;
    double all = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
      all += a[p];
      if (masks[i].cells[p]) in += a[p];
    }
    out.push_back(in / std::max(all, kDenomEps));
  }
  return out;
}

}  // namespace

Var object_attention(Tape& tape, Var attn, const Phrase& phrase) {
  check_span(phrase, tape.value(attn).cols());
  Var acc = tape.column(attn, phrase.span.front());
  if (phrase.span.size() == 1) return acc;
  for (std::size_t s = 1; s < phrase.span.size(); ++s)
    acc = tape.add(acc, tape.column(attn, phrase.span[s]));
  return tape.scale(acc, 1.0 / double(phrase.span.size()));
}

std::vector<double> object_attention(const AttentionMaps& attn, const Phrase& phrase) {
  check_span(phrase, attn.tokens());
  std::vector<double> out(attn.pixels(), 0.0);
  for (std::size_t j : phrase.span)
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += attn.a(p, j);
  if (phrase.span.size() > 1)
    for (double& v : out) v /= double(phrase.span.size());
  return out;
}

TargetMaps target_maps(const AttentionMaps& attn, const Layout& layout,
                       const std::vector<Mask>& masks) {
  if (masks.size() != layout.k()) throw ContractError("target_maps: one mask per object required");
  TargetMaps t;
  t.foreground.assign(attn.pixels(), 0.0);
  for (std::size_t i = 0; i < layout.k(); ++i) {
    auto a = object_attention(attn, layout.objects[i].phrase);
    if (masks[i].cells.size() != a.size()) throw ShapeError("target_maps: mask resolution mismatch");
    for (std::size_t p = 0; p < a.size(); ++p) {
      if (!masks[i].cells[p]) a[p] = 0.0;
      t.foreground[p] = std::max(t.foreground[p], a[p]);
    }
    t.objects.push_back(std::move(a));
  }
  t.union_of_boxes = union_mask(masks);
  return t;
}

Var lac_loss(Tape& tape, Var attn, const Layout& layout, const std::vector<Mask>& masks,
             LacOptions opts) {
  if (layout.k() == 0) throw ContractError("lac_loss: layout has no objects");
  if (masks.size() != layout.k()) throw ContractError("lac_loss: one mask per object required");
  const Var eps = tape.constant(Matrix::scalar(kDenomEps));

  Var inside{};
  Var total{};
  for (std::size_t i = 0; i < layout.k(); ++i) {
    if (masks[i].cells.size() != tape.value(attn).rows())
      throw ShapeError("lac_loss: mask resolution does not match attention");
    Var a = object_attention(tape, attn, layout.objects[i].phrase);
    Var n = opts.normalize ? normalize_by_max(tape, a, opts.detach_norms) : a;
    Var in_i = tape.sum(tape.mul(n, masked_constant(tape, masks[i])));
    Var all_i = tape.sum(n);
    inside = i == 0 ? in_i : tape.add(inside, in_i);
    total = i == 0 ? all_i : tape.add(total, all_i);
  }
  Var ratio = tape.div(inside, tape.maximum(total, eps));
  return tape.square(tape.add_scalar(tape.scale(ratio, -1.0), 1.0));
}

Var ptc_maps(Tape& tape, Var attn, double beta, bool detach_norms) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("ptc_maps: beta outside [0, 1]");
  const std::size_t n = tape.value(attn).cols();
  if (n < 2) throw ShapeError("ptc_maps: need at least the two padding tokens");

  auto sot_term = [&] {
    Var sot = tape.column(attn, 0);
    Var inv = tape.add_scalar(tape.scale(sot, -1.0), 1.0);
    return normalize_by_max(tape, inv, detach_norms);
  };
  auto eot_term = [&] { return normalize_by_max(tape, tape.column(attn, n - 1), detach_norms); };

  // Endpoints touch a single padding map.
  if (beta == 1.0) return sot_term();
  if (beta == 0.0) return eot_term();
  return tape.add(tape.scale(sot_term(), beta), tape.scale(eot_term(), 1.0 - beta));
}

Var ptc_loss(Tape& tape, Var a_pt, const std::vector<double>& target) {
  const Matrix& x = tape.value(a_pt);
  if (x.size() != target.size()) throw ShapeError("ptc_loss: target size mismatch");
  Matrix y(target.size(), 1);
  Matrix one_minus_y(target.size(), 1);
  for (std::size_t i = 0; i < target.size(); ++i) {
    y[i] = target[i];
    one_minus_y[i] = 1.0 - target[i];
  }
  Var p = tape.clamp(tape.sigmoid(a_pt), kProbEps, 1.0 - kProbEps);
  Var log_p = tape.log(p);
  Var log_q = tape.log(tape.add_scalar(tape.scale(p, -1.0), 1.0));
  Var ll = tape.add(tape.mul(log_p, tape.constant(std::move(y))),
                    tape.mul(log_q, tape.constant(std::move(one_minus_y))));
  return tape.scale(tape.sum(ll), -1.0 / double(target.size()));
}

LossGraph loco_loss(Tape& tape, Var attn, const Layout& layout, const std::vector<Mask>& masks,
                    const GuidanceConfig& cfg) {
  const std::size_t res = masks.empty() ? 0 : masks.front().resolution;
  const AttentionMaps values{tape.value(attn), res};

  LossGraph g;
  g.lac = lac_loss(tape, attn, layout, masks, {cfg.normalize_lac, cfg.detach_norms});

  const TargetMaps targets = target_maps(values, layout, masks);
  std::vector<double> target = targets.foreground;
  if (cfg.ptc_target == PtcTarget::union_mask) {
    for (std::size_t p = 0; p < target.size(); ++p)
      target[p] = targets.union_of_boxes.cells[p] ? 1.0 : 0.0;
  }
  g.ptc = ptc_loss(tape, ptc_maps(tape, attn, cfg.beta, cfg.detach_norms), target);
  g.total = tape.add(g.lac, tape.scale(g.ptc, cfg.alpha));

  g.breakdown.lac = tape.value(g.lac).item();
  g.breakdown.ptc = tape.value(g.ptc).item();
  g.breakdown.total = tape.value(g.total).item();
  g.breakdown.per_object_inbox_fraction = inbox_fractions(values, layout, masks);
  return g;
}

LossBreakdown loco_loss(const AttentionMaps& attn, const Layout& layout,
                        const GuidanceConfig& cfg) {
  Tape tape;
  Var a = tape.constant(attn.a);
  return loco_loss(tape, a, layout, layout_masks(layout, attn.resolution), cfg).breakdown;
}

double schedule(int step_index, const GuidanceConfig& cfg) {
  if (step_index < 0 || step_index >= cfg.guided_steps) {
    throw ContractError("schedule: step " + std::to_string(step_index) + " outside [0, " +
                        std::to_string(cfg.guided_steps) + ")");
  }
  if (cfg.schedule_kind == ScheduleKind::exponential) return std::pow(0.5, step_index);
  return double(cfg.guided_steps - step_index) / double(cfg.guided_steps);
}

LatentState update_latent(const LatentState& z, const Matrix& grad, double gamma, double lambda) {
  if (!grad.same_shape(z.z)) throw ShapeError("update_latent: gradient shape differs from latent");
  LatentState out = z;
  const double step = gamma * lambda;
  for (std::size_t k = 0; k < out.z.size(); ++k) out.z[k] -= step * grad[k];
  return out;
}

LossGradient loss_and_gradient(const Matrix& z, const Backbone& backbone, const Layout& layout,
                               const std::vector<Mask>& masks, const GuidanceConfig& cfg) {
  Tape tape;
  Var zv = tape.variable(z);
  Var attn = cross_attention(tape, zv, backbone.tokens, backbone.proj);
  LossGraph g = loco_loss(tape, attn, layout, masks, cfg);
  LossGradient out;
  out.grad = tape.backward(g.total).of(zv);
  out.loss = std::move(g.breakdown);
  out.max_branches = tape.max_norm_argmaxes();
  return out;
}

Trajectory guided_sample(const Layout& layout, const GuidanceConfig& cfg,
                         const BackboneConfig& backbone_cfg, std::uint64_t rng_seed) {
  cfg.validate(backbone_cfg.total_steps);
  const Backbone bb(backbone_cfg, layout.prompt);
  const auto masks = layout_masks(layout, backbone_cfg.resolution);
  const std::size_t res = backbone_cfg.resolution;

  Trajectory traj;
  traj.guidance_enabled = cfg.enabled();
  traj.states.reserve(backbone_cfg.total_steps + 1);
  traj.attention.reserve(backbone_cfg.total_steps + 1);

  LatentState state = initial_latent(backbone_cfg, rng_seed);
  for (int s = 0; s < backbone_cfg.total_steps; ++s) {
    traj.states.push_back(state);
    if (s < cfg.guided_steps) {
      const double lambda = schedule(s, cfg);
      for (int it = 0; it < cfg.iterations_per_step; ++it) {
        LossGradient lg = loss_and_gradient(state.z, bb, layout, masks, cfg);
        traj.iterations.push_back({s, it, lambda, std::move(lg.loss)});
        state = update_latent(state, lg.grad, cfg.gamma, lambda);
      }
    }
    AttentionMaps attn = cross_attention(state, bb.tokens, bb.proj, res);
    const double sigma = noise_level(backbone_cfg, state.t);
    LatentState next = denoise_step(state, attn, bb.tokens, bb.proj, backbone_cfg.rho, sigma);
    traj.attention.push_back(std::move(attn));
    state = std::move(next);
  }
  traj.states.push_back(state);
  traj.attention.push_back(cross_attention(state, bb.tokens, bb.proj, res));
  return traj;
}

}  // namespace loco
