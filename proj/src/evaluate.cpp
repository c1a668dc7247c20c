#include "loco/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

namespace loco {

using nlohmann::json;

LabelMap decode_labels(const AttentionMaps& attn, const Layout& layout, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ContractError("decode_labels: threshold must lie in (0, 1)");
  LabelMap out{attn.resolution, std::vector<int>(attn.pixels(), 0)};

  std::vector<std::vector<double>> maps;
  maps.reserve(layout.k());
  for (const auto& obj : layout.objects) {
    auto m = object_attention(attn, obj.phrase);
    const double hi = std::max(max_norm(m), kDenomEps);
    for (double& v : m) v /= hi;
    maps.push_back(std::move(m));
  }
  for (std::size_t p = 0; p < out.labels.size(); ++p) {
    int best = -1;
    double best_v = -1.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      if (maps[i][p] > best_v) {
        best_v = maps[i][p];
        best = static_cast<int>(i);
      }
    }
    if (best >= 0 && best_v >= threshold) out.labels[p] = best + 1;
  }
  return out;
}

std::vector<Detection> detect_regions(const LabelMap& labels) {
  const std::size_t res = labels.resolution;
  const std::size_t q = res * res;
  if (labels.labels.size() != q) throw ShapeError("detect_regions: label map size mismatch");
  const int max_label =
      labels.labels.empty() ? 0 : *std::max_element(labels.labels.begin(), labels.labels.end());

  // Best component per label: cells of the largest one, first found wins ties.
  std::vector<std::vector<std::size_t>> best(static_cast<std::size_t>(std::max(max_label, 0)) + 1);
  std::vector<char> seen(q, 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < q; ++start) {
    const int lab = labels.labels[start];
    if (lab <= 0 || seen[start]) continue;
    std::vector<std::size_t> comp;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const std::size_t r = p / res;
      const std::size_t c = p % res;
      auto visit = [&](std::size_t rr, std::size_t cc) {
        const std::size_t n = rr * res + cc;
        if (!seen[n] && labels.labels[n] == lab) {
          seen[n] = 1;
          stack.push_back(n);
        }
      };
      if (r > 0) visit(r - 1, c);
      if (r + 1 < res) visit(r + 1, c);
      if (c > 0) visit(r, c - 1);
      if (c + 1 < res) visit(r, c + 1);
    }
    auto& slot = best[static_cast<std::size_t>(lab)];
    if (comp.size() > slot.size()) slot = std::move(comp);
  }

  std::vector<Detection> dets;
  for (std::size_t lab = 1; lab < best.size(); ++lab) {
    const auto& comp = best[lab];
    if (comp.empty()) continue;
    std::size_t r0 = res, r1 = 0, c0 = res, c1 = 0;
    double sr = 0.0, sc = 0.0;
    for (std::size_t p : comp) {
      const std::size_t r = p / res;
      const std::size_t c = p % res;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
      sr += double(r);
      sc += double(c);
    }
    const double n = double(comp.size());
    const double dres = double(res);
    Detection d;
    d.object = lab - 1;
    d.area = comp.size();
    d.box = {double(c0) / dres, double(r0) / dres, double(c1 + 1) / dres, double(r1 + 1) / dres};
    d.cx = (sc / n + 0.5) / dres;
    d.cy = (sr / n + 0.5) / dres;
    dets.push_back(d);
  }
  return dets;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  if (a == b) return 1.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace {

const Detection* find_detection(const std::vector<Detection>& dets, std::size_t object) {
  for (const auto& d : dets)
    if (d.object == object) return &d;
  return nullptr;
}

}  // namespace

bool relation_holds(const Relation& rel, const std::vector<Detection>& dets) {
  const Detection* a = find_detection(dets, rel.a);
  const Detection* b = find_detection(dets, rel.b);
  if (!a || !b) return false;
  switch (rel.kind) {
    case RelationKind::left: return a->cx < b->cx;
    case RelationKind::right: return a->cx > b->cx;
    case RelationKind::above: return a->cy < b->cy;
    case RelationKind::below: return a->cy > b->cy;
  }
  return false;
}

double cross_box_mass(const AttentionMaps& attn, const Layout& layout, std::size_t a,
                      std::size_t b) {
  const auto map = object_attention(attn, layout.objects.at(a).phrase);
  const Mask mb = rasterize_box(layout.objects.at(b).box, attn.resolution);
  double in = 0.0;
  for (std::size_t p = 0; p < map.size(); ++p)
    if (mb.cells[p]) in += map[p];
  return in;
}

LayoutMetrics layout_metrics(const std::vector<Detection>& dets, const Layout& layout,
                             const AttentionMaps& attn) {
  LayoutMetrics m;
  const auto masks = layout_masks(layout, attn.resolution);
  m.all_correct = layout.k() > 0;
  for (std::size_t i = 0; i < layout.k(); ++i) {
    ObjectMetrics om;
    const auto map = object_attention(attn, layout.objects[i].phrase);
    double in = 0.0;
    double all = 0.0;
    for (std::size_t p = 0; p < map.size(); ++p) {
      all += map[p];
      if (masks[i].cells[p]) in += map[p];
    }
    om.inbox_mass = in / std::max(all, kDenomEps);
    if (const Detection* d = find_detection(dets, i)) {
      om.detected = true;
      om.iou = iou(d->box, layout.objects[i].box);
    }
    om.correct = om.detected && om.iou >= kIouThreshold;
    m.all_correct = m.all_correct && om.correct;
    m.mean_iou += om.iou;
    m.mean_inbox_mass += om.inbox_mass;
    m.objects.push_back(om);
  }
  if (layout.k() > 0) {
    m.mean_iou /= double(layout.k());
    m.mean_inbox_mass /= double(layout.k());
  }
  if (!layout.relations.empty()) {
    std::size_t ok = 0;
    for (const auto& r : layout.relations) ok += relation_holds(r, dets) ? 1 : 0;
    m.relation_accuracy = double(ok) / double(layout.relations.size());
  }
  if (layout.k() > 1) {
    double acc = 0.0;
    for (std::size_t a = 0; a < layout.k(); ++a)
      for (std::size_t b = 0; b < layout.k(); ++b)
        if (a != b) acc += cross_box_mass(attn, layout, a, b);
    m.cross_box_mass = acc / double(layout.k() * (layout.k() - 1));
  }
  return m;
}

bool has_adjacent_boxes(const Layout& layout, std::size_t resolution) {
  const auto masks = layout_masks(layout, resolution);
  const std::size_t res = resolution;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    for (std::size_t j = i + 1; j < masks.size(); ++j) {
      for (std::size_t r = 0; r < res; ++r) {
        for (std::size_t c = 0; c < res; ++c) {
          if (!masks[i].at(r, c)) continue;
          if (masks[j].at(r, c)) return true;
          if ((r > 0 && masks[j].at(r - 1, c)) || (r + 1 < res && masks[j].at(r + 1, c)) ||
              (c > 0 && masks[j].at(r, c - 1)) || (c + 1 < res && masks[j].at(r, c + 1)))
            return true;
        }
      }
    }
  }
  return false;
}

// ---------------------------------------------------------------------------

std::vector<BenchArm> ablation_arms(const GuidanceConfig& base) {
  GuidanceConfig none = base;
  none.guided_steps = 0;
  GuidanceConfig lac_raw = base;
  lac_raw.alpha = 0.0;
  lac_raw.normalize_lac = false;
  GuidanceConfig lac = base;
  lac.alpha = 0.0;
  GuidanceConfig full = base;
  full.normalize_lac = true;
  return {{"none", none}, {"lac_no_norm", lac_raw}, {"lac", lac}, {"lac_ptc", full}};
}

BenchRecord run_layout(const Layout& layout, const std::string& name, std::uint64_t seed,
                       const std::string& arm, const GuidanceConfig& guidance,
                       const BackboneConfig& backbone, double label_threshold) {
  const Trajectory traj = guided_sample(layout, guidance, backbone, seed);
  const AttentionMaps& final_attn = traj.final_attention();

  BenchRecord rec;
  rec.layout = name;
  rec.seed = seed;
  rec.arm = arm;
  rec.gamma = guidance.gamma;
  rec.adjacent = has_adjacent_boxes(layout, backbone.resolution);
  const auto dets = detect_regions(decode_labels(final_attn, layout, label_threshold));
  rec.metrics = layout_metrics(dets, layout, final_attn);
  for (const auto& it : traj.iterations) {
    rec.lac_curve.push_back(it.loss.lac);
    rec.total_curve.push_back(it.loss.total);
    if (!(it.loss.lac >= 0.0 && it.loss.lac <= 1.0)) rec.invariants_held = false;
  }
  for (const auto& attn : traj.attention) {
    for (std::size_t r = 0; r < attn.a.rows(); ++r) {
      double s = 0.0;
      for (double v : attn.a.row(r)) s += v;
      if (std::abs(s - 1.0) > 1e-12) rec.invariants_held = false;
    }
  }
  return rec;
}

BenchAggregate aggregate(const std::vector<BenchRecord>& records, const std::string& arm,
                         double gamma) {
  BenchAggregate agg;
  agg.arm = arm;
  agg.gamma = gamma;
  std::size_t correct = 0;
  std::size_t rel_runs = 0;
  double rel_sum = 0.0;
  for (const auto& r : records) {
    if (r.arm != arm) continue;
    if (gamma >= 0.0 && r.gamma != gamma) continue;
    ++agg.runs;
    if (r.metrics.all_correct) ++correct;
    agg.mean_iou += r.metrics.mean_iou;
    agg.mean_inbox_mass += r.metrics.mean_inbox_mass;
    agg.mean_cross_box_mass += r.metrics.cross_box_mass;
    if (r.metrics.relation_accuracy) {
      ++rel_runs;
      rel_sum += *r.metrics.relation_accuracy;
    }
  }
  if (agg.runs > 0) {
    const double n = double(agg.runs);
    agg.accuracy = 100.0 * double(correct) / n;
    agg.mean_iou /= n;
    agg.mean_inbox_mass /= n;
    agg.mean_cross_box_mass /= n;
  }
  if (rel_runs > 0) agg.relation_accuracy = 100.0 * rel_sum / double(rel_runs);
  return agg;
}

BenchReport run_benchmark(const BenchOptions& opts) {
  if (opts.suite.empty()) throw ContractError("run_benchmark: empty suite");
  if (opts.seeds.empty()) throw ContractError("run_benchmark: no seeds");

  struct Named {
    std::string name;
    Layout layout;
  };
  std::vector<Named> layouts;
  for (const auto& path : opts.suite)
    layouts.push_back({std::filesystem::path(path).stem().string(), load_layout(path)});

  struct Job {
    const Named* layout;
    std::uint64_t seed;
    std::string arm;
    GuidanceConfig cfg;
  };
  std::vector<Job> jobs;
  const auto arms = opts.run_ablation ? ablation_arms(opts.guidance) : std::vector<BenchArm>{};
  for (const auto& arm : arms)
    for (const auto& l : layouts)
      for (auto seed : opts.seeds) jobs.push_back({&l, seed, arm.name, arm.guidance});
  for (double g : opts.gamma_sweep) {
    GuidanceConfig cfg = opts.guidance;
    cfg.gamma = g;
    for (const auto& l : layouts)
      for (auto seed : opts.seeds) jobs.push_back({&l, seed, "gamma_sweep", cfg});
  }
  for (const auto& j : jobs) j.cfg.validate(opts.backbone.total_steps);

  BenchReport report;
  report.records.resize(jobs.size());
  auto run = [&](std::size_t i) {
    const Job& j = jobs[i];
    report.records[i] = run_layout(j.layout->layout, j.layout->name, j.seed, j.arm, j.cfg,
                                   opts.backbone, opts.label_threshold);
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.jobs, unsigned(jobs.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run(i);
      });
    }
  }

  for (const auto& arm : arms) report.arms.push_back(aggregate(report.records, arm.name));
  for (double g : opts.gamma_sweep)
    report.gamma_sweep.push_back(aggregate(report.records, "gamma_sweep", g));
  report.guidance = opts.guidance;
  report.backbone = opts.backbone;
  report.seeds = opts.seeds;
  report.label_threshold = opts.label_threshold;
  return report;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const GuidanceConfig& cfg) {
  return {{"gamma", cfg.gamma},
          {"alpha", cfg.alpha},
          {"beta", cfg.beta},
          {"guided_steps", cfg.guided_steps},
          {"iterations_per_step", cfg.iterations_per_step},
          {"detach_norms", cfg.detach_norms},
          {"schedule_kind", schedule_name(cfg.schedule_kind)},
          {"normalize_lac", cfg.normalize_lac},
          {"ptc_target", cfg.ptc_target == PtcTarget::foreground_map ? "foreground_map"
                                                                     : "union_mask"}};
}

json to_json(const BackboneConfig& cfg) {
  return {{"resolution", cfg.resolution}, {"embed_dim", cfg.embed_dim},
          {"head_dim", cfg.head_dim},     {"latent_dim", cfg.latent_dim},
          {"total_steps", cfg.total_steps}, {"rho", cfg.rho},
          {"sigma0", cfg.sigma0},         {"latent_scale", cfg.latent_scale},
          {"query_gain", cfg.query_gain},
          {"query_jitter", cfg.query_jitter}, {"vocab_seed", cfg.vocab_seed},
          {"proj_seed", cfg.proj_seed}};
}

json to_json(const LayoutMetrics& m) {
  json objs = json::array();
  for (const auto& o : m.objects) {
    objs.push_back({{"detected", o.detected},
                    {"iou", o.iou},
                    {"inbox_mass", o.inbox_mass},
                    {"correct", o.correct}});
  }
  json j = {{"objects", objs},
            {"all_correct", m.all_correct},
            {"mean_iou", m.mean_iou},
            {"mean_inbox_mass", m.mean_inbox_mass},
            {"cross_box_mass", m.cross_box_mass}};
  j["relation_accuracy"] = m.relation_accuracy ? json(*m.relation_accuracy) : json(nullptr);
  return j;
}

namespace {

json to_json(const BenchAggregate& a) {
  json j = {{"arm", a.arm},
            {"runs", a.runs},
            {"accuracy", a.accuracy},
            {"mean_iou", a.mean_iou},
            {"mean_inbox_mass", a.mean_inbox_mass},
            {"mean_cross_box_mass", a.mean_cross_box_mass}};
  if (a.gamma >= 0.0) j["gamma"] = a.gamma;
  j["relation_accuracy"] = a.relation_accuracy ? json(*a.relation_accuracy) : json(nullptr);
  return j;
}

}  // namespace

json to_json(const BenchReport& report) {
  json records = json::array();
  for (const auto& r : report.records) {
    records.push_back({{"layout", r.layout},
                       {"seed", r.seed},
                       {"arm", r.arm},
                       {"gamma", r.gamma},
                       {"adjacent", r.adjacent},
                       {"invariants_held", r.invariants_held},
                       {"metrics", to_json(r.metrics)},
                       {"lac_curve", r.lac_curve},
                       {"total_curve", r.total_curve}});
  }
  json arms = json::array();
  for (const auto& a : report.arms) arms.push_back(to_json(a));
  json sweep = json::array();
  for (const auto& a : report.gamma_sweep) sweep.push_back(to_json(a));
  return {{"config", {{"guidance", to_json(report.guidance)},
                      {"backbone", to_json(report.backbone)},
                      {"label_threshold", report.label_threshold}}},
          {"seeds", report.seeds},
          {"arms", arms},
          {"gamma_sweep", sweep},
          {"records", records}};
}

}  // namespace loco
