#include "loco/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "loco/errors.hpp"

#ifndef LOCO_SUITE_DIR
#define LOCO_SUITE_DIR "data/suite"
#endif

namespace loco::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

template <typename T>
T field_as(const json& doc, const std::string& key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(key, e.what());
  }
}

double number_field(const json& doc, const std::string& key) {
  if (!doc.at(key).is_number()) throw ParseError(key, "expected a number");
  return field_as<double>(doc, key);
}

int int_field(const json& doc, const std::string& key) {
  if (!doc.at(key).is_number_integer()) throw ParseError(key, "expected an integer");
  return field_as<int>(doc, key);
}

bool bool_field(const json& doc, const std::string& key) {
  if (!doc.at(key).is_boolean()) throw ParseError(key, "expected true or false");
  return field_as<bool>(doc, key);
}

std::string string_field(const json& doc, const std::string& key) {
  if (!doc.at(key).is_string()) throw ParseError(key, "expected a string");
  return field_as<std::string>(doc, key);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

GuidanceConfig apply_guidance_json(const json& doc, GuidanceConfig base) {
  if (!doc.is_object()) throw ParseError("config", "expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (key == "gamma") {
      base.gamma = number_field(doc, key);
    } else if (key == "alpha") {
      base.alpha = number_field(doc, key);
    } else if (key == "beta") {
      base.beta = number_field(doc, key);
    } else if (key == "guided_steps") {
      base.guided_steps = int_field(doc, key);
    } else if (key == "iterations_per_step") {
      base.iterations_per_step = int_field(doc, key);
    } else if (key == "detach_norms") {
      base.detach_norms = bool_field(doc, key);
    } else if (key == "normalize_lac") {
      base.normalize_lac = bool_field(doc, key);
    } else if (key == "schedule_kind") {
      try {
        base.schedule_kind = schedule_from_name(string_field(doc, key));
      } catch (const ContractError& e) {
        throw ParseError(key, e.what());
      }
    } else if (key == "ptc_target") {
      const std::string v = string_field(doc, key);
      if (v == "foreground_map") {
        base.ptc_target = PtcTarget::foreground_map;
      } else if (v == "union_mask") {
        base.ptc_target = PtcTarget::union_mask;
      } else {
        throw ParseError(key, "expected \"foreground_map\" or \"union_mask\"");
      }
    } else {
      throw ParseError(key, "unknown configuration field");
    }
  }
  return base;
}

GuidanceConfig load_guidance_config(const std::string& path, GuidanceConfig base) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, "cannot open config file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path, e.what());
  }
  try {
    return apply_guidance_json(doc, base);
  } catch (const ParseError& e) {
    const std::string msg = std::string(e.what()).substr(e.field().size() + 2);
    throw ParseError(path + ": " + e.field(), msg);
  }
}

std::uint64_t default_seed(std::uint64_t fallback) {
  const char* env = std::getenv("LOCO_SEED");
  if (!env || !*env) return fallback;
  const std::string text(env);
  if (text.find_first_not_of("0123456789") != std::string::npos)
    throw ParseError("LOCO_SEED", "expected a non-negative integer, got \"" + text + "\"");
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ParseError("LOCO_SEED", "value out of range");
  }
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ParseError("list", "not a number: \"" + item + "\"");
    }
    if (used != item.size()) throw ParseError("list", "not a number: \"" + item + "\"");
    out.push_back(v);
  }
  if (out.empty()) throw ParseError("list", "empty list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ParseError("seeds", "not a seed: \"" + item + "\"");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ParseError("seeds", "empty list");
  return out;
}

// ---------------------------------------------------------------------------
// generate

std::string to_pgm(const std::vector<double>& values, std::size_t resolution) {
  if (values.size() != resolution * resolution)
    throw ShapeError("to_pgm: expected " + std::to_string(resolution * resolution) + " values");
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  std::string out = "P2\n" + std::to_string(resolution) + " " + std::to_string(resolution) +
                    "\n255\n";
  for (std::size_t r = 0; r < resolution; ++r) {
    for (std::size_t c = 0; c < resolution; ++c) {
      const double v = values[r * resolution + c];
      const long level = hi > 0.0 ? std::lround(255.0 * std::max(v, 0.0) / hi) : 0;
      if (c > 0) out += ' ';
      out += std::to_string(level);
    }
    out += '\n';
  }
  return out;
}

namespace {

void write_file(const fs::path& path, const std::string& content, std::vector<std::string>& log) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
  if (!f) throw std::runtime_error("write failed: " + path.string());
  log.push_back(path.string());
}

json detections_json(const std::vector<Detection>& dets) {
  json out = json::array();
  for (const auto& d : dets) {
    out.push_back({{"object", d.object},
                   {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
                   {"area", d.area},
                   {"centroid", {d.cx, d.cy}}});
  }
  return out;
}

json loss_json(const LossBreakdown& b) {
  return {{"lac", b.lac},
          {"ptc", b.ptc},
          {"total", b.total},
          {"per_object_inbox_fraction", b.per_object_inbox_fraction}};
}

}  // namespace

GenerateResult generate(const RunConfig& cfg) {
  const Layout layout = load_layout(cfg.layout_path);
  cfg.guidance.validate(cfg.backbone.total_steps);
  const Trajectory traj = guided_sample(layout, cfg.guidance, cfg.backbone, cfg.seed);
  const AttentionMaps& attn = traj.final_attention();
  const std::size_t res = attn.resolution;

  const LabelMap labels = decode_labels(attn, layout, cfg.label_threshold);
  const auto dets = detect_regions(labels);

  GenerateResult result;
  result.guidance_enabled = traj.guidance_enabled;
  result.metrics = layout_metrics(dets, layout, attn);

  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  std::string csv = "step,iteration,lambda,lac,ptc,total\n";
  for (const auto& it : traj.iterations) {
    csv += std::to_string(it.step) + "," + std::to_string(it.iteration) + "," +
           format_double(it.lambda) + "," + format_double(it.loss.lac) + "," +
           format_double(it.loss.ptc) + "," + format_double(it.loss.total) + "\n";
  }
  write_file(dir / "loss.csv", csv, result.files);

  std::string grid;
  for (std::size_t r = 0; r < res; ++r) {
    for (std::size_t c = 0; c < res; ++c) {
      if (c > 0) grid += ' ';
      grid += std::to_string(labels.at(r, c));
    }
    grid += '\n';
  }
  write_file(dir / "labels.txt", grid, result.files);

  write_file(dir / "heatmap_sot.pgm", to_pgm(attn.token_map(0), res), result.files);
  for (std::size_t i = 0; i < layout.k(); ++i) {
    write_file(dir / ("heatmap_object_" + std::to_string(i + 1) + ".pgm"),
               to_pgm(object_attention(attn, layout.objects[i].phrase), res), result.files);
  }
  write_file(dir / "heatmap_eot.pgm", to_pgm(attn.token_map(attn.tokens() - 1), res),
             result.files);

  json objects = json::array();
  for (const auto& o : layout.objects)
    objects.push_back({{"phrase", o.phrase.text}, {"span", o.phrase.span}});
  json summary = {{"layout", cfg.layout_path},
                  {"prompt", layout.prompt},
                  {"objects", objects},
                  {"seed", cfg.seed},
                  {"guidance_enabled", traj.guidance_enabled},
                  {"latent_updates", traj.latent_updates()},
                  {"guidance", to_json(cfg.guidance)},
                  {"backbone", to_json(cfg.backbone)},
                  {"label_threshold", cfg.label_threshold},
                  {"final_loss", loss_json(loco_loss(attn, layout, cfg.guidance))},
                  {"metrics", to_json(result.metrics)},
                  {"detections", detections_json(dets)}};
  write_file(dir / "summary.json", summary.dump(2) + "\n", result.files);
  return result;
}

// ---------------------------------------------------------------------------
// gradcheck

double relative_error(double analytic, double numeric, double scale) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-3 * std::abs(scale), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

namespace {

const std::vector<std::string>& gradcheck_words() {
  static const std::vector<std::string> words = {
      "cat", "dog", "apple", "kite", "boat", "tree", "lamp", "chair", "horse", "cup", "bird"};
  return words;
}

struct Instance {
  Layout layout;
  BackboneConfig backbone;
  std::uint64_t latent_seed = 0;
};

Instance make_instance(std::mt19937_64& gen, const GradcheckOptions& opts) {
  std::uniform_int_distribution<std::size_t> token_count(opts.min_tokens, opts.max_tokens);
  const std::size_t n = token_count(gen);
  if (n < 3) throw ContractError("gradcheck: need at least one content token");
  const std::size_t words = n - 2;

  auto pool = gradcheck_words();
  std::shuffle(pool.begin(), pool.end(), gen);
  Instance inst;
  for (std::size_t w = 0; w < words; ++w) {
    if (w > 0) inst.layout.prompt += ' ';
    inst.layout.prompt += pool[w % pool.size()];
  }

  std::uniform_int_distribution<std::size_t> object_count(1, std::min<std::size_t>(words, 3));
  const std::size_t k = object_count(gen);
  std::uniform_real_distribution<double> corner(0.0, 0.6);
  std::uniform_real_distribution<double> extent(0.25, 0.4);
  for (std::size_t i = 0; i < k; ++i) {
    LayoutObject obj;
    obj.phrase.text = pool[i % pool.size()];
    obj.phrase.span = {i + 1};
    obj.box.x0 = corner(gen);
    obj.box.y0 = corner(gen);
    obj.box.x1 = obj.box.x0 + extent(gen);
    obj.box.y1 = obj.box.y0 + extent(gen);
    inst.layout.objects.push_back(obj);
  }
  inst.backbone.resolution = opts.resolution;
  inst.backbone.latent_scale = 1.0;
  inst.latent_seed = gen();
  return inst;
}

// The combined loss evaluated directly in doubles, independent of the tape.
// The padding-token target is fixed, and when `frozen` is given the max-norm
// denominators are taken from it instead of being recomputed, which is the
// function the detached-norm gradient describes.
struct ReferenceLoss {
  double value = 0.0;
  std::vector<double> norms;          // objects, then 1 - SoT, then EoT
  std::vector<std::size_t> argmaxes;  // same order
};

ReferenceLoss reference_loss(const Matrix& z, const Backbone& bb, const Layout& layout,
                             const std::vector<Mask>& masks, const GuidanceConfig& cfg,
                             const std::vector<double>& target,
                             const std::vector<double>* frozen) {
  LatentState st;
  st.z = z;
  const AttentionMaps attn = cross_attention(st, bb.tokens, bb.proj, masks.front().resolution);
  const std::size_t q = attn.pixels();
  ReferenceLoss out;
  auto track = [&](const std::vector<double>& v) {
    const auto it = std::max_element(v.begin(), v.end());
    out.argmaxes.push_back(std::size_t(it - v.begin()));
    out.norms.push_back(*it);
    const double live = *it;
    const double used = frozen ? (*frozen)[out.norms.size() - 1] : live;
    return std::max(used, kDenomEps);
  };

  double inside = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < layout.k(); ++i) {
    const auto a = object_attention(attn, layout.objects[i].phrase);
    const double d = cfg.normalize_lac ? track(a) : 1.0;
    for (std::size_t p = 0; p < q; ++p) {
      total += a[p] / d;
      if (masks[i].cells[p]) inside += a[p] / d;
    }
  }
  const double gap = 1.0 - inside / std::max(total, kDenomEps);

  std::vector<double> inv(q);
  std::vector<double> eot(q);
  for (std::size_t p = 0; p < q; ++p) {
    inv[p] = 1.0 - attn.a(p, 0);
    eot[p] = attn.a(p, attn.tokens() - 1);
  }
  const double d_inv = track(inv);
  const double d_eot = track(eot);
  double bce = 0.0;
  for (std::size_t p = 0; p < q; ++p) {
    const double x = cfg.beta * inv[p] / d_inv + (1.0 - cfg.beta) * eot[p] / d_eot;
    const double prob = std::clamp(1.0 / (1.0 + std::exp(-x)), kProbEps, 1.0 - kProbEps);
    bce -= target[p] * std::log(prob) + (1.0 - target[p]) * std::log(1.0 - prob);
  }
  out.value = gap * gap + cfg.alpha * bce / double(q);
  return out;
}

}  // namespace

GradcheckReport gradcheck(const GradcheckOptions& opts) {
  if (opts.instances < 1) throw ContractError("gradcheck: need at least one instance");
  if (opts.resolution == 0 || opts.resolution > 16)
    throw ContractError("gradcheck: resolution must lie in [1, 16]");
  if (opts.min_tokens < 3 || opts.min_tokens > opts.max_tokens)
    throw ContractError("gradcheck: token range must satisfy 3 <= min <= max");
  if (opts.detach_modes.empty()) throw ContractError("gradcheck: no detach mode selected");

  GradcheckReport rep;
  std::mt19937_64 gen(opts.seed);
  for (int idx = 0; idx < opts.instances; ++idx) {
    const Instance inst = make_instance(gen, opts);
    const Backbone bb(inst.backbone, inst.layout.prompt);
    const auto masks = layout_masks(inst.layout, opts.resolution);
    const Matrix z0 = initial_latent(inst.backbone, inst.latent_seed).z;

    for (bool detach : opts.detach_modes) {
      GuidanceConfig cfg;
      cfg.detach_norms = detach;
      LossGradient lg = loss_and_gradient(z0, bb, inst.layout, masks, cfg);
      Matrix analytic = lg.grad;
      if (opts.corrupt_gradient) {
        std::size_t worst = 0;
        for (std::size_t k = 1; k < analytic.size(); ++k)
          if (std::abs(analytic[k]) > std::abs(analytic[worst])) worst = k;
        analytic[worst] += 1e-2 * std::abs(analytic[worst]) + 1e-6;
      }

      LatentState base;
      base.z = z0;
      const AttentionMaps attn0 = cross_attention(base, bb.tokens, bb.proj, opts.resolution);
      const std::vector<double> target = target_maps(attn0, inst.layout, masks).foreground;
      const ReferenceLoss ref0 =
          reference_loss(z0, bb, inst.layout, masks, cfg, target, nullptr);
      const std::vector<double>* frozen = detach ? &ref0.norms : nullptr;

      Matrix numeric(z0.rows(), z0.cols());
      std::vector<char> usable(z0.size(), 1);
      double scale = 0.0;
      Matrix z = z0;
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double saved = z[k];
        z[k] = saved + opts.step;
        const ReferenceLoss plus = reference_loss(z, bb, inst.layout, masks, cfg, target, frozen);
        z[k] = saved - opts.step;
        const ReferenceLoss minus = reference_loss(z, bb, inst.layout, masks, cfg, target, frozen);
        z[k] = saved;
        numeric[k] = (plus.value - minus.value) / (2.0 * opts.step);
        if (plus.argmaxes != ref0.argmaxes || minus.argmaxes != ref0.argmaxes) usable[k] = 0;
        scale = std::max(scale, std::abs(numeric[k]));
      }

      for (std::size_t k = 0; k < z.size(); ++k) {
        if (!usable[k]) {
          ++rep.skipped;
          continue;
        }
        ++rep.compared;
        const double e = relative_error(analytic[k], numeric[k], scale);
        if (e > rep.max_rel_error || rep.worst_instance < 0) {
          rep.max_rel_error = std::max(rep.max_rel_error, e);
          rep.worst_instance = idx;
          rep.worst_detach = detach;
          rep.worst_row = k / z.cols();
          rep.worst_col = k % z.cols();
          rep.worst_analytic = analytic[k];
          rep.worst_numeric = numeric[k];
        }
      }
      ++rep.instances;
    }
  }
  rep.passed = rep.compared > 0 && rep.max_rel_error <= opts.tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Command dispatch

namespace {

struct GuidanceFlags {
  std::string config_path;
  std::optional<double> gamma;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<int> guided_steps;
  std::optional<int> iters;
  bool detach_norms = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON file with GuidanceConfig fields");
    app.add_option("--gamma", gamma, "loss scale");
    app.add_option("--alpha", alpha, "weight of the padding-token loss");
    app.add_option("--beta", beta, "[SoT] / [EoT] mixing weight");
    app.add_option("--guided-steps", guided_steps, "number of guided denoising steps");
    app.add_option("--iters", iters, "latent updates per guided step");
    app.add_flag("--detach-norms", detach_norms, "hold max-norm denominators constant");
  }

  GuidanceConfig resolve() const {
    GuidanceConfig cfg;
    if (!config_path.empty()) cfg = load_guidance_config(config_path, cfg);
    if (gamma) cfg.gamma = *gamma;
    if (alpha) cfg.alpha = *alpha;
    if (beta) cfg.beta = *beta;
    if (guided_steps) cfg.guided_steps = *guided_steps;
    if (iters) cfg.iterations_per_step = *iters;
    if (detach_norms) cfg.detach_norms = true;
    return cfg;
  }
};

std::vector<std::string> suite_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ContractError("suite directory not found: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ContractError("suite directory has no layout files: " + dir);
  return files;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_aggregates(std::ostream& out, const BenchReport& report) {
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %6s %7s %7s %7s %7s %7s\n", "arm", "runs", "acc%",
                "IoU", "in-box", "cross", "rel%");
  out << line;
  auto row = [&](const std::string& label, const BenchAggregate& a) {
    const std::string rel = a.relation_accuracy ? fixed(*a.relation_accuracy, 2) : "-";
    std::snprintf(line, sizeof line, "%-14s %6zu %7.2f %7.4f %7.4f %7.4f %7s\n", label.c_str(),
                  a.runs, a.accuracy, a.mean_iou, a.mean_inbox_mass, a.mean_cross_box_mass,
                  rel.c_str());
    out << line;
  };
  for (const auto& a : report.arms) row(a.arm, a);
  for (const auto& a : report.gamma_sweep) row("gamma=" + fixed(a.gamma, 0), a);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Training-free layout guidance on a toy cross-attention denoiser", "loco"};
  app.require_subcommand(1);

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "run one guided generation and write artifacts");
  GuidanceFlags gen_flags;
  gen_flags.attach(*gen_cmd);
  std::string gen_layout;
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen_cmd->add_option("--layout", gen_layout, "layout JSON file")->required();
  gen_cmd->add_option("--out", gen_out, "output directory")->required();
  gen_cmd->add_option("--seed", gen_seed, "latent seed (default: LOCO_SEED or 1)");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "run the ablation benchmark over a suite");
  GuidanceFlags bench_flags;
  bench_flags.attach(*bench_cmd);
  std::string suite_dir = LOCO_SUITE_DIR;
  std::string bench_out = ".";
  std::string seeds_text;
  std::optional<std::uint64_t> bench_seed;
  int seed_count = 5;
  std::string sweep_text;
  unsigned jobs = 1;
  bench_cmd->add_option("--suite", suite_dir, "directory of layout JSON files");
  bench_cmd->add_option("--out", bench_out, "directory for report.json");
  bench_cmd->add_option("--seeds", seeds_text, "comma-separated seed list");
  bench_cmd->add_option("--seed", bench_seed, "first seed (default: LOCO_SEED or 1)");
  bench_cmd->add_option("--seed-count", seed_count, "number of consecutive seeds")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--gamma-sweep", sweep_text, "comma-separated gamma values");
  bench_cmd->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  GradcheckOptions gopts;
  std::optional<std::uint64_t> grad_seed;
  std::string mode = "both";
  grad_cmd->add_option("--seed", grad_seed, "instance seed (default: LOCO_SEED or 7)");
  grad_cmd->add_option("--instances", gopts.instances, "number of random instances")
      ->check(CLI::PositiveNumber);
  grad_cmd->add_option("--size", gopts.resolution, "latent grid side")->check(CLI::Range(1, 16));
  grad_cmd->add_option("--min-tokens", gopts.min_tokens, "fewest tokens incl. padding");
  grad_cmd->add_option("--max-tokens", gopts.max_tokens, "most tokens incl. padding");
  grad_cmd->add_option("--mode", mode, "detach_norms modes: both, on, off")
      ->check(CLI::IsMember({"both", "on", "off"}));
  grad_cmd->add_flag("--corrupt-gradient", gopts.corrupt_gradient,
                     "perturb the analytic gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen_cmd) {
      RunConfig cfg;
      cfg.layout_path = gen_layout;
      cfg.out_dir = gen_out;
      cfg.guidance = gen_flags.resolve();
      cfg.seed = gen_seed ? *gen_seed : default_seed(1);
      const GenerateResult res = generate(cfg);
      for (const auto& f : res.files) out << f << "\n";
      out << "guidance " << (res.guidance_enabled ? "enabled" : "disabled") << ", mean IoU "
          << fixed(res.metrics.mean_iou, 4) << ", all correct "
          << (res.metrics.all_correct ? "yes" : "no") << "\n";
      return 0;
    }

    if (*bench_cmd) {
      BenchOptions opts;
      opts.suite = suite_files(suite_dir);
      opts.guidance = bench_flags.resolve();
      if (!seeds_text.empty()) {
        opts.seeds = parse_seed_list(seeds_text);
      } else {
        const std::uint64_t first = bench_seed ? *bench_seed : default_seed(1);
        for (int s = 0; s < seed_count; ++s) opts.seeds.push_back(first + std::uint64_t(s));
      }
      if (!sweep_text.empty()) opts.gamma_sweep = parse_double_list(sweep_text);
      opts.jobs = jobs;
      const BenchReport report = run_benchmark(opts);
      fs::create_directories(bench_out);
      const fs::path path = fs::path(bench_out) / "report.json";
      std::ofstream f(path, std::ios::binary);
      if (!f) throw std::runtime_error("cannot write " + path.string());
      f << to_json(report).dump(2) << "\n";
      if (!f) throw std::runtime_error("write failed: " + path.string());
      print_aggregates(out, report);
      out << "report: " << path.string() << "\n";
      return 0;
    }

    if (*grad_cmd) {
      gopts.seed = grad_seed ? *grad_seed : default_seed(7);
      if (mode == "on") gopts.detach_modes = {true};
      if (mode == "off") gopts.detach_modes = {false};
      const GradcheckReport rep = gradcheck(gopts);
      out << "checked " << rep.instances << " instance/mode pairs, " << rep.compared
          << " coordinates (" << rep.skipped << " skipped at max-norm ties)\n";
      out << "max relative error " << rep.max_rel_error << " (tolerance " << gopts.tolerance
          << ")\n";
      if (!rep.passed) {
        err << "gradcheck FAILED: worst coordinate instance " << rep.worst_instance
            << " detach_norms=" << (rep.worst_detach ? "on" : "off") << " z[" << rep.worst_row
            << "][" << rep.worst_col << "] analytic " << format_double(rep.worst_analytic)
            << " numeric " << format_double(rep.worst_numeric) << "\n";
        return 1;
      }
      out << "gradcheck passed\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace loco::cli
