#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "loco/evaluate.hpp"

using loco::AttentionMaps;
using loco::BoundingBox;
using loco::LabelMap;
using loco::Layout;
using loco::Matrix;

namespace {

Layout token_layout(const std::vector<BoundingBox>& boxes) {
  Layout l;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (i > 0) l.prompt += ' ';
    l.prompt += "w" + std::to_string(i);
    loco::LayoutObject o;
    o.box = boxes[i];
    o.phrase = {"w" + std::to_string(i), {i + 1}};
    l.objects.push_back(o);
  }
  return l;
}

LabelMap blank(std::size_t res = 16) { return LabelMap{res, std::vector<int>(res * res, 0)}; }

void paint(LabelMap& m, std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1, int lab) {
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) m.labels[r * m.resolution + c] = lab;
}

// Attention where object i puts weight w_i(p) on its token and the rest on SoT.
AttentionMaps synth(const std::vector<std::vector<double>>& objs) {
  const std::size_t n = objs.size() + 2;
  Matrix a(256, n, 0.0);
  for (std::size_t p = 0; p < 256; ++p) {
    double used = 0.0;
    for (std::size_t i = 0; i < objs.size(); ++i) {
      a(p, i + 1) = objs[i][p];
      used += objs[i][p];
    }
    a(p, n - 1) = 0.01;
    a(p, 0) = 1.0 - used - 0.01;
  }
  return {a, 16};
}

std::vector<double> block(std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1,
                          double in, double out) {
  std::vector<double> v(256, out);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) v[r * 16 + c] = in;
  return v;
}

}  // namespace

TEST_CASE("decode_labels") {
  const Layout one = token_layout({{0, 0, 0.5, 0.5}});
  const auto attn = synth({block(0, 0, 8, 8, 0.6, 0.0)});
  const LabelMap m = loco::decode_labels(attn, one, 0.5);
  const auto mask = loco::rasterize_box(one.objects[0].box);
  for (std::size_t p = 0; p < 256; ++p) CHECK(m.labels[p] == (mask.cells[p] ? 1 : 0));

  // A map with no attention at all leaves every cell as background.
  const auto flat = synth({block(0, 0, 8, 8, 0.0, 0.0)});
  const LabelMap bg = loco::decode_labels(flat, one, 0.99);
  CHECK(std::all_of(bg.labels.begin(), bg.labels.end(), [](int v) { return v == 0; }));

  CHECK_THROWS_AS(loco::decode_labels(attn, one, 0.0), loco::ContractError);
  CHECK_THROWS_AS(loco::decode_labels(attn, one, 1.0), loco::ContractError);
}

TEST_CASE("decode_labels agrees with a brute-force argmax") {
  const Layout two = token_layout({{0, 0, 0.5, 1}, {0.5, 0, 1, 1}});
  std::mt19937_64 gen(6);
  std::uniform_real_distribution<double> u(0.0, 0.45);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(256), b(256);
    for (std::size_t p = 0; p < 256; ++p) {
      a[p] = u(gen);
      b[p] = u(gen);
    }
    const auto attn = synth({a, b});
    const double ha = *std::max_element(a.begin(), a.end());
    const double hb = *std::max_element(b.begin(), b.end());
    const LabelMap m = loco::decode_labels(attn, two, 0.3);
    for (std::size_t p = 0; p < 256; ++p) {
      const double na = a[p] / ha, nb = b[p] / hb;
      const double best = std::max(na, nb);
      const int expect = best < 0.3 ? 0 : (na >= nb ? 1 : 2);
      CHECK(m.labels[p] == expect);
    }
  }
}

TEST_CASE("decode_labels threshold endpoints") {
  const Layout two = token_layout({{0, 0, 0.5, 1}, {0.5, 0, 1, 1}});
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.01, 0.45);
  std::vector<double> a(256), b(256);
  for (std::size_t p = 0; p < 256; ++p) {
    a[p] = u(gen);
    b[p] = u(gen);
  }
  const auto attn = synth({a, b});
  // Near 1, only each map's own maximum can survive.
  const auto high = loco::decode_labels(attn, two, 1.0 - 1e-12);
  std::size_t fg = 0;
  for (int v : high.labels) fg += v != 0 ? 1 : 0;
  CHECK(fg <= 2);
  const auto ia = std::size_t(std::max_element(a.begin(), a.end()) - a.begin());
  CHECK(high.labels[ia] != 0);
  // Near 0, every cell with positive attention is labeled.
  const auto low = loco::decode_labels(attn, two, 1e-9);
  for (int v : low.labels) CHECK(v != 0);
}

TEST_CASE("detect_regions") {
  LabelMap m = blank();
  paint(m, 0, 0, 8, 8, 1);
  const auto dets = loco::detect_regions(m);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].object == 0);
  CHECK(dets[0].area == 64);
  CHECK(dets[0].box == BoundingBox{0, 0, 0.5, 0.5});
  CHECK(dets[0].cx == doctest::Approx(0.25));
  CHECK(dets[0].cy == doctest::Approx(0.25));

  CHECK(loco::detect_regions(blank()).empty());

  // Two components of sizes 5 and 3: the larger one is reported.
  LabelMap two = blank();
  paint(two, 0, 0, 1, 5, 1);
  paint(two, 10, 10, 13, 11, 1);
  const auto d2 = loco::detect_regions(two);
  REQUIRE(d2.size() == 1);
  CHECK(d2[0].area == 5);
  CHECK(d2[0].box == BoundingBox{0, 0, 5.0 / 16, 1.0 / 16});

  // Diagonal neighbours are separate components.
  LabelMap diag = blank();
  diag.labels[0] = 2;
  diag.labels[17] = 2;
  const auto d3 = loco::detect_regions(diag);
  REQUIRE(d3.size() == 1);
  CHECK(d3[0].object == 1);
  CHECK(d3[0].area == 1);

  LabelMap wrong{16, std::vector<int>(10, 0)};
  CHECK_THROWS_AS(loco::detect_regions(wrong), loco::ShapeError);
}

TEST_CASE("detections contain their centroids") {
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<int> lab(0, 3);
  for (int trial = 0; trial < 30; ++trial) {
    LabelMap m = blank();
    for (int& v : m.labels) v = lab(gen) == 0 ? 1 : lab(gen);
    for (const auto& d : loco::detect_regions(m)) {
      CHECK(d.area >= 1);
      CHECK(d.cx >= d.box.x0);
      CHECK(d.cx <= d.box.x1);
      CHECK(d.cy >= d.box.y0);
      CHECK(d.cy <= d.box.y1);
    }
  }
}

TEST_CASE("iou") {
  const BoundingBox a{0, 0, 0.5, 1};
  CHECK(loco::iou(a, a) == 1.0);
  CHECK(loco::iou(a, {0.5, 0, 1, 1}) == 0.0);
  CHECK(loco::iou(a, {0.25, 0, 0.75, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto box = [&] {
      double x0 = u(gen), x1 = u(gen), y0 = u(gen), y1 = u(gen);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      return BoundingBox{x0, y0, x1 + 1e-6, y1 + 1e-6};
    };
    const BoundingBox p = box(), q = box();
    const double v = loco::iou(p, q);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == loco::iou(q, p));
    if (!(p == q)) CHECK(v < 1.0);
  }
}

TEST_CASE("relations are checked on centroids") {
  LabelMap m = blank();
  paint(m, 4, 0, 8, 4, 1);
  paint(m, 10, 10, 14, 14, 2);
  const auto dets = loco::detect_regions(m);
  using K = loco::RelationKind;
  CHECK(loco::relation_holds({0, 1, K::left}, dets));
  CHECK(loco::relation_holds({1, 0, K::right}, dets));
  CHECK(loco::relation_holds({0, 1, K::above}, dets));
  CHECK(loco::relation_holds({1, 0, K::below}, dets));
  CHECK_FALSE(loco::relation_holds({0, 1, K::right}, dets));
  CHECK_FALSE(loco::relation_holds({0, 2, K::left}, dets));
  for (K k : {K::left, K::right, K::above, K::below}) {
    const K mirror = k == K::left ? K::right : k == K::right ? K::left : k == K::above ? K::below : K::above;
    CHECK(loco::relation_holds({0, 1, k}, dets) == loco::relation_holds({1, 0, mirror}, dets));
  }
}

TEST_CASE("layout metrics") {
  Layout l = token_layout({{0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}});
  l.relations.push_back({0, 1, loco::RelationKind::left});
  l.relations.push_back({0, 1, loco::RelationKind::below});
  const auto attn = synth({block(0, 0, 8, 8, 0.8, 0.0), block(8, 8, 16, 16, 0.6, 0.0)});
  const auto dets = loco::detect_regions(loco::decode_labels(attn, l));
  const auto m = loco::layout_metrics(dets, l, attn);
  REQUIRE(m.objects.size() == 2);
  CHECK(m.objects[0].iou == 1.0);
  CHECK(m.objects[1].iou == 1.0);
  CHECK(m.objects[0].inbox_mass == doctest::Approx(1.0));
  CHECK(m.all_correct);
  CHECK(*m.relation_accuracy == doctest::Approx(0.5));
  CHECK(m.cross_box_mass == 0.0);

  // Missing object: incorrect.
  const auto partial = loco::layout_metrics({dets[0]}, l, attn);
  CHECK_FALSE(partial.all_correct);
  CHECK_FALSE(partial.objects[1].detected);

  Layout no_rel = l;
  no_rel.relations.clear();
  CHECK_FALSE(loco::layout_metrics(dets, no_rel, attn).relation_accuracy.has_value());
}

TEST_CASE("cross-box mass sums a's attention over b's box") {
  const Layout l = token_layout({{0, 0, 0.5, 1}, {0.5, 0, 1, 1}});
  const auto attn = synth({block(0, 0, 16, 16, 0.3, 0.3), block(0, 8, 16, 16, 0.2, 0.0)});
  CHECK(loco::cross_box_mass(attn, l, 0, 1) == doctest::Approx(0.3 * 128));
  CHECK(loco::cross_box_mass(attn, l, 1, 0) == 0.0);
  CHECK(loco::layout_metrics({}, l, attn).cross_box_mass == doctest::Approx(0.3 * 128 / 2));
}

TEST_CASE("adjacency") {
  CHECK(loco::has_adjacent_boxes(token_layout({{0, 0, 0.5, 1}, {0.5, 0, 1, 1}})));
  CHECK(loco::has_adjacent_boxes(token_layout({{0, 0, 0.6, 1}, {0.4, 0, 1, 1}})));
  CHECK_FALSE(loco::has_adjacent_boxes(token_layout({{0, 0, 0.25, 1}, {0.5, 0, 1, 1}})));
}

TEST_CASE("benchmark on a small suite") {
  const auto dir = std::filesystem::temp_directory_path() / "loco_bench_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = (dir / "pair.json").string();
  std::ofstream(path) << R"({"prompt": "a cat and a dog",
    "objects": [{"phrase": "cat", "box": [0, 0.2, 0.45, 0.8]},
                {"phrase": "dog", "box": [0.55, 0.2, 1, 0.8]}],
    "relations": [{"a": 0, "b": 1, "kind": "left"}]})";

  loco::BenchOptions opts;
  opts.suite = {path};
  opts.seeds = {1};
  const auto report = loco::run_benchmark(opts);
  REQUIRE(report.arms.size() == 4);
  CHECK(report.arms[0].arm == "none");
  CHECK(report.arms[3].arm == "lac_ptc");
  CHECK(report.records.size() == 4);
  for (const auto& r : report.records) {
    CHECK(r.invariants_held);
    CHECK(r.layout == "pair");
  }
  // Aggregates recompute from records.
  for (const auto& a : report.arms) {
    const auto again = loco::aggregate(report.records, a.arm);
    CHECK(again.accuracy == a.accuracy);
    CHECK(again.mean_iou == a.mean_iou);
    CHECK(again.runs == 1);
  }
  const auto j = loco::to_json(report);
  CHECK(j["arms"].size() == 4);
  CHECK(j["records"][0].contains("lac_curve"));
  CHECK(j["config"]["guidance"]["gamma"] == 30.0);

  // Guidance off vs on are deterministic.
  const auto again = loco::run_benchmark(opts);
  CHECK(loco::to_json(again) == j);

  // Sweep and parallel runs.
  opts.gamma_sweep = {1, 30};
  opts.jobs = 3;
  const auto swept = loco::run_benchmark(opts);
  CHECK(swept.gamma_sweep.size() == 2);
  CHECK(swept.records.size() == 6);
  CHECK(loco::to_json(swept)["records"][0] == j["records"][0]);

  // A malformed file aborts before any run, naming the file.
  const auto bad = (dir / "bad.json").string();
  std::ofstream(bad) << R"({"prompt": "a cat", "objects": [{"phrase": "cat", "box": [1, 0, 0, 1]}]})";
  opts.suite = {path, bad};
  try {
    loco::run_benchmark(opts);
    FAIL("expected a parse error");
  } catch (const loco::ParseError& e) {
    CHECK(e.field().find("bad.json") != std::string::npos);
  }
  opts.suite.clear();
  CHECK_THROWS_AS(loco::run_benchmark(opts), loco::ContractError);
}
