#include "loco/layout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "loco/backbone.hpp"

namespace loco {

using nlohmann::json;

bool BoundingBox::valid() const {
  auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  return in01(x0) && in01(y0) && in01(x1) && in01(y1) && x0 < x1 && y0 < y1;
}

std::string_view relation_name(RelationKind kind) {
  switch (kind) {
    case RelationKind::left: return "left";
    case RelationKind::right: return "right";
    case RelationKind::above: return "above";
    case RelationKind::below: return "below";
  }
  return "?";
}

namespace {

std::optional<RelationKind> relation_from_name(std::string_view s) {
  if (s == "left") return RelationKind::left;
  if (s == "right") return RelationKind::right;
  if (s == "above") return RelationKind::above;
  if (s == "below") return RelationKind::below;
  return std::nullopt;
}

BoundingBox parse_box(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 4) throw ParseError(field, "expected [x0, y0, x1, y1]");
  for (const auto& v : j)
    if (!v.is_number()) throw ParseError(field, "coordinates must be numbers");
  BoundingBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  for (double v : {b.x0, b.y0, b.x1, b.y1})
    if (!(v >= 0.0 && v <= 1.0)) throw ParseError(field, "coordinates must lie in [0, 1]");
  if (!(b.x0 < b.x1)) throw ParseError(field, "x1 must be greater than x0");
  if (!(b.y0 < b.y1)) throw ParseError(field, "y1 must be greater than y0");
  return b;
}

// First occurrence of `needle` in `prompt_words` starting at `from`, or npos.
std::size_t find_words(const std::vector<std::string>& prompt_words,
                       const std::vector<std::string>& needle, std::size_t from) {
  if (needle.empty() || needle.size() > prompt_words.size()) return std::string::npos;
  for (std::size_t i = from; i + needle.size() <= prompt_words.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), prompt_words.begin() + i)) return i;
  }
  return std::string::npos;
}

}  // namespace

Layout parse_layout(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("document", e.what());
  }
  if (!doc.is_object()) throw ParseError("document", "expected a JSON object");

  Layout layout;
  if (!doc.contains("prompt") || !doc["prompt"].is_string())
    throw ParseError("prompt", "missing or not a string");
  layout.prompt = doc["prompt"].get<std::string>();
  const auto words = tokenize(layout.prompt);
  if (words.empty()) throw ParseError("prompt", "prompt has no tokens");

  if (!doc.contains("objects") || !doc["objects"].is_array())
    throw ParseError("objects", "missing or not an array");
  const auto& objects = doc["objects"];
  if (objects.empty()) throw ParseError("objects", "at least one object is required");

  // Next search position per phrase text, so repeated phrases take
  // successive occurrences.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> cursor;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const std::string field = "objects[" + std::to_string(i) + "]";
    const auto& o = objects[i];
    if (!o.is_object()) throw ParseError(field, "expected an object");
    if (!o.contains("phrase") || !o["phrase"].is_string())
      throw ParseError(field + ".phrase", "missing or not a string");
    if (!o.contains("box")) throw ParseError(field + ".box", "missing");

    LayoutObject obj;
    obj.box = parse_box(o["box"], field + ".box");
    obj.phrase.text = o["phrase"].get<std::string>();
    const auto needle = tokenize(obj.phrase.text);
    if (needle.empty()) throw ParseError(field + ".phrase", "phrase has no tokens");

    auto it = std::find_if(cursor.begin(), cursor.end(),
                           [&](const auto& c) { return c.first == needle; });
    std::size_t from = it == cursor.end() ? 0 : it->second;
    std::size_t pos = find_words(words, needle, from);
    if (pos == std::string::npos && from > 0) pos = find_words(words, needle, 0);
    if (pos == std::string::npos)
      throw ParseError(field + ".phrase", "\"" + obj.phrase.text + "\" does not occur in prompt");
    if (it == cursor.end()) cursor.emplace_back(needle, pos + needle.size());
    else it->second = pos + needle.size();

    // +1 for the [SoT] token in front of the prompt words.
    for (std::size_t w = 0; w < needle.size(); ++w) obj.phrase.span.push_back(pos + w + 1);
    layout.objects.push_back(std::move(obj));
  }

  if (doc.contains("relations")) {
    const auto& rels = doc["relations"];
    if (!rels.is_array()) throw ParseError("relations", "expected an array");
    for (std::size_t i = 0; i < rels.size(); ++i) {
      const std::string field = "relations[" + std::to_string(i) + "]";
      const auto& r = rels[i];
      if (!r.is_object()) throw ParseError(field, "expected an object");
      Relation rel;
      for (const char* key : {"a", "b"}) {
        if (!r.contains(key) || !r[key].is_number_integer())
          throw ParseError(field + "." + key, "missing or not an integer");
        const auto idx = r[key].get<long long>();
        if (idx < 0 || static_cast<std::size_t>(idx) >= layout.objects.size())
          throw ParseError(field + "." + key, "object index out of range");
        (key[0] == 'a' ? rel.a : rel.b) = static_cast<std::size_t>(idx);
      }
      if (!r.contains("kind") || !r["kind"].is_string())
        throw ParseError(field + ".kind", "missing or not a string");
      auto kind = relation_from_name(r["kind"].get<std::string>());
      if (!kind) throw ParseError(field + ".kind", "expected left, right, above or below");
      rel.kind = *kind;
      layout.relations.push_back(rel);
    }
  }
  return layout;
}

Layout load_layout(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, "cannot open layout file");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_layout(ss.str());
  } catch (const ParseError& e) {
    const std::string msg = std::string(e.what()).substr(e.field().size() + 2);
    throw ParseError(path + ": " + e.field(), msg);
  }
}

std::string serialize_layout(const Layout& layout) {
  json doc;
  doc["prompt"] = layout.prompt;
  doc["objects"] = json::array();
  for (const auto& o : layout.objects) {
    doc["objects"].push_back(
        {{"phrase", o.phrase.text}, {"box", {o.box.x0, o.box.y0, o.box.x1, o.box.y1}}});
  }
  if (!layout.relations.empty()) {
    doc["relations"] = json::array();
    for (const auto& r : layout.relations)
      doc["relations"].push_back({{"a", r.a}, {"b", r.b}, {"kind", relation_name(r.kind)}});
  }
  return doc.dump(2);
}

std::size_t Mask::popcount() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1));
}

namespace {

bool center_inside(const BoundingBox& box, std::size_t r, std::size_t c, std::size_t res) {
  const double cx = (double(c) + 0.5) / double(res);
  const double cy = (double(r) + 0.5) / double(res);
  return cx >= box.x0 && cx < box.x1 && cy >= box.y0 && cy < box.y1;
}

}  // namespace

bool rasterize_is_degenerate(const BoundingBox& box, std::size_t resolution) {
  for (std::size_t r = 0; r < resolution; ++r)
    for (std::size_t c = 0; c < resolution; ++c)
      if (center_inside(box, r, c, resolution)) return false;
  return true;
}

Mask rasterize_box(const BoundingBox& box, std::size_t resolution) {
  if (resolution == 0) throw ContractError("rasterize_box: resolution must be positive");
  Mask m(resolution);
  bool any = false;
  for (std::size_t r = 0; r < resolution; ++r) {
    for (std::size_t c = 0; c < resolution; ++c) {
      if (center_inside(box, r, c, resolution)) {
        m.cells[r * resolution + c] = 1;
        any = true;
      }
    }
  }
  if (!any) {
    auto cell = [&](double v) {
      return std::min(resolution - 1, static_cast<std::size_t>(std::floor(v * double(resolution))));
    };
    m.cells[cell(0.5 * (box.y0 + box.y1)) * resolution + cell(0.5 * (box.x0 + box.x1))] = 1;
  }
  return m;
}

Mask union_mask(const std::vector<Mask>& masks) {
  if (masks.empty()) throw ContractError("union_mask: empty mask list");
  Mask out(masks.front().resolution);
  for (const auto& m : masks) {
    if (m.resolution != out.resolution) throw ShapeError("union_mask: resolutions differ");
    for (std::size_t i = 0; i < out.cells.size(); ++i) out.cells[i] |= m.cells[i];
  }
  return out;
}

Mask intersect_mask(const Mask& a, const Mask& b) {
  if (a.resolution != b.resolution) throw ShapeError("intersect_mask: resolutions differ");
  Mask out(a.resolution);
  for (std::size_t i = 0; i < out.cells.size(); ++i) out.cells[i] = a.cells[i] & b.cells[i];
  return out;
}

std::vector<Mask> layout_masks(const Layout& layout, std::size_t resolution) {
  std::vector<Mask> masks;
  masks.reserve(layout.k());
  for (const auto& o : layout.objects) masks.push_back(rasterize_box(o.box, resolution));
  return masks;
}

}  // namespace loco
