#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "loco/errors.hpp"

namespace loco {

// Normalized box, x along columns and y along rows, origin top-left.
struct BoundingBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  bool valid() const;
  bool operator==(const BoundingBox&) const = default;
};

// A phrase and the prompt-token positions it covers. Positions index the
// padded token sequence, so they are always in [1, n-2].
struct Phrase {
  std::string text;
  std::vector<std::size_t> span;

  bool operator==(const Phrase&) const = default;
};

enum class RelationKind { left, right, above, below };

std::string_view relation_name(RelationKind kind);

struct Relation {
  std::size_t a = 0;
  std::size_t b = 0;
  RelationKind kind = RelationKind::left;

  bool operator==(const Relation&) const = default;
};

struct LayoutObject {
  BoundingBox box;
  Phrase phrase;

  bool operator==(const LayoutObject&) const = default;
};

struct Layout {
  std::string prompt;
  std::vector<LayoutObject> objects;
  std::vector<Relation> relations;

  std::size_t k() const { return objects.size(); }
  bool operator==(const Layout&) const = default;
};

// Parses the JSON layout document:
//   {"prompt": "...", "objects": [{"phrase": "...", "box": [x0,y0,x1,y1]}],
//    "relations": [{"a": 0, "b": 1, "kind": "left"}]}
// Phrase spans are resolved against tokenize(prompt). Repeated phrases bind
// to successive occurrences. Throws ParseError naming the offending field.
Layout parse_layout(std::string_view text);
Layout load_layout(const std::string& path);
std::string serialize_layout(const Layout& layout);

// Binary occupancy grid, row-major, cells[r * resolution + c].
struct Mask {
  std::size_t resolution = 16;
  std::vector<unsigned char> cells;

  explicit Mask(std::size_t res = 16) : resolution(res), cells(res * res, 0) {}

  bool at(std::size_t r, std::size_t c) const { return cells[r * resolution + c] != 0; }
  std::size_t popcount() const;
  bool operator==(const Mask&) const = default;
};

// Cell (r, c) is set iff its center lies in [x0,x1) x [y0,y1). A box that
// covers no center sets the single cell holding the box center.
Mask rasterize_box(const BoundingBox& box, std::size_t resolution = 16);

// True if the box covered no cell center and fell back to one cell.
bool rasterize_is_degenerate(const BoundingBox& box, std::size_t resolution = 16);

Mask union_mask(const std::vector<Mask>& masks);
Mask intersect_mask(const Mask& a, const Mask& b);

std::vector<Mask> layout_masks(const Layout& layout, std::size_t resolution = 16);

}  // namespace loco
