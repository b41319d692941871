// Copyright 2026 The capdet Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <compare>
#include <string>

namespace capdet {

// Axis-aligned box in pixel coordinates, half-open: a pixel (x, y) is inside
// iff x_min <= x < x_max and y_min <= y < y_max.
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const { return x_max > x_min && y_max > y_min; }

  Box translated(double dx, double dy) const {
    return {x_min + dx, y_min + dy, x_max + dx, y_max + dy};
  }

  friend auto operator<=>(const Box&, const Box&) = default;
};

// COCO stores [x, y, w, h].
inline Box box_from_xywh(double x, double y, double w, double h) {
  return {x, y, x + w, y + h};
}

std::string to_string(const Box& b);

}  // namespace capdet
