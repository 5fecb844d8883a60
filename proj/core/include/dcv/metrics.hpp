#pragma once

#include "dcv/flow_io.hpp"

namespace dcv {

struct EpeResult {
  double mean = 0.0;
  Tensor map;  // [H x W] per-pixel endpoint error, 0 where invalid
  std::size_t valid_pixels = 0;
};

/// Mean endpoint error over pixels valid in both fields.
EpeResult epe(const FlowField& pred, const FlowField& gt);

/// Percentage of valid pixels with error > 3 px and > 5% of |gt|.
double fl_all(const FlowField& pred, const FlowField& gt);

}  // namespace dcv
