#include "dcv/metrics.hpp"

#include <cmath>

#include "dcv/errors.hpp"

namespace dcv {

namespace {

void check_pair(const FlowField& pred, const FlowField& gt, const char* op) {
  if (!pred.data.same_shape(gt.data)) {
    throw ShapeError(std::string(op) + ": prediction " + shape_string(pred.data.shape()) + " vs ground truth " +
                     shape_string(gt.data.shape()));
  }
}

}  // namespace

EpeResult epe(const FlowField& pred, const FlowField& gt) {
  check_pair(pred, gt, "epe");
  const std::size_t H = gt.height();
  const std::size_t W = gt.width();
  EpeResult r{0.0, Tensor({H, W}), 0};
  double total = 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!gt.is_valid(y, x) || !pred.is_valid(y, x)) continue;
      const double e = std::hypot(pred.u(y, x) - gt.u(y, x), pred.v(y, x) - gt.v(y, x));
      r.map[y * W + x] = e;
      total += e;
      ++r.valid_pixels;
    }
  }
  if (r.valid_pixels > 0) r.mean = total / static_cast<double>(r.valid_pixels);
  return r;
}

double fl_all(const FlowField& pred, const FlowField& gt) {
  check_pair(pred, gt, "fl_all");
  std::size_t valid = 0;
  std::size_t outliers = 0;
  for (std::size_t y = 0; y < gt.height(); ++y) {
    for (std::size_t x = 0; x < gt.width(); ++x) {
      if (!gt.is_valid(y, x) || !pred.is_valid(y, x)) continue;
      const double e = std::hypot(pred.u(y, x) - gt.u(y, x), pred.v(y, x) - gt.v(y, x));
      const double mag = std::hypot(gt.u(y, x), gt.v(y, x));
      ++valid;
      if (e > 3.0 && e > 0.05 * mag) ++outliers;
    }
  }
  return valid == 0 ? 0.0 : 100.0 * static_cast<double>(outliers) / static_cast<double>(valid);
}

}  // namespace dcv
