#include "tvc/wavelet.hpp"

#include <vector>

namespace tvc {

namespace {

// one periodic analysis step in place: first half approximation, second half detail
void analyze_line(std::vector<double>& s, Index n, const std::array<double, 8>& lo,
                  const std::array<double, 8>& hi) {
  const Index half = n / 2;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Index k = 0; k < half; ++k) {
    double a = 0, d = 0;
    for (Index m = 0; m < 8; ++m) {
      const double v = s[static_cast<std::size_t>((2 * k + m) % n)];
      a += lo[static_cast<std::size_t>(m)] * v;
      d += hi[static_cast<std::size_t>(m)] * v;
    }
    out[static_cast<std::size_t>(k)] = a;
    out[static_cast<std::size_t>(half + k)] = d;
  }
  std::copy(out.begin(), out.begin() + n, s.begin());
}

void synthesize_line(std::vector<double>& s, Index n, const std::array<double, 8>& lo,
                     const std::array<double, 8>& hi) {
  const Index half = n / 2;
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (Index k = 0; k < half; ++k) {
    const double a = s[static_cast<std::size_t>(k)];
    const double d = s[static_cast<std::size_t>(half + k)];
    for (Index m = 0; m < 8; ++m)
      out[static_cast<std::size_t>((2 * k + m) % n)] += lo[static_cast<std::size_t>(m)] * a +
                                                        hi[static_cast<std::size_t>(m)] * d;
  }
  std::copy(out.begin(), out.begin() + n, s.begin());
}

template <typename LineOp>
void transform_axis(DenseTensorD& x, Index axis, const Shape& region, LineOp&& op) {
  const auto& shape = x.shape();
  const Shape strides = shape_strides(shape);
  const Index n = region[static_cast<std::size_t>(axis)];
  const Index dims = x.order();

  // iterate over all line origins within the region with coordinate 0 on `axis`
  Shape idx(static_cast<std::size_t>(dims), 0);
  std::vector<double> buf(static_cast<std::size_t>(n));
  for (;;) {
    Index base = 0;
    for (Index d = 0; d < dims; ++d) base += strides[static_cast<std::size_t>(d)] * idx[static_cast<std::size_t>(d)];
    const Index step = strides[static_cast<std::size_t>(axis)];
    for (Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = x[base + i * step];
    op(buf, n);
    for (Index i = 0; i < n; ++i) x[base + i * step] = buf[static_cast<std::size_t>(i)];

    // advance over the other coordinates within the region
    Index d = 0;
    for (; d < dims; ++d) {
      if (d == axis) continue;
      if (++idx[static_cast<std::size_t>(d)] < region[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
    if (d == dims) break;
  }
}

void check_levels(const DenseTensorD& x, int levels) {
  if (levels < 1) throw std::invalid_argument("dwt: levels must be >= 1");
  for (Index p : x.shape())
    if (p % (Index(1) << levels) != 0)
      throw std::invalid_argument("dwt: every extent must be divisible by 2^levels");
}

}  // namespace

void dwt_forward(DenseTensorD& x, int levels) {
  check_levels(x, levels);
  const auto hi = sym4_hi();
  Shape region = x.shape();
  for (int l = 0; l < levels; ++l) {
    for (Index axis = 0; axis < x.order(); ++axis)
      transform_axis(x, axis, region,
                     [&](std::vector<double>& s, Index n) { analyze_line(s, n, kSym4Lo, hi); });
    for (auto& r : region) r /= 2;
  }
}

void dwt_inverse(DenseTensorD& x, int levels) {
  check_levels(x, levels);
  const auto hi = sym4_hi();
  for (int l = levels - 1; l >= 0; --l) {
    Shape region = x.shape();
    for (auto& r : region) r /= (Index(1) << l);
    for (Index axis = x.order() - 1; axis >= 0; --axis)
      transform_axis(x, axis, region,
                     [&](std::vector<double>& s, Index n) { synthesize_line(s, n, kSym4Lo, hi); });
  }
}

}  // namespace tvc
