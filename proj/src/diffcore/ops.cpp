#include "fewloc/diffcore/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace fewloc::diff {

namespace {

std::atomic<MatmulPrecision> g_precision{MatmulPrecision::Double};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatD = RowMat<double>;

void expect_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op + ": operand shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

void expect_extent(const std::string& op, const std::string& axis, std::size_t expected,
                   std::size_t actual) {
  if (expected != actual) throw ShapeError(op, axis, expected, actual);
}

// Column layout: row (ci*9 + ky*3 + kx), column (y*w + x).
template <typename T>
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const double* plane = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (std::size_t y = 0; y < h; ++y) {
          T* out = row + y * w;
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(out, out + w, T(0));
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(sy) * w;
          const std::size_t x_begin = dx < 0 ? 1 : 0;
          const std::size_t x_end = dx > 0 ? w - 1 : w;
          if (x_begin == 1) out[0] = T(0);
          if (x_end == w - 1) out[w - 1] = T(0);
          for (std::size_t xx = x_begin; xx < x_end; ++xx) {
            out[xx] = static_cast<T>(src[static_cast<long>(xx) + dx]);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t cin, std::size_t h, std::size_t w, double* dx_out) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    double* plane = dx_out + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const T* in = row + y * w;
          double* dst = plane + static_cast<std::size_t>(sy) * w;
          const std::size_t x_begin = dx < 0 ? 1 : 0;
          const std::size_t x_end = dx > 0 ? w - 1 : w;
          for (std::size_t xx = x_begin; xx < x_end; ++xx) {
            dst[static_cast<long>(xx) + dx] += static_cast<double>(in[xx]);
          }
        }
      }
    }
  }
}

struct ConvDims {
  std::size_t batch, cin, cout, h, w;
  std::size_t hw() const { return h * w; }
  std::size_t k() const { return cin * 9; }
};

template <typename T>
void conv_forward(const ConvDims& d, const double* x, const double* weight, const double* bias,
                  double* y) {
  RowMat<T> wm = Eigen::Map<const RowMatD>(weight, d.cout, d.k()).template cast<T>();
  RowMat<T> col(d.k(), d.hw());
  RowMat<T> out(d.cout, d.hw());
  for (std::size_t b = 0; b < d.batch; ++b) {
    im2col<T>(x + b * d.cin * d.hw(), d.cin, d.h, d.w, col.data());
    out.noalias() = wm * col;
    double* yb = y + b * d.cout * d.hw();
    for (std::size_t co = 0; co < d.cout; ++co) {
      const T* src = out.data() + co * d.hw();
      double* dst = yb + co * d.hw();
      for (std::size_t p = 0; p < d.hw(); ++p) dst[p] = static_cast<double>(src[p]) + bias[co];
    }
  }
}

template <typename T>
void conv_backward(const ConvDims& d, const double* x, const double* weight, const double* grad_out,
                   double* grad_x, double* grad_w, double* grad_b) {
  RowMat<T> wm = Eigen::Map<const RowMatD>(weight, d.cout, d.k()).template cast<T>();
  RowMat<T> col(d.k(), d.hw());
  RowMat<T> dcol(d.k(), d.hw());
  RowMat<T> dw = RowMat<T>::Zero(d.cout, d.k());
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* gb = grad_out + b * d.cout * d.hw();
    RowMat<T> dy = Eigen::Map<const RowMatD>(gb, d.cout, d.hw()).template cast<T>();
    if (grad_w) {
      im2col<T>(x + b * d.cin * d.hw(), d.cin, d.h, d.w, col.data());
      dw.noalias() += dy * col.transpose();
    }
    if (grad_x) {
      dcol.noalias() = wm.transpose() * dy;
      col2im<T>(dcol.data(), d.cin, d.h, d.w, grad_x + b * d.cin * d.hw());
    }
    if (grad_b) {
      for (std::size_t co = 0; co < d.cout; ++co) {
        const double* row = gb + co * d.hw();
        double acc = 0.0;
        for (std::size_t p = 0; p < d.hw(); ++p) acc += row[p];
        grad_b[co] += acc;
      }
    }
  }
  if (grad_w) {
    for (std::size_t i = 0; i < d.cout * d.k(); ++i) grad_w[i] += static_cast<double>(dw.data()[i]);
  }
}

}  // namespace

void set_matmul_precision(MatmulPrecision precision) { g_precision.store(precision); }
MatmulPrecision matmul_precision() { return g_precision.load(); }

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto& g = parent->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result({1}, {total}, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor sum_squares(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v * v;
  return make_result({1}, {total}, {a}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * self.grad[0];
  });
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  expect_extent("weighted_sum", "elements", a.numel(), weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += a.values()[i] * weights[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({1}, {total}, {a}, [w = std::move(w)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[i] * self.grad[0];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  expect_rank("gather_rows", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) + " outside [0," +
                              std::to_string(n) + ")");
    }
    std::copy_n(a.values().data() + rows[r] * d, d, out.data() + r * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), {a}, [idx = std::move(idx), d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t k = 0; k < d; ++k) g[idx[r] * d + k] += self.grad[r * d + k];
    }
  });
}

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  expect_rank("conv2d input", input, 4);
  expect_rank("conv2d weight", weight, 4);
  expect_rank("conv2d bias", bias, 1);
  ConvDims d{input.dim(0), input.dim(1), weight.dim(0), input.dim(2), input.dim(3)};
  expect_extent("conv2d", "in_channels", weight.dim(1), d.cin);
  expect_extent("conv2d", "kernel_height", 3, weight.dim(2));
  expect_extent("conv2d", "kernel_width", 3, weight.dim(3));
  expect_extent("conv2d", "bias", d.cout, bias.dim(0));

  std::vector<double> out(d.batch * d.cout * d.hw());
  if (matmul_precision() == MatmulPrecision::Single) {
    conv_forward<float>(d, input.values().data(), weight.values().data(), bias.values().data(),
                        out.data());
  } else {
    conv_forward<double>(d, input.values().data(), weight.values().data(), bias.values().data(),
                         out.data());
  }
  const auto precision = matmul_precision();
  return make_result({d.batch, d.cout, d.h, d.w}, std::move(out), {input, weight, bias},
                     [d, precision](Node& self) {
                       Node& x = *self.parents[0];
                       Node& w = *self.parents[1];
                       Node& b = *self.parents[2];
                       double* gx = x.requires_grad ? x.grad_buffer().data() : nullptr;
                       double* gw = w.requires_grad ? w.grad_buffer().data() : nullptr;
                       double* gb = b.requires_grad ? b.grad_buffer().data() : nullptr;
                       if (precision == MatmulPrecision::Single) {
                         conv_backward<float>(d, x.value.data(), w.value.data(), self.grad.data(),
                                              gx, gw, gb);
                       } else {
                         conv_backward<double>(d, x.value.data(), w.value.data(),
                                               self.grad.data(), gx, gw, gb);
                       }
                     });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormStats& stats, BatchNormMode mode) {
  expect_rank("batchnorm input", input, 4);
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  expect_extent("batchnorm", "gamma", channels, gamma.numel());
  expect_extent("batchnorm", "beta", channels, beta.numel());
  expect_extent("batchnorm", "running_mean", channels, stats.running_mean.size());
  const std::size_t count = batch * hw;
  if (mode == BatchNormMode::Train && count < 2) {
    throw std::domain_error(
        "batchnorm: train mode needs at least two values per channel to estimate variance (got " +
        std::to_string(count) + ")");
  }

  const auto x = input.values();
  const auto g = gamma.values();
  const auto be = beta.values();
  std::vector<double> mean(channels), inv_std(channels);
  if (mode == BatchNormMode::Train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const double biased = var / static_cast<double>(count);
      const double unbiased = var / static_cast<double>(count - 1);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(biased + stats.epsilon);
      stats.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
      stats.running_var[c] =
          (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.epsilon);
    }
  }

  std::vector<double> out(input.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * hw;
      const double mu = mean[c], is = inv_std[c], gc = g[c], bc = be[c];
      for (std::size_t i = 0; i < hw; ++i) out[base + i] = gc * ((x[base + i] - mu) * is) + bc;
    }
  }

  const bool train = mode == BatchNormMode::Train;
  return make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [mean = std::move(mean), inv_std = std::move(inv_std), batch, channels, hw, count,
       train](Node& self) {
        Node& xn = *self.parents[0];
        Node& gn = *self.parents[1];
        Node& bn = *self.parents[2];
        const auto& dy = self.grad;
        const auto& x = xn.value;
        std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * hw;
            double s_dy = 0.0, s_dyx = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              s_dy += dy[base + i];
              s_dyx += dy[base + i] * (x[base + i] - mean[c]);
            }
            sum_dy[c] += s_dy;
            sum_dy_xhat[c] += s_dyx * inv_std[c];
          }
        }
        if (gn.requires_grad) {
          auto& gg = gn.grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_dy_xhat[c];
        }
        if (bn.requires_grad) {
          auto& gb = bn.grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_dy[c];
        }
        if (xn.requires_grad) {
          auto& gx = xn.grad_buffer();
          const double n = static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (b * channels + c) * hw;
              const double k = gn.value[c] * inv_std[c];
              if (train) {
                const double m_dy = sum_dy[c] / n;
                const double m_dyx = sum_dy_xhat[c] / n;
                const double mu = mean[c], is = inv_std[c];
                for (std::size_t i = 0; i < hw; ++i) {
                  gx[base + i] += k * (dy[base + i] - m_dy - (x[base + i] - mu) * is * m_dyx);
                }
              } else {
                for (std::size_t i = 0; i < hw; ++i) gx[base + i] += k * dy[base + i];
              }
            }
          }
        }
      });
}

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.values().begin(), input.values().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(input.shape(), std::move(out), {input}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += p.value[i] > 0.0 ? self.grad[i] : 0.0;
  });
}

Tensor maxpool2(const Tensor& input) {
  expect_rank("maxpool2 input", input, 4);
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0) throw ShapeError("maxpool2: odd extent on axis 'height' (" + std::to_string(h) + ")");
  if (w % 2 != 0) throw ShapeError("maxpool2: odd extent on axis 'width' (" + std::to_string(w) + ")");
  const std::size_t oh = h / 2, ow = w / 2;
  const auto x = input.values();
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t base = pl * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t candidates[4] = {base + (2 * y) * w + 2 * xx, base + (2 * y) * w + 2 * xx + 1,
                                           base + (2 * y + 1) * w + 2 * xx,
                                           base + (2 * y + 1) * w + 2 * xx + 1};
        std::size_t best = candidates[0];
        for (int k = 1; k < 4; ++k) {
          if (x[candidates[k]] > x[best]) best = candidates[k];
        }
        const std::size_t o = (pl * oh + y) * ow + xx;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return make_result({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                     [argmax = std::move(argmax)](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                     });
}

Tensor global_avgpool(const Tensor& input) {
  expect_rank("global_avgpool input", input, 4);
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  std::vector<double> out(planes);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += input.values()[pl * hw + i];
    out[pl] = acc / static_cast<double>(hw);
  }
  return make_result({input.dim(0), input.dim(1)}, std::move(out), {input}, [hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t pl = 0; pl < self.grad.size(); ++pl) {
      for (std::size_t i = 0; i < hw; ++i) g[pl * hw + i] += self.grad[pl] * inv;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  expect_rank("linear input", x, 2);
  expect_rank("linear weight", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), outs = weight.dim(0);
  expect_extent("linear", "in_features", weight.dim(1), in);
  expect_extent("linear", "bias", outs, bias.numel());
  Eigen::Map<const RowMatD> xm(x.values().data(), batch, in);
  Eigen::Map<const RowMatD> wm(weight.values().data(), outs, in);
  RowMatD y = xm * wm.transpose();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < outs; ++k) y(b, k) += bias.values()[k];
  }
  std::vector<double> out(y.data(), y.data() + y.size());
  return make_result({batch, outs}, std::move(out), {x, weight, bias},
                     [batch, in, outs](Node& self) {
                       Node& xn = *self.parents[0];
                       Node& wn = *self.parents[1];
                       Node& bn = *self.parents[2];
                       Eigen::Map<const RowMatD> dy(self.grad.data(), batch, outs);
                       if (xn.requires_grad) {
                         Eigen::Map<RowMatD> dx(xn.grad_buffer().data(), batch, in);
                         dx.noalias() += dy * Eigen::Map<const RowMatD>(wn.value.data(), outs, in);
                       }
                       if (wn.requires_grad) {
                         Eigen::Map<RowMatD> dw(wn.grad_buffer().data(), outs, in);
                         dw.noalias() +=
                             dy.transpose() * Eigen::Map<const RowMatD>(xn.value.data(), batch, in);
                       }
                       if (bn.requires_grad) {
                         auto& gb = bn.grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t k = 0; k < outs; ++k) gb[k] += dy(b, k);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------

std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows,
                                     std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
  }
  return out;
}

Tensor softmax_xent(const Tensor& logits, std::span<const int> labels,
                    std::optional<std::span<const double>> class_weights) {
  expect_rank("softmax_xent logits", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  expect_extent("softmax_xent", "batch", batch, labels.size());
  if (class_weights) expect_extent("softmax_xent", "class_weights", classes, class_weights->size());
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw std::out_of_range("softmax_xent: label " + std::to_string(labels[b]) + " at row " +
                              std::to_string(b) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  auto logp = log_softmax_rows(logits.values(), batch, classes);
  std::vector<double> row_weight(batch, 1.0);
  if (class_weights) {
    for (std::size_t b = 0; b < batch; ++b) row_weight[b] = (*class_weights)[labels[b]];
  }
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) loss -= row_weight[b] * logp[b * classes + labels[b]];
  loss /= static_cast<double>(batch);

  std::vector<int> lab(labels.begin(), labels.end());
  return make_result({1}, {loss}, {logits},
                     [logp = std::move(logp), lab = std::move(lab),
                      row_weight = std::move(row_weight), batch, classes](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(batch);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t c = 0; c < classes; ++c) {
                           double d = std::exp(logp[b * classes + c]);
                           if (static_cast<int>(c) == lab[b]) d -= 1.0;
                           g[b * classes + c] += s * row_weight[b] * d;
                         }
                       }
                     });
}

}  // namespace fewloc::diff
