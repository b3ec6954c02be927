#include "gadt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace gadt {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

template <typename T>
detail::Node<T>& parent(detail::Node<T>& n, std::size_t i) {
  return *n.parents[i];
}

// Column matrix for one image: rows index (c, ky, kx), columns index (y, x).
// Each entry stores the flat source offset inside the image, or -1 for a
// zero-padded tap.
struct Im2ColPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::ptrdiff_t> src;
};

Im2ColPlan make_plan(std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw, PadMode pad) {
  Im2ColPlan plan;
  plan.rows = C * kh * kw;
  plan.cols = H * W;
  plan.src.resize(plan.rows * plan.cols);
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto sH = static_cast<std::ptrdiff_t>(H);
  const auto sW = static_cast<std::ptrdiff_t>(W);
  std::size_t r = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++r) {
        auto* row = plan.src.data() + r * plan.cols;
        for (std::ptrdiff_t y = 0; y < sH; ++y) {
          for (std::ptrdiff_t x = 0; x < sW; ++x) {
            std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - ph;
            std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pw;
            std::ptrdiff_t off = -1;
            if (pad == PadMode::replicate) {
              sy = std::clamp<std::ptrdiff_t>(sy, 0, sH - 1);
              sx = std::clamp<std::ptrdiff_t>(sx, 0, sW - 1);
              off = static_cast<std::ptrdiff_t>(c) * sH * sW + sy * sW + sx;
            } else if (sy >= 0 && sy < sH && sx >= 0 && sx < sW) {
              off = static_cast<std::ptrdiff_t>(c) * sH * sW + sy * sW + sx;
            }
            row[y * sW + x] = off;
          }
        }
      }
    }
  }
  return plan;
}

template <typename T>
void im2col(const Im2ColPlan& plan, const T* image, T* cols) {
  const auto n = plan.src.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto off = plan.src[i];
    cols[i] = off >= 0 ? image[off] : T(0);
  }
}

template <typename T>
void col2im_add(const Im2ColPlan& plan, const T* cols, T* image_grad) {
  const auto n = plan.src.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto off = plan.src[i];
    if (off >= 0) image_grad[off] += cols[i];
  }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& par = parent(n, p);
      if (!par.requires_grad) continue;
      auto& g = grad_buffer(par);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    if (parent(n, 0).requires_grad) {
      auto& g = grad_buffer(parent(n, 0));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (parent(n, 1).requires_grad) {
      auto& g = grad_buffer(parent(n, 1));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) {
      auto& g = grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, [factor](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  return make_result<T>({1}, {total}, {x}, [](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  const T inv = T(1) / static_cast<T>(x.size());
  return make_result<T>({1}, {total * inv}, {x}, [inv](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    for (auto& v : g) v += n.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, PadMode padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw DimensionError("conv2d: input has " + std::to_string(C) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("conv2d: kernel sizes must be odd");

  auto plan = std::make_shared<Im2ColPlan>(make_plan(C, H, W, kh, kw, padding));
  const std::size_t in_stride = C * H * W, out_stride = O * H * W;
  std::vector<T> out(N * out_stride);
  std::vector<T> cols(plan->rows * plan->cols);
  ConstMatMap<T> K(kernel.data().data(), O, plan->rows);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(*plan, input.data().data() + n * in_stride, cols.data());
    MatMap<T> Y(out.data() + n * out_stride, O, plan->cols);
    Y.noalias() = K * ConstMatMap<T>(cols.data(), plan->rows, plan->cols);
  }

  return make_result<T>({N, O, H, W}, std::move(out), {input, kernel},
                        [plan, N, O, in_stride, out_stride](detail::Node<T>& node) {
                          auto& x = parent(node, 0);
                          auto& k = parent(node, 1);
                          ConstMatMap<T> K(k.value.data(), O, plan->rows);
                          std::vector<T> cols(plan->rows * plan->cols);
                          RowMatrix<T> dcols;
                          for (std::size_t n = 0; n < N; ++n) {
                            ConstMatMap<T> dY(node.grad.data() + n * out_stride, O, plan->cols);
                            if (k.requires_grad) {
                              im2col(*plan, x.value.data() + n * in_stride, cols.data());
                              MatMap<T> dK(grad_buffer(k).data(), O, plan->rows);
                              dK.noalias() += dY * ConstMatMap<T>(cols.data(), plan->rows, plan->cols).transpose();
                            }
                            if (x.requires_grad) {
                              dcols.noalias() = K.transpose() * dY;
                              col2im_add(*plan, dcols.data(), grad_buffer(x).data() + n * in_stride);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x.shape(), 4, "add_channel_bias");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (bias.size() != C) throw DimensionError("add_channel_bias: bias size does not match channel count");
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      auto* p = out.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] += b[c];
    }
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [N, C, HW](detail::Node<T>& n) {
    auto& px = parent(n, 0);
    auto& pb = parent(n, 1);
    if (px.requires_grad) {
      auto& g = grad_buffer(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t b = 0; b < N; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const auto* p = n.grad.data() + (b * C + c) * HW;
          T acc = 0;
          for (std::size_t i = 0; i < HW; ++i) acc += p[i];
          g[c] += acc;
        }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > T(0) ? d[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& n) {
    auto& p = parent(n, 0);
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "avg_pool2x2");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw DimensionError("avg_pool2x2: spatial size must be even, got " + to_string(x.shape()));
  const auto Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto d = x.data();
  for (std::size_t p = 0; p < N * C; ++p) {
    const auto* src = d.data() + p * H * W;
    auto* dst = out.data() + p * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const auto* s = src + 2 * y * W + 2 * xx;
        dst[y * Wo + xx] = T(0.25) * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return make_result<T>({N, C, Ho, Wo}, std::move(out), {x}, [N, C, H, W](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    const auto Ho = H / 2, Wo = W / 2;
    for (std::size_t p = 0; p < N * C; ++p) {
      auto* dst = g.data() + p * H * W;
      const auto* src = n.grad.data() + p * Ho * Wo;
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          const T v = T(0.25) * src[y * Wo + xx];
          auto* s = dst + 2 * y * W + 2 * xx;
          s[0] += v;
          s[1] += v;
          s[W] += v;
          s[W + 1] += v;
        }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const auto N = x.dim(0), D = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != D) {
    throw DimensionError("linear: input features " + std::to_string(D) + " vs weight " + to_string(weight.shape()));
  }
  if (bias.size() != O) throw DimensionError("linear: bias size mismatch");
  std::vector<T> out(N * O);
  MatMap<T> Y(out.data(), N, O);
  ConstMatMap<T> X(x.data().data(), N, D), Wt(weight.data().data(), O, D);
  // Row by row, so a row's logits do not depend on the batch it sits in.
  for (std::size_t r = 0; r < N; ++r) Y.row(r).noalias() = X.row(r) * Wt.transpose();
  auto b = bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b[o];
  return make_result<T>({N, O}, std::move(out), {x, weight, bias}, [N, D, O](detail::Node<T>& n) {
    auto& px = parent(n, 0);
    auto& pw = parent(n, 1);
    auto& pb = parent(n, 2);
    ConstMatMap<T> dY(n.grad.data(), N, O);
    if (px.requires_grad) {
      MatMap<T> dX(grad_buffer(px).data(), N, D);
      ConstMatMap<T> Wm(pw.value.data(), O, D);
      for (std::size_t r = 0; r < N; ++r) dX.row(r).noalias() += dY.row(r) * Wm;
    }
    if (pw.requires_grad) {
      MatMap<T>(grad_buffer(pw).data(), O, D).noalias() +=
          dY.transpose() * ConstMatMap<T>(px.value.data(), N, D);
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t o = 0; o < O; ++o) g[o] += n.grad[r * O + o];
    }
  });
}

namespace {

template <typename T>
void check_logits(const Tensor<T>& logits, std::span<const ClassIndex> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const auto N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != N) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] >= C) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " exceeds class count " + std::to_string(C));
    }
  }
  auto d = logits.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) throw NumericError("non-finite logit at flat index " + std::to_string(i));
  }
}

// Row-wise softmax probabilities and losses.
template <typename T>
void softmax_rows(std::span<const T> d, std::size_t N, std::size_t C, std::span<const ClassIndex> labels,
                  std::vector<T>& probs, std::vector<T>& losses) {
  probs.resize(N * C);
  losses.resize(N);
  for (std::size_t r = 0; r < N; ++r) {
    const T* row = d.data() + r * C;
    const T mx = *std::max_element(row, row + C);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      probs[r * C + c] = std::exp(row[c] - mx);
      z += probs[r * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] /= z;
    losses[r] = std::log(z) + mx - row[labels[r]];
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const ClassIndex> labels) {
  check_logits(logits, labels);
  const auto N = logits.dim(0), C = logits.dim(1);
  std::vector<T> probs, losses;
  softmax_rows(logits.data(), N, C, labels, probs, losses);
  T total = 0;
  for (auto l : losses) total += l;
  std::vector<ClassIndex> lab(labels.begin(), labels.end());
  return make_result<T>({1}, {total / static_cast<T>(N)}, {logits},
                        [N, C, probs = std::move(probs), lab = std::move(lab)](detail::Node<T>& n) {
                          auto& g = grad_buffer(parent(n, 0));
                          const T s = n.grad[0] / static_cast<T>(N);
                          for (std::size_t r = 0; r < N; ++r)
                            for (std::size_t c = 0; c < C; ++c) {
                              const T onehot = c == lab[r] ? T(1) : T(0);
                              g[r * C + c] += s * (probs[r * C + c] - onehot);
                            }
                        });
}

template <typename T>
std::vector<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const ClassIndex> labels) {
  check_logits(logits, labels);
  std::vector<T> probs, losses;
  softmax_rows(logits.data(), logits.dim(0), logits.dim(1), labels, probs, losses);
  return losses;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  auto da = a.data(), db = b.data();
  T total = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const T d = da[i] - db[i];
    total += d * d;
  }
  const T inv = T(1) / static_cast<T>(da.size());
  return make_result<T>({1}, {total * inv}, {a, b}, [inv](detail::Node<T>& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    const T s = T(2) * inv * n.grad[0];
    if (pa.requires_grad) {
      auto& g = grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (pa.value[i] - pb.value[i]);
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s * (pa.value[i] - pb.value[i]);
    }
  });
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(d[i], T(0), T(1));
  return make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& n) {
    auto& p = parent(n, 0);
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0) && p.value[i] < T(1)) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::ptrdiff_t> index, Shape shape) {
  if (numel(shape) != index.size()) throw DimensionError("gather: index map does not match output shape");
  const auto n_in = static_cast<std::ptrdiff_t>(x.size());
  auto d = x.data();
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n_in) throw ContractError("gather: index out of range");
    out[i] = index[i] >= 0 ? d[static_cast<std::size_t>(index[i])] : T(0);
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, [index = std::move(index)](detail::Node<T>& n) {
    auto& g = grad_buffer(parent(n, 0));
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) g[static_cast<std::size_t>(index[i])] += n.grad[i];
  });
}

template <typename T>
std::vector<ClassIndex> argmax_rows(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "argmax_rows");
  const auto N = logits.dim(0), C = logits.dim(1);
  auto d = logits.data();
  std::vector<ClassIndex> out(N);
  for (std::size_t r = 0; r < N; ++r) {
    ClassIndex best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (d[r * C + c] > d[r * C + best]) best = c;
    out[r] = best;
  }
  return out;
}

#define GADT_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, PadMode);                        \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const ClassIndex>);       \
  template std::vector<T> cross_entropy_rows(const Tensor<T>&, std::span<const ClassIndex>);     \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> clamp01(const Tensor<T>&);                                                  \
  template Tensor<T> gather(const Tensor<T>&, std::vector<std::ptrdiff_t>, Shape);               \
  template std::vector<ClassIndex> argmax_rows(const Tensor<T>&);

GADT_INSTANTIATE_OPS(float)
GADT_INSTANTIATE_OPS(double)

}  // namespace gadt
