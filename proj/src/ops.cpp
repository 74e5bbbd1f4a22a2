#include "dpn/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>

namespace dpn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatRM<T>>;

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int pooled_extent(int in, int k, int s, int p, const char* what) {
  if (k > in + 2 * p) {
    throw std::invalid_argument(std::string(what) + ": window larger than padded input");
  }
  const int out = (in + 2 * p - k) / s + 1;
  if (out <= 0) {
    throw std::invalid_argument(std::string(what) + ": non-positive output extent");
  }
  return out;
}

// Unpacks N x C x H x W or N x C into (n, c, inner) with inner = H * W.
struct ChannelDims {
  std::int64_t n, c, inner;
};

template <typename T>
ChannelDims channel_dims(const TensorT<T>& t, const char* what) {
  const auto& s = t.shape();
  if (s.size() == 4) return {s[0], s[1], std::int64_t(s[2]) * s[3]};
  if (s.size() == 2) return {s[0], s[1], 1};
  throw std::invalid_argument(std::string(what) + ": expected N x C x H x W or N x C input");
}

// im2col for one sample and one group: rows are (c, kh, kw), columns are
// output positions. `base` points at the sample's first channel of the group.
template <typename T>
void im2col(const T* base, int cg, int h, int w, int kh, int kw, int sh, int sw,
            int ph, int pw, int ho, int wo, T* col) {
  const std::int64_t plane = std::int64_t(h) * w;
  std::int64_t row = 0;
  for (int c = 0; c < cg; ++c) {
    const T* chan = base + c * plane;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        T* dst = col + row * (std::int64_t(ho) * wo);
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * sh - ph + ki;
          if (ii < 0 || ii >= h) {
            std::fill(dst, dst + wo, T(0));
            dst += wo;
            continue;
          }
          const T* src_row = chan + std::int64_t(ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * sw - pw + kj;
            *dst++ = (jj < 0 || jj >= w) ? T(0) : src_row[jj];
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_add(const T* col, int cg, int h, int w, int kh, int kw, int sh,
                int sw, int ph, int pw, int ho, int wo, T* base) {
  const std::int64_t plane = std::int64_t(h) * w;
  std::int64_t row = 0;
  for (int c = 0; c < cg; ++c) {
    T* chan = base + c * plane;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const T* src = col + row * (std::int64_t(ho) * wo);
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * sh - ph + ki;
          if (ii < 0 || ii >= h) {
            src += wo;
            continue;
          }
          T* dst_row = chan + std::int64_t(ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * sw - pw + kj;
            if (jj >= 0 && jj < w) dst_row[jj] += src[oj];
          }
        }
      }
    }
  }
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  std::pair<int, int> stride, std::pair<int, int> padding,
                  int groups) {
  require(input.ndim() == 4, "conv2d: input must be N x C x H x W");
  require(weight.ndim() == 4, "conv2d: weight must be Cout x Cin/G x Kh x Kw");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const auto [sh, sw] = stride;
  const auto [ph, pw] = padding;
  require(groups >= 1, "conv2d: groups must be positive");
  if (cin % groups != 0 || cout % groups != 0) {
    throw std::invalid_argument("conv2d: groups must divide input and output channels");
  }
  if (wc != cin / groups) {
    throw std::invalid_argument("conv2d: weight shape " + shape_string(weight.shape()) +
                                " does not match input " + shape_string(input.shape()) +
                                " with groups " + std::to_string(groups));
  }
  require(sh >= 1 && sw >= 1, "conv2d: stride must be positive");
  require(ph >= 0 && pw >= 0, "conv2d: padding must be non-negative");
  const int ho = (h + 2 * ph - kh) / sh + 1;
  const int wo = (w + 2 * pw - kw) / sw + 1;
  if (h + 2 * ph < kh || w + 2 * pw < kw || ho <= 0 || wo <= 0) {
    throw std::invalid_argument("conv2d: non-positive output extent");
  }

  const int cg = cin / groups;       // input channels per group
  const int cog = cout / groups;     // output channels per group
  const std::int64_t krows = std::int64_t(cg) * kh * kw;
  const std::int64_t opix = std::int64_t(ho) * wo;
  const bool unit = (kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0);

  TensorT<T> out({n, cout, ho, wo});
  std::vector<T> col;
  if (!unit) col.resize(static_cast<std::size_t>(krows * opix));

  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups; ++g) {
      const T* in_base = input.data() + (std::int64_t(b) * cin + g * cg) * h * w;
      const T* col_ptr = in_base;
      if (!unit) {
        im2col(in_base, cg, h, w, kh, kw, sh, sw, ph, pw, ho, wo, col.data());
        col_ptr = col.data();
      }
      ConstMapRM<T> wmat(weight.data() + std::int64_t(g) * cog * krows, cog, krows);
      ConstMapRM<T> cmat(col_ptr, krows, opix);
      MapRM<T> omat(out.data() + (std::int64_t(b) * cout + g * cog) * opix, cog, opix);
      omat.noalias() = wmat * cmat;
    }
  }

  detail::record_op<T>(
      "conv2d", {input, weight}, out,
      [input, weight, out, stride, padding, groups]() mutable {
        const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
        const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
        const auto [sh, sw] = stride;
        const auto [ph, pw] = padding;
        const int ho = out.dim(2), wo = out.dim(3);
        const int cg = cin / groups, cog = cout / groups;
        const std::int64_t krows = std::int64_t(cg) * kh * kw;
        const std::int64_t opix = std::int64_t(ho) * wo;
        const bool unit = (kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0);

        auto gout = out.grad();
        auto gin = input.grad();
        auto gw = weight.grad();
        std::vector<T> col, dcol;
        if (!unit) {
          col.resize(static_cast<std::size_t>(krows * opix));
          dcol.resize(static_cast<std::size_t>(krows * opix));
        }
        for (int b = 0; b < n; ++b) {
          for (int g = 0; g < groups; ++g) {
            const std::int64_t in_off = (std::int64_t(b) * cin + g * cg) * h * w;
            const T* in_base = input.data() + in_off;
            ConstMapRM<T> wmat(weight.data() + std::int64_t(g) * cog * krows, cog, krows);
            MapRM<T> gwmat(gw.data() + std::int64_t(g) * cog * krows, cog, krows);
            ConstMapRM<T> gomat(gout.data() + (std::int64_t(b) * cout + g * cog) * opix,
                                cog, opix);
            if (unit) {
              ConstMapRM<T> cmat(in_base, krows, opix);
              gwmat.noalias() += gomat * cmat.transpose();
              MapRM<T> gimat(gin.data() + in_off, krows, opix);
              gimat.noalias() += wmat.transpose() * gomat;
            } else {
              im2col(in_base, cg, h, w, kh, kw, sh, sw, ph, pw, ho, wo, col.data());
              ConstMapRM<T> cmat(col.data(), krows, opix);
              gwmat.noalias() += gomat * cmat.transpose();
              MapRM<T> dcmat(dcol.data(), krows, opix);
              dcmat.noalias() = wmat.transpose() * gomat;
              col2im_add(dcol.data(), cg, h, w, kh, kw, sh, sw, ph, pw, ho, wo,
                         gin.data() + in_off);
            }
          }
        }
      });
  return out;
}

namespace {

template <typename T>
TensorT<T> bn_core(const TensorT<T>& input, const TensorT<T>& gamma,
                   const TensorT<T>& beta, TensorT<T>* running_mean,
                   TensorT<T>* running_var, bool training, T epsilon, T momentum) {
  const auto [n, c, inner] = channel_dims(input, "batch_norm");
  require(gamma.numel() == c && beta.numel() == c,
          "batch_norm: gamma/beta length must equal channel count");
  require(epsilon > T(0), "batch_norm: epsilon must be positive");
  const std::int64_t m = n * inner;
  if (training && m == 0) throw std::invalid_argument("batch_norm: zero-size batch");

  std::vector<T> mean(c), invstd(c);
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T sum = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = input.data() + (b * c + ch) * inner;
        for (std::int64_t i = 0; i < inner; ++i) sum += p[i];
      }
      const T mu = sum / static_cast<T>(m);
      T sq = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = input.data() + (b * c + ch) * inner;
        for (std::int64_t i = 0; i < inner; ++i) {
          const T d = p[i] - mu;
          sq += d * d;
        }
      }
      const T var = sq / static_cast<T>(m);  // population variance
      mean[ch] = mu;
      invstd[ch] = T(1) / std::sqrt(var + epsilon);
      if (running_mean) {
        running_mean->values()[ch] = momentum * running_mean->values()[ch] + (T(1) - momentum) * mu;
        running_var->values()[ch] = momentum * running_var->values()[ch] + (T(1) - momentum) * var;
      }
    }
  } else {
    require(running_mean != nullptr && running_mean->numel() == c &&
                running_var->numel() == c,
            "batch_norm: running stats must match channel count");
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean->values()[ch];
      invstd[ch] = T(1) / std::sqrt(running_var->values()[ch] + epsilon);
    }
  }

  TensorT<T> out(input.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = input.data() + (b * c + ch) * inner;
      T* q = out.data() + (b * c + ch) * inner;
      const T g = gamma.values()[ch], bt = beta.values()[ch];
      const T mu = mean[ch], is = invstd[ch];
      for (std::int64_t i = 0; i < inner; ++i) q[i] = (p[i] - mu) * is * g + bt;
    }
  }

  detail::record_op<T>(
      "batch_norm", {input, gamma, beta}, out,
      [input, gamma, beta, out, mean, invstd, training, n = n, c = c, inner = inner]() mutable {
        const std::int64_t m = n * inner;
        auto gout = out.grad();
        auto gin = input.grad();
        auto ggamma = gamma.grad();
        auto gbeta = beta.grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = mean[ch], is = invstd[ch], g = gamma.values()[ch];
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * inner;
            const T* x = input.data() + off;
            const T* dy = gout.data() + off;
            for (std::int64_t i = 0; i < inner; ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (x[i] - mu) * is;
            }
          }
          ggamma[ch] += sum_dy_xhat;
          gbeta[ch] += sum_dy;
          if (training) {
            const T k = g * is / static_cast<T>(m);
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * inner;
              const T* x = input.data() + off;
              const T* dy = gout.data() + off;
              T* dx = gin.data() + off;
              for (std::int64_t i = 0; i < inner; ++i) {
                const T xhat = (x[i] - mu) * is;
                dx[i] += k * (static_cast<T>(m) * dy[i] - sum_dy - xhat * sum_dy_xhat);
              }
            }
          } else {
            const T k = g * is;
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * inner;
              const T* dy = gout.data() + off;
              T* dx = gin.data() + off;
              for (std::int64_t i = 0; i < inner; ++i) dx[i] += k * dy[i];
            }
          }
        }
      });
  return out;
}

}  // namespace

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean,
                      TensorT<T>& running_var, bool training, T epsilon,
                      T momentum) {
  return bn_core(input, gamma, beta, &running_mean, &running_var, training,
                 epsilon, momentum);
}

template <typename T>
TensorT<T> batch_norm_batch_stats(const TensorT<T>& input, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, T epsilon) {
  return bn_core<T>(input, gamma, beta, nullptr, nullptr, true, epsilon, T(0));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
  TensorT<T> out(input.shape());
  const T* p = input.data();
  T* q = out.data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);

  detail::record_op<T>("relu", {input}, out, [input, out]() mutable {
    auto gout = out.grad();
    auto gin = input.grad();
    const T* p = input.data();
    const std::int64_t n = input.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      if (p[i] > T(0)) gin[i] += gout[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& input, int kernel, int stride, int padding) {
  require(input.ndim() == 4, "max_pool2d: input must be N x C x H x W");
  require(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be positive");
  require(padding >= 0 && padding < kernel, "max_pool2d: padding must be in [0, kernel)");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int ho = pooled_extent(h, kernel, stride, padding, "max_pool2d");
  const int wo = pooled_extent(w, kernel, stride, padding, "max_pool2d");

  TensorT<T> out({n, c, ho, wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  std::int64_t oi = 0;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = input.data() + (std::int64_t(b) * c + ch) * h * w;
      for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_idx = -1;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ii = y * stride - padding + ki;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int jj = x * stride - padding + kj;
              if (jj < 0 || jj >= w) continue;
              const std::int64_t idx = std::int64_t(ii) * w + jj;
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          out.data()[oi] = best;
          argmax[oi] = (std::int64_t(b) * c + ch) * h * w + best_idx;
        }
      }
    }
  }

  detail::record_op<T>("max_pool2d", {input}, out,
                       [input, out, argmax = std::move(argmax)]() mutable {
                         auto gout = out.grad();
                         auto gin = input.grad();
                         for (std::size_t i = 0; i < argmax.size(); ++i) {
                           gin[argmax[i]] += gout[i];
                         }
                       });
  return out;
}

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& input, int kernel, int stride, int padding) {
  require(input.ndim() == 4, "avg_pool2d: input must be N x C x H x W");
  require(kernel >= 1 && stride >= 1, "avg_pool2d: kernel and stride must be positive");
  require(padding >= 0 && padding < kernel, "avg_pool2d: padding must be in [0, kernel)");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int ho = pooled_extent(h, kernel, stride, padding, "avg_pool2d");
  const int wo = pooled_extent(w, kernel, stride, padding, "avg_pool2d");

  TensorT<T> out({n, c, ho, wo});
  std::int64_t oi = 0;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = input.data() + (std::int64_t(b) * c + ch) * h * w;
      for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x, ++oi) {
          T sum = 0;
          int count = 0;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ii = y * stride - padding + ki;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int jj = x * stride - padding + kj;
              if (jj < 0 || jj >= w) continue;
              sum += plane[std::int64_t(ii) * w + jj];
              ++count;
            }
          }
          out.data()[oi] = sum / static_cast<T>(count);
        }
      }
    }
  }

  detail::record_op<T>(
      "avg_pool2d", {input}, out, [input, out, kernel, stride, padding]() mutable {
        const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
        const int ho = out.dim(2), wo = out.dim(3);
        auto gout = out.grad();
        auto gin = input.grad();
        std::int64_t oi = 0;
        for (int b = 0; b < n; ++b) {
          for (int ch = 0; ch < c; ++ch) {
            T* gplane = gin.data() + (std::int64_t(b) * c + ch) * h * w;
            for (int y = 0; y < ho; ++y) {
              for (int x = 0; x < wo; ++x, ++oi) {
                int count = 0;
                for (int ki = 0; ki < kernel; ++ki) {
                  const int ii = y * stride - padding + ki;
                  if (ii < 0 || ii >= h) continue;
                  for (int kj = 0; kj < kernel; ++kj) {
                    const int jj = x * stride - padding + kj;
                    if (jj >= 0 && jj < w) ++count;
                  }
                }
                const T share = gout[oi] / static_cast<T>(count);
                for (int ki = 0; ki < kernel; ++ki) {
                  const int ii = y * stride - padding + ki;
                  if (ii < 0 || ii >= h) continue;
                  for (int kj = 0; kj < kernel; ++kj) {
                    const int jj = x * stride - padding + kj;
                    if (jj >= 0 && jj < w) gplane[std::int64_t(ii) * w + jj] += share;
                  }
                }
              }
            }
          }
        }
      });
  return out;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  require(input.ndim() == 4, "global_avg_pool: input must be N x C x H x W");
  const int n = input.dim(0), c = input.dim(1);
  const std::int64_t inner = std::int64_t(input.dim(2)) * input.dim(3);
  TensorT<T> out({n, c});
  for (std::int64_t i = 0; i < std::int64_t(n) * c; ++i) {
    const T* p = input.data() + i * inner;
    T sum = 0;
    for (std::int64_t j = 0; j < inner; ++j) sum += p[j];
    out.data()[i] = sum / static_cast<T>(inner);
  }
  detail::record_op<T>("global_avg_pool", {input}, out, [input, out, inner]() mutable {
    auto gout = out.grad();
    auto gin = input.grad();
    const std::int64_t nc = out.numel();
    for (std::int64_t i = 0; i < nc; ++i) {
      const T share = gout[i] / static_cast<T>(inner);
      T* g = gin.data() + i * inner;
      for (std::int64_t j = 0; j < inner; ++j) g[j] += share;
    }
  });
  return out;
}

template <typename T>
TensorT<T> global_max_pool(const TensorT<T>& input) {
  require(input.ndim() == 4, "global_max_pool: input must be N x C x H x W");
  const int n = input.dim(0), c = input.dim(1);
  const std::int64_t inner = std::int64_t(input.dim(2)) * input.dim(3);
  TensorT<T> out({n, c});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  for (std::int64_t i = 0; i < std::int64_t(n) * c; ++i) {
    const T* p = input.data() + i * inner;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < inner; ++j) {
      if (p[j] > p[best]) best = j;
    }
    out.data()[i] = p[best];
    argmax[i] = i * inner + best;
  }
  detail::record_op<T>("global_max_pool", {input}, out,
                       [input, out, argmax = std::move(argmax)]() mutable {
                         auto gout = out.grad();
                         auto gin = input.grad();
                         for (std::size_t i = 0; i < argmax.size(); ++i) {
                           gin[argmax[i]] += gout[i];
                         }
                       });
  return out;
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.ndim() == b.ndim() && a.ndim() >= 2, "concat_channels: rank mismatch");
  for (int i = 0; i < a.ndim(); ++i) {
    if (i != 1 && a.dim(i) != b.dim(i)) {
      throw std::invalid_argument("concat_channels: non-channel extents differ: " +
                                  shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
  }
  const std::int64_t n = a.dim(0);
  const int ca = a.dim(1), cb = b.dim(1);
  std::int64_t inner = 1;
  for (int i = 2; i < a.ndim(); ++i) inner *= a.dim(i);

  std::vector<int> shape = a.shape();
  shape[1] = ca + cb;
  TensorT<T> out(shape);
  const std::int64_t stride_a = ca * inner, stride_b = cb * inner;
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * stride_a, stride_a,
                out.data() + i * (stride_a + stride_b));
    std::copy_n(b.data() + i * stride_b, stride_b,
                out.data() + i * (stride_a + stride_b) + stride_a);
  }
  detail::record_op<T>("concat_channels", {a, b}, out,
                       [a, b, out, n, stride_a, stride_b]() mutable {
                         auto gout = out.grad();
                         auto ga = a.grad();
                         auto gb = b.grad();
                         for (std::int64_t i = 0; i < n; ++i) {
                           const T* g = gout.data() + i * (stride_a + stride_b);
                           T* pa = ga.data() + i * stride_a;
                           T* pb = gb.data() + i * stride_b;
                           for (std::int64_t j = 0; j < stride_a; ++j) pa[j] += g[j];
                           for (std::int64_t j = 0; j < stride_b; ++j) pb[j] += g[stride_a + j];
                         }
                       });
  return out;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& t, int from, int to) {
  require(t.ndim() >= 2, "slice_channels: rank must be >= 2");
  const int c = t.dim(1);
  if (!(0 <= from && from < to && to <= c)) {
    throw std::invalid_argument("slice_channels: bounds [" + std::to_string(from) + ", " +
                                std::to_string(to) + ") invalid for C=" + std::to_string(c));
  }
  const std::int64_t n = t.dim(0);
  std::int64_t inner = 1;
  for (int i = 2; i < t.ndim(); ++i) inner *= t.dim(i);

  std::vector<int> shape = t.shape();
  shape[1] = to - from;
  TensorT<T> out(shape);
  const std::int64_t in_stride = c * inner, out_stride = std::int64_t(to - from) * inner;
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(t.data() + i * in_stride + from * inner, out_stride,
                out.data() + i * out_stride);
  }
  detail::record_op<T>("slice_channels", {t}, out,
                       [t, out, n, inner, in_stride, out_stride, from]() mutable {
                         auto gout = out.grad();
                         auto gin = t.grad();
                         for (std::int64_t i = 0; i < n; ++i) {
                           const T* g = gout.data() + i * out_stride;
                           T* p = gin.data() + i * in_stride + from * inner;
                           for (std::int64_t j = 0; j < out_stride; ++j) p[j] += g[j];
                         }
                       });
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch: " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::record_op<T>("add", {a, b}, out, [a, b, out]() mutable {
    auto gout = out.grad();
    auto ga = a.grad();
    auto gb = b.grad();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      ga[i] += gout[i];
      gb[i] += gout[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& t, T factor) {
  TensorT<T> out(t.shape());
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = t.data()[i] * factor;
  detail::record_op<T>("scale", {t}, out, [t, out, factor]() mutable {
    auto gout = out.grad();
    auto gin = t.grad();
    for (std::int64_t i = 0; i < out.numel(); ++i) gin[i] += factor * gout[i];
  });
  return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias) {
  require(input.ndim() == 2, "linear: input must be N x C");
  require(weight.ndim() == 2, "linear: weight must be K x C");
  const int n = input.dim(0), c = input.dim(1), k = weight.dim(0);
  if (weight.dim(1) != c || bias.numel() != k) {
    throw std::invalid_argument("linear: dimension mismatch: input " +
                                shape_string(input.shape()) + ", weight " +
                                shape_string(weight.shape()));
  }
  TensorT<T> out({n, k});
  ConstMapRM<T> x(input.data(), n, c);
  ConstMapRM<T> wm(weight.data(), k, c);
  MapRM<T> o(out.data(), n, k);
  o.noalias() = x * wm.transpose();
  for (int i = 0; i < n; ++i) {
    T* row = out.data() + std::int64_t(i) * k;
    for (int j = 0; j < k; ++j) row[j] += bias.values()[j];
  }
  detail::record_op<T>("linear", {input, weight, bias}, out,
                       [input, weight, bias, out, n, c, k]() mutable {
                         auto gout = out.grad();
                         ConstMapRM<T> go(gout.data(), n, k);
                         ConstMapRM<T> x(input.data(), n, c);
                         ConstMapRM<T> wm(weight.data(), k, c);
                         MapRM<T> gx(input.grad().data(), n, c);
                         MapRM<T> gw(weight.grad().data(), k, c);
                         gx.noalias() += go * wm;
                         gw.noalias() += go.transpose() * x;
                         auto gb = bias.grad();
                         for (int i = 0; i < n; ++i) {
                           for (int j = 0; j < k; ++j) gb[j] += gout[std::int64_t(i) * k + j];
                         }
                       });
  return out;
}

template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits,
                                 const std::vector<int>& labels) {
  require(logits.ndim() == 2, "softmax_cross_entropy: logits must be N x K");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  }
  for (int label : labels) {
    if (label < 0 || label >= k) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
  }
  std::vector<T> probs(static_cast<std::size_t>(logits.numel()));
  T loss_sum = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + std::int64_t(i) * k;
    T m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    T z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const T lse = m + std::log(z);
    for (int j = 0; j < k; ++j) {
      probs[std::size_t(i) * k + j] = std::exp(row[j] - lse);
    }
    loss_sum += lse - row[labels[i]];
  }
  TensorT<T> out = TensorT<T>::full({1}, loss_sum / static_cast<T>(n));

  detail::record_op<T>("softmax_cross_entropy", {logits}, out,
                       [logits, out, labels, probs = std::move(probs), n, k]() mutable {
                         const T g = out.grad()[0] / static_cast<T>(n);
                         auto gin = logits.grad();
                         for (int i = 0; i < n; ++i) {
                           for (int j = 0; j < k; ++j) {
                             const std::size_t idx = std::size_t(i) * k + j;
                             T d = probs[idx];
                             if (j == labels[i]) d -= T(1);
                             gin[idx] += g * d;
                           }
                         }
                       });
  return out;
}

template <typename T>
std::vector<T> softmax_values(const TensorT<T>& logits) {
  require(logits.ndim() == 2, "softmax_values: logits must be N x K");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<T> probs(static_cast<std::size_t>(logits.numel()));
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + std::int64_t(i) * k;
    T m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    T z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
    for (int j = 0; j < k; ++j) {
      probs[std::size_t(i) * k + j] = std::exp(row[j] - m) / z;
    }
  }
  return probs;
}

template <typename T>
TensorT<T> conv2d_input_slice(const TensorT<T>& input, const TensorT<T>& weight,
                              int in_offset, int stride) {
  require(input.ndim() == 4, "conv2d_input_slice: input must be N x C x H x W");
  require(weight.ndim() == 4 && weight.dim(2) == 1 && weight.dim(3) == 1,
          "conv2d_input_slice: weight must be Cout x Cin x 1 x 1");
  require(stride >= 1, "conv2d_input_slice: stride must be positive");
  const int n = input.dim(0), sub = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), cin_full = weight.dim(1);
  if (in_offset < 0 || in_offset + sub > cin_full) {
    throw std::invalid_argument("conv2d_input_slice: slice exceeds weight input channels");
  }
  const int ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  const std::int64_t opix = std::int64_t(ho) * wo;
  const bool unit = stride == 1;

  using StridedConstMap =
      Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;
  using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;

  TensorT<T> out({n, cout, ho, wo});
  std::vector<T> col;
  if (!unit) col.resize(static_cast<std::size_t>(sub) * opix);
  StridedConstMap wmat(weight.data() + in_offset, cout, sub,
                       Eigen::OuterStride<>(cin_full));
  for (int b = 0; b < n; ++b) {
    const T* in_base = input.data() + std::int64_t(b) * sub * h * w;
    const T* col_ptr = in_base;
    if (!unit) {
      im2col(in_base, sub, h, w, 1, 1, stride, stride, 0, 0, ho, wo, col.data());
      col_ptr = col.data();
    }
    ConstMapRM<T> cmat(col_ptr, sub, opix);
    MapRM<T> omat(out.data() + std::int64_t(b) * cout * opix, cout, opix);
    omat.noalias() = wmat * cmat;
  }

  detail::record_op<T>(
      "conv2d_input_slice", {input, weight}, out,
      [input, weight, out, in_offset, stride]() mutable {
        const int n = input.dim(0), sub = input.dim(1), h = input.dim(2), w = input.dim(3);
        const int cout = weight.dim(0), cin_full = weight.dim(1);
        const int ho = out.dim(2), wo = out.dim(3);
        const std::int64_t opix = std::int64_t(ho) * wo;
        const bool unit = stride == 1;
        auto gout = out.grad();
        auto gin = input.grad();
        auto gw = weight.grad();
        StridedConstMap wmat(weight.data() + in_offset, cout, sub,
                             Eigen::OuterStride<>(cin_full));
        StridedMap gwmat(gw.data() + in_offset, cout, sub,
                         Eigen::OuterStride<>(cin_full));
        std::vector<T> col, dcol;
        if (!unit) {
          col.resize(static_cast<std::size_t>(sub) * opix);
          dcol.resize(static_cast<std::size_t>(sub) * opix);
        }
        for (int b = 0; b < n; ++b) {
          const std::int64_t in_off = std::int64_t(b) * sub * h * w;
          ConstMapRM<T> gomat(gout.data() + std::int64_t(b) * cout * opix, cout, opix);
          if (unit) {
            ConstMapRM<T> cmat(input.data() + in_off, sub, opix);
            gwmat.noalias() += gomat * cmat.transpose();
            MapRM<T> gimat(gin.data() + in_off, sub, opix);
            gimat.noalias() += wmat.transpose() * gomat;
          } else {
            im2col(input.data() + in_off, sub, h, w, 1, 1, stride, stride, 0, 0,
                   ho, wo, col.data());
            ConstMapRM<T> cmat(col.data(), sub, opix);
            gwmat.noalias() += gomat * cmat.transpose();
            MapRM<T> dcmat(dcol.data(), sub, opix);
            dcmat.noalias() = wmat.transpose() * gomat;
            col2im_add(dcol.data(), sub, h, w, 1, 1, stride, stride, 0, 0, ho, wo,
                       gin.data() + in_off);
          }
        }
      });
  return out;
}

template <typename T>
TensorT<T> batch_norm_channels(const TensorT<T>& input, const TensorT<T>& gamma,
                               const TensorT<T>& beta, int offset, T epsilon) {
  const auto [n, c, inner] = channel_dims(input, "batch_norm_channels");
  if (offset < 0 || offset + c > gamma.numel() || gamma.numel() != beta.numel()) {
    throw std::invalid_argument("batch_norm_channels: channel block exceeds gamma/beta");
  }
  require(epsilon > T(0), "batch_norm_channels: epsilon must be positive");
  const std::int64_t m = n * inner;

  std::vector<T> mean(c), invstd(c);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T sum = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* p = input.data() + (b * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) sum += p[i];
    }
    const T mu = sum / static_cast<T>(m);
    T sq = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* p = input.data() + (b * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const T d = p[i] - mu;
        sq += d * d;
      }
    }
    mean[ch] = mu;
    invstd[ch] = T(1) / std::sqrt(sq / static_cast<T>(m) + epsilon);
  }

  TensorT<T> out(input.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = input.data() + (b * c + ch) * inner;
      T* q = out.data() + (b * c + ch) * inner;
      const T g = gamma.values()[offset + ch], bt = beta.values()[offset + ch];
      const T mu = mean[ch], is = invstd[ch];
      for (std::int64_t i = 0; i < inner; ++i) q[i] = (p[i] - mu) * is * g + bt;
    }
  }

  detail::record_op<T>(
      "batch_norm_channels", {input, gamma, beta}, out,
      [input, gamma, beta, out, offset, mean, invstd, n = n, c = c, inner = inner]() mutable {
        const std::int64_t m = n * inner;
        auto gout = out.grad();
        auto gin = input.grad();
        auto ggamma = gamma.grad();
        auto gbeta = beta.grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = mean[ch], is = invstd[ch], g = gamma.values()[offset + ch];
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * inner;
            const T* x = input.data() + off;
            const T* dy = gout.data() + off;
            for (std::int64_t i = 0; i < inner; ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (x[i] - mu) * is;
            }
          }
          ggamma[offset + ch] += sum_dy_xhat;
          gbeta[offset + ch] += sum_dy;
          const T k = g * is / static_cast<T>(m);
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * inner;
            const T* x = input.data() + off;
            const T* dy = gout.data() + off;
            T* dx = gin.data() + off;
            for (std::int64_t i = 0; i < inner; ++i) {
              const T xhat = (x[i] - mu) * is;
              dx[i] += k * (static_cast<T>(m) * dy[i] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        }
      });
  return out;
}

template <typename T>
TensorT<T> linear_input_slice(const TensorT<T>& input, const TensorT<T>& weight,
                              int in_offset, const TensorT<T>& bias) {
  require(input.ndim() == 2, "linear_input_slice: input must be N x C");
  require(weight.ndim() == 2, "linear_input_slice: weight must be K x C");
  const int n = input.dim(0), sub = input.dim(1), k = weight.dim(0);
  const int cfull = weight.dim(1);
  if (in_offset < 0 || in_offset + sub > cfull) {
    throw std::invalid_argument("linear_input_slice: slice exceeds weight input channels");
  }
  const bool with_bias = bias.defined();
  if (with_bias && bias.numel() != k) {
    throw std::invalid_argument("linear_input_slice: bias length mismatch");
  }

  using StridedConstMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;
  using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;

  TensorT<T> out({n, k});
  ConstMapRM<T> x(input.data(), n, sub);
  StridedConstMap wm(weight.data() + in_offset, k, sub, Eigen::OuterStride<>(cfull));
  MapRM<T> o(out.data(), n, k);
  o.noalias() = x * wm.transpose();
  if (with_bias) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) out.data()[std::int64_t(i) * k + j] += bias.values()[j];
    }
  }

  std::vector<TensorT<T>> ins = {input, weight};
  if (with_bias) ins.push_back(bias);
  detail::record_op<T>(
      "linear_input_slice", std::move(ins), out,
      [input, weight, bias, out, in_offset, with_bias, n, sub, k, cfull]() mutable {
        auto gout = out.grad();
        ConstMapRM<T> go(gout.data(), n, k);
        ConstMapRM<T> x(input.data(), n, sub);
        StridedConstMap wm(weight.data() + in_offset, k, sub, Eigen::OuterStride<>(cfull));
        MapRM<T> gx(input.grad().data(), n, sub);
        StridedMap gw(weight.grad().data() + in_offset, k, sub, Eigen::OuterStride<>(cfull));
        gx.noalias() += go * wm;
        gw.noalias() += go.transpose() * x;
        if (with_bias) {
          auto gb = bias.grad();
          for (int i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) gb[j] += gout[std::int64_t(i) * k + j];
          }
        }
      });
  return out;
}

#define DPN_INSTANTIATE_OPS(T)                                                        \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&,                 \
                                std::pair<int, int>, std::pair<int, int>, int);       \
  template TensorT<T> batch_norm<T>(const TensorT<T>&, const TensorT<T>&,             \
                                    const TensorT<T>&, TensorT<T>&, TensorT<T>&,      \
                                    bool, T, T);                                      \
  template TensorT<T> batch_norm_batch_stats<T>(const TensorT<T>&, const TensorT<T>&, \
                                                const TensorT<T>&, T);                \
  template TensorT<T> relu<T>(const TensorT<T>&);                                     \
  template TensorT<T> max_pool2d<T>(const TensorT<T>&, int, int, int);                \
  template TensorT<T> avg_pool2d<T>(const TensorT<T>&, int, int, int);                \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                          \
  template TensorT<T> global_max_pool<T>(const TensorT<T>&);                          \
  template TensorT<T> concat_channels<T>(const TensorT<T>&, const TensorT<T>&);       \
  template TensorT<T> slice_channels<T>(const TensorT<T>&, int, int);                 \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                   \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                                 \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&,                 \
                                const TensorT<T>&);                                   \
  template TensorT<T> softmax_cross_entropy<T>(const TensorT<T>&,                     \
                                               const std::vector<int>&);              \
  template std::vector<T> softmax_values<T>(const TensorT<T>&);                       \
  template TensorT<T> conv2d_input_slice<T>(const TensorT<T>&, const TensorT<T>&,     \
                                            int, int);                                \
  template TensorT<T> batch_norm_channels<T>(const TensorT<T>&, const TensorT<T>&,    \
                                             const TensorT<T>&, int, T);              \
  template TensorT<T> linear_input_slice<T>(const TensorT<T>&, const TensorT<T>&,     \
                                            int, const TensorT<T>&);

DPN_INSTANTIATE_OPS(float)
DPN_INSTANTIATE_OPS(double)

#undef DPN_INSTANTIATE_OPS

}  // namespace dpn
