#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r3cnn/rng.hpp"
#include "r3cnn/tensor.hpp"

namespace r3cnn {

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  void resize(std::vector<std::size_t> shape) {
    value = Tensor<T>(shape);
    grad = Tensor<T>(std::move(shape));
  }
  std::size_t size() const { return value.size(); }
};

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Param<T>&)>;

// ---------------------------------------------------------------------------
// im2col / col2im for CHW single-image convolution
// ---------------------------------------------------------------------------

template <typename T>
inline void im2col(const Tensor<T>& x, std::size_t k, std::size_t stride,
                   std::size_t pad, Tensor<T>& cols) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t K = C * k * k, L = Ho * Wo;
  if (cols.shape != std::vector<std::size_t>{K, L}) cols = Tensor<T>({K, L});
  const T* src = x.ptr();
  T* dst = cols.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = dst + ((c * k + ki) * k + kj) * L;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) -
              static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(row + oi * Wo, row + (oi + 1) * Wo, T(0));
            continue;
          }
          const T* srow = src + (c * H + ii) * W;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                static_cast<std::ptrdiff_t>(pad);
            row[oi * Wo + oj] =
                (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) ? T(0)
                                                                 : srow[jj];
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im(const Tensor<T>& cols, std::size_t C, std::size_t H,
                   std::size_t W, std::size_t k, std::size_t stride,
                   std::size_t pad, Tensor<T>& x) {
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t L = Ho * Wo;
  if (x.shape != std::vector<std::size_t>{C, H, W}) x = Tensor<T>({C, H, W});
  x.zero();
  const T* src = cols.ptr();
  T* dst = x.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = src + ((c * k + ki) * k + kj) * L;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) -
              static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          T* drow = dst + (c * H + ii) * W;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                static_cast<std::ptrdiff_t>(pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            drow[jj] += row[oi * Wo + oj];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Layers. Layers own parameters only; activations are passed back into
// backward() by the caller, so a layer can be applied several times per step
// (the whole point of the loop architecture).
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
         std::size_t stride, std::size_t pad)
      : in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad) {
    w_.resize({out_ch, in_ch * k * k});
    b_.resize({out_ch});
  }

  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_ch_ * k_ * k_));
    for (auto& v : w_.value.data) v = static_cast<T>(rng.normal(0.0, std));
    b_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 3 || x.dim(0) != in_ch_) {
      throw std::invalid_argument("Conv2d: expected [" +
                                  std::to_string(in_ch_) + "xHxW], got " +
                                  x.shape_str());
    }
    const std::size_t H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = (H + 2 * pad_ - k_) / stride_ + 1;
    const std::size_t Wo = (W + 2 * pad_ - k_) / stride_ + 1;
    Tensor<T> cols;
    im2col(x, k_, stride_, pad_, cols);
    Tensor<T> y({out_ch_, Ho, Wo});
    const std::size_t K = in_ch_ * k_ * k_, L = Ho * Wo;
    ConstMatMap<T> Wm(w_.value.ptr(), out_ch_, K);
    ConstMatMap<T> Cm(cols.ptr(), K, L);
    MatMap<T> Ym(y.ptr(), out_ch_, L);
    Ym.noalias() = Wm * Cm;
    for (std::size_t c = 0; c < out_ch_; ++c)
      Ym.row(c).array() += b_.value[c];
    return y;
  }

  // Accumulates parameter gradients, returns dL/dx.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = dy.dim(1), Wo = dy.dim(2);
    const std::size_t K = in_ch_ * k_ * k_, L = Ho * Wo;
    Tensor<T> cols;
    im2col(x, k_, stride_, pad_, cols);
    ConstMatMap<T> Cm(cols.ptr(), K, L);
    ConstMatMap<T> dYm(dy.ptr(), out_ch_, L);
    MatMap<T> dWm(w_.grad.ptr(), out_ch_, K);
    dWm.noalias() += dYm * Cm.transpose();
    for (std::size_t c = 0; c < out_ch_; ++c)
      b_.grad[c] += dYm.row(c).sum();
    Tensor<T> dcols({K, L});
    MatMap<T> dCm(dcols.ptr(), K, L);
    ConstMatMap<T> Wm(w_.value.ptr(), out_ch_, K);
    dCm.noalias() = Wm.transpose() * dYm;
    Tensor<T> dx;
    col2im(dcols, in_ch_, H, W, k_, stride_, pad_, dx);
    return dx;
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", w_);
    fn(prefix + ".bias", b_);
  }

  std::size_t stride() const { return stride_; }
  std::size_t out_channels() const { return out_ch_; }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Param<T> w_, b_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out) : in_(in), out_(out) {
    w_.resize({out, in});
    b_.resize({out});
  }

  void init(Rng& rng, double gain = 2.0) {
    const double std = std::sqrt(gain / static_cast<double>(in_));
    for (auto& v : w_.value.data) v = static_cast<T>(rng.normal(0.0, std));
    b_.value.zero();
  }

  // x: [N, in] -> [N, out]
  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 2 || x.dim(1) != in_) {
      throw std::invalid_argument("Linear: expected [Nx" + std::to_string(in_) +
                                  "], got " + x.shape_str());
    }
    const std::size_t N = x.dim(0);
    Tensor<T> y({N, out_});
    ConstMatMap<T> Xm(x.ptr(), N, in_);
    ConstMatMap<T> Wm(w_.value.ptr(), out_, in_);
    MatMap<T> Ym(y.ptr(), N, out_);
    Ym.noalias() = Xm * Wm.transpose();
    Ym.rowwise() += ConstMatMap<T>(b_.value.ptr(), 1, out_).row(0);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t N = x.dim(0);
    ConstMatMap<T> Xm(x.ptr(), N, in_);
    ConstMatMap<T> dYm(dy.ptr(), N, out_);
    MatMap<T> dWm(w_.grad.ptr(), out_, in_);
    dWm.noalias() += dYm.transpose() * Xm;
    MatMap<T> dBm(b_.grad.ptr(), 1, out_);
    dBm.row(0) += dYm.colwise().sum();
    Tensor<T> dx({N, in_});
    ConstMatMap<T> Wm(w_.value.ptr(), out_, in_);
    MatMap<T> dXm(dx.ptr(), N, in_);
    dXm.noalias() = dYm * Wm;
    return dx;
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", w_);
    fn(prefix + ".bias", b_);
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param<T> w_, b_;
};

// 2x upsampling transposed convolution, kernel 2, stride 2.
template <typename T>
class ConvTranspose2x {
 public:
  ConvTranspose2x() = default;
  ConvTranspose2x(std::size_t in_ch, std::size_t out_ch)
      : in_ch_(in_ch), out_ch_(out_ch) {
    w_.resize({in_ch, out_ch * 4});
    b_.resize({out_ch});
  }

  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_ch_ * 4));
    for (auto& v : w_.value.data) v = static_cast<T>(rng.normal(0.0, std));
    b_.value.zero();
  }

  // x: [Cin, H, W] -> [Cout, 2H, 2W]
  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t H = x.dim(1), W = x.dim(2), L = H * W;
    Tensor<T> ycols({out_ch_ * 4, L});
    ConstMatMap<T> Wm(w_.value.ptr(), in_ch_, out_ch_ * 4);
    ConstMatMap<T> Xm(x.ptr(), in_ch_, L);
    MatMap<T> Ym(ycols.ptr(), out_ch_ * 4, L);
    Ym.noalias() = Wm.transpose() * Xm;
    Tensor<T> y({out_ch_, 2 * H, 2 * W});
    for (std::size_t co = 0; co < out_ch_; ++co) {
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t b = 0; b < 2; ++b) {
          const T* row = ycols.ptr() + ((co * 2 + a) * 2 + b) * L;
          for (std::size_t i = 0; i < H; ++i) {
            T* drow = y.ptr() + (co * 2 * H + 2 * i + a) * 2 * W + b;
            for (std::size_t j = 0; j < W; ++j)
              drow[2 * j] = row[i * W + j] + b_.value[co];
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t H = x.dim(1), W = x.dim(2), L = H * W;
    Tensor<T> dycols({out_ch_ * 4, L});
    for (std::size_t co = 0; co < out_ch_; ++co) {
      T bsum = 0;
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t b = 0; b < 2; ++b) {
          T* row = dycols.ptr() + ((co * 2 + a) * 2 + b) * L;
          for (std::size_t i = 0; i < H; ++i) {
            const T* srow = dy.ptr() + (co * 2 * H + 2 * i + a) * 2 * W + b;
            for (std::size_t j = 0; j < W; ++j) {
              row[i * W + j] = srow[2 * j];
              bsum += srow[2 * j];
            }
          }
        }
      }
      b_.grad[co] += bsum;
    }
    ConstMatMap<T> Xm(x.ptr(), in_ch_, L);
    ConstMatMap<T> dYm(dycols.ptr(), out_ch_ * 4, L);
    MatMap<T> dWm(w_.grad.ptr(), in_ch_, out_ch_ * 4);
    dWm.noalias() += Xm * dYm.transpose();
    Tensor<T> dx({in_ch_, H, W});
    ConstMatMap<T> Wm(w_.value.ptr(), in_ch_, out_ch_ * 4);
    MatMap<T> dXm(dx.ptr(), in_ch_, L);
    dXm.noalias() = Wm * dYm;
    return dx;
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", w_);
    fn(prefix + ".bias", b_);
  }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0;
  Param<T> w_, b_;
};

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data)
    if (v < T(0)) v = T(0);
  return y;
}

template <typename T>
inline Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  check_same_shape(x, dy, "relu_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] <= T(0)) dx[i] = T(0);
  return dx;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------

template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Param<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    for (Param<T>* p : params_) velocity_.emplace_back(p->value.shape);
  }

  void zero_grad() {
    for (Param<T>* p : params_) p->grad.zero();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = *params_[i];
      Tensor<T>& v = velocity_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T g = p.grad[j] + static_cast<T>(weight_decay_) * p.value[j];
        v[j] = static_cast<T>(momentum_) * v[j] + g;
        p.value[j] -= static_cast<T>(lr) * v[j];
      }
    }
  }

 private:
  std::vector<Param<T>*> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_, weight_decay_;
};

// ---------------------------------------------------------------------------
// Checkpoint archive: binary, keyed by hierarchical parameter path.
// Layout: magic "R3CK" | u32 version | u64 count | entries.
// Entry: u32 name_len | name | u32 scalar_bytes | u32 ndim | u64 dims | data.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
inline void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, const Tensor<T>*>>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
  auto put_u32 = [&](std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  };
  auto put_u64 = [&](std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  };
  f.write("R3CK", 4);
  put_u32(kCheckpointVersion);
  put_u64(entries.size());
  for (const auto& [name, t] : entries) {
    put_u32(static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(static_cast<std::uint32_t>(sizeof(T)));
    put_u32(static_cast<std::uint32_t>(t->ndim()));
    for (std::size_t d : t->shape) put_u64(d);
    f.write(reinterpret_cast<const char*>(t->ptr()),
            static_cast<std::streamsize>(t->size() * sizeof(T)));
  }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename T>
inline std::map<std::string, Tensor<T>> load_checkpoint(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "R3CK", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto get_u64 = [&] {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  const std::uint32_t version = get_u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  const std::uint64_t count = get_u64();
  std::map<std::string, Tensor<T>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = get_u32();
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    const std::uint32_t sbytes = get_u32();
    if (sbytes != sizeof(T))
      throw std::runtime_error("checkpoint scalar width mismatch for key '" +
                               name + "'");
    const std::uint32_t ndim = get_u32();
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(get_u64());
    Tensor<T> t(shape);
    f.read(reinterpret_cast<char*>(t.ptr()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace r3cnn
