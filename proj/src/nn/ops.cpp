#include "ivf/nn/ops.hpp"

#include <cmath>
#include <memory>
#include <numeric>

#include <Eigen/Core>

namespace ivf::nn {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using CVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using Vec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

template <class T>
void accumulate(Tape<T>& tape, const Var<T>& target, const Tensor<T>& delta) {
  if (!tape.requires_grad(target.id())) return;
  auto& g = tape.grad(target.id());
  Vec<T>(g.data(), static_cast<Eigen::Index>(g.numel())) +=
      CVec<T>(delta.data(), static_cast<Eigen::Index>(delta.numel()));
}

// Applies f(index) -> source index mapping: out[i] = in[src(i)].
template <class T, class F>
Tensor<T> gather(const Tensor<T>& in, Shape out_shape, F&& src) {
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = in[src(i)];
  return out;
}

// Inverse of gather: out[src(i)] += in[i].
template <class T, class F>
Tensor<T> scatter(const Tensor<T>& in, Shape out_shape, F&& src) {
  Tensor<T> out(std::move(out_shape), T(0));
  for (std::size_t i = 0; i < in.numel(); ++i) out[src(i)] += in[i];
  return out;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * static_cast<std::size_t>(s[i]);
  return st;
}

template <class T>
Tensor<T> permute_tensor(const Tensor<T>& in, const std::vector<int>& perm) {
  const Shape& s = in.shape();
  const std::size_t rank = s.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[static_cast<std::size_t>(perm[i])];
  const auto in_strides = strides_of(s);
  const auto out_strides = strides_of(out_shape);
  return gather(in, out_shape, [&](std::size_t i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t idx = (i / out_strides[d]) % static_cast<std::size_t>(out_shape[d]);
      src += idx * in_strides[static_cast<std::size_t>(perm[d])];
    }
    return src;
  });
}

Shape with_last(Shape s, int last) {
  s.back() = last;
  return s;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  Vec<T>(out.data(), static_cast<Eigen::Index>(out.numel())) +=
      CVec<T>(b.value().data(), static_cast<Eigen::Index>(out.numel()));
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, a, g);
    accumulate(tape, b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, a, g);
    if (tape.requires_grad(b.id())) {
      auto& gb = tape.grad(b.id());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (tape.requires_grad(a.id())) {
      auto& ga = tape.grad(a.id());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b.id())) {
      auto& gb = tape.grad(b.id());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    auto& ga = tape.grad(a.id());
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += factor * g[i];
  });
}

template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const int c = x.dim(-1);
  if (bias.value().numel() != static_cast<std::size_t>(c))
    throw InvalidArgument("add_bias: bias of " + shape_string(bias.shape()) + " for input " + shape_string(x.shape()));
  Tensor<T> out = x.value();
  const auto& b = bias.value();
  const std::size_t rows = out.numel() / static_cast<std::size_t>(c);
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) out[r * c + j] += b[static_cast<std::size_t>(j)];
  return x.tape().record(std::move(out), {x, bias}, [x, bias, rows, c](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, x, g);
    if (tape.requires_grad(bias.id())) {
      auto& gb = tape.grad(bias.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += g[r * c + j];
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& x = a.value();
    auto& ga = tape.grad(a.id());
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return a.tape().record(std::move(out), {a}, [a, inv_sqrt2](Tape<T>& tape, std::size_t self) {
    const T inv_sqrt2pi = T(0.39894228040143267794);
    const auto& g = tape.grad(self);
    const auto& x = a.value();
    auto& ga = tape.grad(a.id());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  const auto& v = a.value();
  T total = T(0);
  for (T x : v.values()) total += x;
  return a.tape().record(Tensor<T>::scalar(total), {a}, [a](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    auto& ga = tape.grad(a.id());
    for (auto& x : ga.values()) x += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Tensor<T>& target) {
  if (a.shape() != target.shape())
    throw InvalidArgument("mean_abs_diff: shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(target.shape()));
  const auto& v = a.value();
  const std::size_t n = v.numel();
  std::vector<T> sign(n);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = v[i] - target[i];
    total += std::abs(d);
    sign[i] = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return a.tape().record(Tensor<T>::scalar(total * inv_n), {a},
                         [a, sign = std::move(sign), inv_n](Tape<T>& tape, std::size_t self) {
                           const T g = tape.grad(self)[0] * inv_n;
                           auto& ga = tape.grad(a.id());
                           for (std::size_t i = 0; i < sign.size(); ++i) ga[i] += g * sign[i];
                         });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, a, g.reshaped(a.shape()));
  });
}

template <class T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm) {
  const int rank = a.value().ndim();
  if (static_cast<int>(perm.size()) != rank) throw InvalidArgument("permute: permutation rank mismatch");
  std::vector<int> inverse(perm.size());
  std::vector<bool> seen(perm.size(), false);
  for (int i = 0; i < rank; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)]) throw InvalidArgument("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
    inverse[static_cast<std::size_t>(p)] = i;
  }
  Tensor<T> out = permute_tensor(a.value(), perm);
  return a.tape().record(std::move(out), {a}, [a, inverse](Tape<T>& tape, std::size_t self) {
    accumulate(tape, a, permute_tensor(tape.grad(self), inverse));
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const Shape& first = parts.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw InvalidArgument("concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw InvalidArgument("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[static_cast<std::size_t>(d)] != first[static_cast<std::size_t>(d)])
        throw InvalidArgument("concat: shape mismatch " + shape_string(s) + " vs " + shape_string(first));
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);
  const std::size_t out_block = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]) * inner;

  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = static_cast<std::size_t>(p.dim(axis)) * inner;
    const auto& v = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * block, block, out.data() + o * out_block + offset);
    offset += block;
  }
  return parts.front().tape().record(
      std::move(out), parts, [parts, offsets, outer, inner, out_block, axis](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!tape.requires_grad(parts[i].id())) continue;
          auto& gp = tape.grad(parts[i].id());
          const std::size_t block = static_cast<std::size_t>(parts[i].dim(axis)) * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * out_block + offsets[i];
            T* dst = gp.data() + o * block;
            for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
          }
        }
      });
}

template <class T>
Var<T> narrow(const Var<T>& a, int axis, int start, int length) {
  const Shape& s = a.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw InvalidArgument("narrow: axis out of range");
  if (start < 0 || length <= 0 || start + length > s[static_cast<std::size_t>(axis)])
    throw InvalidArgument("narrow: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
  const std::size_t in_block = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]) * inner;
  const std::size_t out_block = static_cast<std::size_t>(length) * inner;
  const std::size_t skip = static_cast<std::size_t>(start) * inner;
  Shape out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = length;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + o * in_block + skip, out_block, out.data() + o * out_block);
  return a.tape().record(std::move(out), {a},
                         [a, outer, in_block, out_block, skip](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad(self);
                           auto& ga = tape.grad(a.id());
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < out_block; ++j)
                               ga[o * in_block + skip + j] += g[o * out_block + j];
                         });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (weight.value().ndim() != 2) throw InvalidArgument("linear: weight must be [out, in]");
  const int out_f = weight.dim(0);
  const int in_f = weight.dim(1);
  if (x.dim(-1) != in_f)
    throw InvalidArgument("linear: input features " + std::to_string(x.dim(-1)) + " vs weight " +
                          shape_string(weight.shape()));
  if (bias.value().numel() != static_cast<std::size_t>(out_f)) throw InvalidArgument("linear: bias size mismatch");
  const auto rows = static_cast<Eigen::Index>(x.value().numel() / static_cast<std::size_t>(in_f));
  Tensor<T> out(with_last(x.shape(), out_f));
  {
    CMapR<T> X(x.value().data(), rows, in_f);
    CMapR<T> W(weight.value().data(), out_f, in_f);
    MapR<T> Y(out.data(), rows, out_f);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += CVec<T>(bias.value().data(), out_f).transpose();
  }
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias, rows, in_f, out_f](Tape<T>& tape, std::size_t self) {
                           CMapR<T> G(tape.grad(self).data(), rows, out_f);
                           if (tape.requires_grad(x.id()))
                             MapR<T>(tape.grad(x.id()).data(), rows, in_f).noalias() +=
                                 G * CMapR<T>(weight.value().data(), out_f, in_f);
                           if (tape.requires_grad(weight.id()))
                             MapR<T>(tape.grad(weight.id()).data(), out_f, in_f).noalias() +=
                                 G.transpose() * CMapR<T>(x.value().data(), rows, in_f);
                           if (tape.requires_grad(bias.id())) {
                             auto& gb = tape.grad(bias.id());
                             for (Eigen::Index r = 0; r < rows; ++r)
                               for (int o = 0; o < out_f; ++o) gb[static_cast<std::size_t>(o)] += G(r, o);
                           }
                         });
}

template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b) {
  if (a.value().ndim() != 3 || b.value().ndim() != 3) throw InvalidArgument("bmm: operands must be rank 3");
  const int batch = a.dim(0);
  const int n = a.dim(1);
  const int k = a.dim(2);
  const int m = transpose_b ? b.dim(1) : b.dim(2);
  const int bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k)
    throw InvalidArgument("bmm: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor<T> out({batch, n, m});
  const std::size_t sa = static_cast<std::size_t>(n) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * m;
  const std::size_t sc = static_cast<std::size_t>(n) * m;
  for (int i = 0; i < batch; ++i) {
    CMapR<T> A(a.value().data() + i * sa, n, k);
    MapR<T> C(out.data() + i * sc, n, m);
    if (transpose_b)
      C.noalias() = A * CMapR<T>(b.value().data() + i * sb, m, k).transpose();
    else
      C.noalias() = A * CMapR<T>(b.value().data() + i * sb, k, m);
  }
  return a.tape().record(std::move(out), {a, b},
                         [a, b, transpose_b, batch, n, k, m, sa, sb, sc](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad(self);
                           const bool ga = tape.requires_grad(a.id());
                           const bool gb = tape.requires_grad(b.id());
                           for (int i = 0; i < batch; ++i) {
                             CMapR<T> G(g.data() + i * sc, n, m);
                             CMapR<T> A(a.value().data() + i * sa, n, k);
                             if (transpose_b) {
                               CMapR<T> Bt(b.value().data() + i * sb, m, k);
                               if (ga) MapR<T>(tape.grad(a.id()).data() + i * sa, n, k).noalias() += G * Bt;
                               if (gb)
                                 MapR<T>(tape.grad(b.id()).data() + i * sb, m, k).noalias() += G.transpose() * A;
                             } else {
                               CMapR<T> B(b.value().data() + i * sb, k, m);
                               if (ga)
                                 MapR<T>(tape.grad(a.id()).data() + i * sa, n, k).noalias() += G * B.transpose();
                               if (gb)
                                 MapR<T>(tape.grad(b.id()).data() + i * sb, k, m).noalias() += A.transpose() * G;
                             }
                           }
                         });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int d = x.dim(-1);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor<T> out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * static_cast<std::size_t>(d);
    const T mx = *std::max_element(row, row + d);
    T total = 0;
    for (int j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (int j = 0; j < d; ++j) row[j] /= total;
  }
  return out;
}

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  Tensor<T> out = softmax_rows(x.value());
  return x.tape().record(std::move(out), {x}, [x](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& y = tape.value(self);
    auto& gx = tape.grad(x.id());
    const int d = y.dim(-1);
    const std::size_t rows = y.numel() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * static_cast<std::size_t>(d);
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += g[base + j] * y[base + j];
      for (int j = 0; j < d; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int d = x.dim(-1);
  if (gamma.value().numel() != static_cast<std::size_t>(d) || beta.value().numel() != static_cast<std::size_t>(d))
    throw InvalidArgument("layer_norm: affine parameter size mismatch");
  const std::size_t rows = x.value().numel() / static_cast<std::size_t>(d);
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().numel());
  std::vector<T> rstd(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xv[base + j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xv[base + j] - mu) * (xv[base + j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      xhat[base + j] = (xv[base + j] - mu) * rstd[r];
      out[base + j] = xhat[base + j] * gamma.value()[static_cast<std::size_t>(j)] +
                      beta.value()[static_cast<std::size_t>(j)];
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& gv = gamma.value();
        const bool need_x = tape.requires_grad(x.id());
        const bool need_g = tape.requires_grad(gamma.id());
        const bool need_b = tape.requires_grad(beta.id());
        std::vector<T> dxhat(static_cast<std::size_t>(d));
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * static_cast<std::size_t>(d);
          if (need_g) {
            auto& gg = tape.grad(gamma.id());
            for (int j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += g[base + j] * xhat[base + j];
          }
          if (need_b) {
            auto& gb = tape.grad(beta.id());
            for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += g[base + j];
          }
          if (!need_x) continue;
          T m1 = 0, m2 = 0;
          for (int j = 0; j < d; ++j) {
            dxhat[static_cast<std::size_t>(j)] = g[base + j] * gv[static_cast<std::size_t>(j)];
            m1 += dxhat[static_cast<std::size_t>(j)];
            m2 += dxhat[static_cast<std::size_t>(j)] * xhat[base + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          auto& gx = tape.grad(x.id());
          for (int j = 0; j < d; ++j)
            gx[base + j] += rstd[r] * (dxhat[static_cast<std::size_t>(j)] - m1 - xhat[base + j] * m2);
        }
      });
}

namespace {

// Column matrix [C k k, H W] of zero-padded receptive fields.
template <class T>
std::vector<T> im2col(const Tensor<T>& x, int k) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int pad = (k - 1) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> col(static_cast<std::size_t>(c) * k * k * hw, T(0));
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            row[static_cast<std::size_t>(y) * w + xx] = x.at(ci, sy, sx);
          }
        }
      }
  return col;
}

template <class T>
void col2im_add(const T* col, Tensor<T>& dx, int k) {
  const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  const int pad = (k - 1) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            dx.at(ci, sy, sx) += row[static_cast<std::size_t>(y) * w + xx];
          }
        }
      }
}

}  // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.value().ndim() != 3) throw InvalidArgument("conv2d: input must be [C, H, W]");
  if (weight.value().ndim() != 4) throw InvalidArgument("conv2d: weight must be [Co, Ci, k, k]");
  const int co = weight.dim(0), ci = weight.dim(1), k = weight.dim(2);
  if (weight.dim(3) != k || k % 2 == 0) throw InvalidArgument("conv2d: kernel must be square and odd");
  if (x.dim(0) != ci)
    throw InvalidArgument("conv2d: input channels " + std::to_string(x.dim(0)) + " vs weight " +
                          shape_string(weight.shape()));
  if (bias.value().numel() != static_cast<std::size_t>(co)) throw InvalidArgument("conv2d: bias size mismatch");
  const int h = x.dim(1), w = x.dim(2);
  const auto hw = static_cast<Eigen::Index>(h) * w;
  const auto kk = static_cast<Eigen::Index>(ci) * k * k;

  std::shared_ptr<const std::vector<T>> col;
  const T* col_data = x.value().data();
  if (k > 1) {
    col = std::make_shared<const std::vector<T>>(im2col(x.value(), k));
    col_data = col->data();
  }
  Tensor<T> out({co, h, w});
  {
    MapR<T> Y(out.data(), co, hw);
    Y.noalias() = CMapR<T>(weight.value().data(), co, kk) * CMapR<T>(col_data, kk, hw);
    Y.colwise() += CVec<T>(bias.value().data(), co);
  }
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias, col, co, kk, hw, k](Tape<T>& tape, std::size_t self) {
                           CMapR<T> G(tape.grad(self).data(), co, hw);
                           const T* cd = col ? col->data() : x.value().data();
                           if (tape.requires_grad(weight.id()))
                             MapR<T>(tape.grad(weight.id()).data(), co, kk).noalias() +=
                                 G * CMapR<T>(cd, kk, hw).transpose();
                           if (tape.requires_grad(bias.id())) {
                             auto& gb = tape.grad(bias.id());
                             for (int o = 0; o < co; ++o) {
                               T acc = T(0);
                               for (int i = 0; i < hw; ++i) acc += G(o, i);
                               gb[static_cast<std::size_t>(o)] += acc;
                             }
                           }
                           if (tape.requires_grad(x.id())) {
                             CMapR<T> W(weight.value().data(), co, kk);
                             if (k == 1) {
                               MapR<T>(tape.grad(x.id()).data(), kk, hw).noalias() += W.transpose() * G;
                             } else {
                               MatR<T> dcol = W.transpose() * G;
                               col2im_add(dcol.data(), tape.grad(x.id()), k);
                             }
                           }
                         });
}

namespace {

void check_chw(const Shape& s, const char* op) {
  if (s.size() != 3) throw InvalidArgument(std::string(op) + ": expected [C, H, W], got " + shape_string(s));
}

// Source index in a [C, H, W] input for output index i of pixel_unshuffle.
struct UnshuffleMap {
  int c, h, w, r;
  std::size_t operator()(std::size_t i) const {
    const int oh = h / r, ow = w / r;
    const int ox = static_cast<int>(i % ow);
    const int oy = static_cast<int>((i / ow) % oh);
    const int oc = static_cast<int>(i / (static_cast<std::size_t>(ow) * oh));
    const int ic = oc / (r * r);
    const int dy = (oc % (r * r)) / r;
    const int dx = oc % r;
    return (static_cast<std::size_t>(ic) * h + oy * r + dy) * w + ox * r + dx;
  }
};

// Source pixel (token order) mapping for window partition.
struct WindowMap {
  int c, h, w, win;
  bool shift;
  // tokens [nW, win*win, C] index -> [C, H, W] index
  std::size_t operator()(std::size_t i) const {
    const int ch = static_cast<int>(i % c);
    const std::size_t tok_all = i / c;
    const int n = win * win;
    const int tok = static_cast<int>(tok_all % n);
    const int widx = static_cast<int>(tok_all / n);
    const int nwx = w / win;
    const int y = (widx / nwx) * win + tok / win;
    const int x = (widx % nwx) * win + tok % win;
    const int s = shift ? win / 2 : 0;
    const int sy = (y + s) % h;
    const int sx = (x + s) % w;
    return (static_cast<std::size_t>(ch) * h + sy) * w + sx;
  }
};

}  // namespace

template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  check_chw(x.shape(), "pixel_unshuffle");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (r <= 0 || h % r || w % r) throw InvalidArgument("pixel_unshuffle: H and W must be divisible by r");
  return gather(x, {c * r * r, h / r, w / r}, UnshuffleMap{c, h, w, r});
}

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  check_chw(x.shape(), "pixel_shuffle");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (r <= 0 || c % (r * r)) throw InvalidArgument("pixel_shuffle: channels must be divisible by r^2");
  return scatter(x, {c / (r * r), h * r, w * r}, UnshuffleMap{c / (r * r), h * r, w * r, r});
}

template <class T>
Var<T> pixel_unshuffle(const Var<T>& x, int r) {
  Tensor<T> out = pixel_unshuffle(x.value(), r);
  return x.tape().record(std::move(out), {x}, [x, r](Tape<T>& tape, std::size_t self) {
    accumulate(tape, x, pixel_shuffle(tape.grad(self), r));
  });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  Tensor<T> out = pixel_shuffle(x.value(), r);
  return x.tape().record(std::move(out), {x}, [x, r](Tape<T>& tape, std::size_t self) {
    accumulate(tape, x, pixel_unshuffle(tape.grad(self), r));
  });
}

template <class T>
Tensor<T> window_partition(const Tensor<T>& x, int window, bool shift) {
  check_chw(x.shape(), "window_partition");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (window <= 0 || h % window || w % window)
    throw InvalidArgument("window_partition: H and W must be divisible by the window size");
  const int n_windows = (h / window) * (w / window);
  return gather(x, {n_windows, window * window, c}, WindowMap{c, h, w, window, shift});
}

template <class T>
Tensor<T> window_merge(const Tensor<T>& tokens, int channels, int height, int width, int window, bool shift) {
  if (window <= 0 || height % window || width % window)
    throw InvalidArgument("window_merge: H and W must be divisible by the window size");
  const Shape expect{(height / window) * (width / window), window * window, channels};
  if (tokens.shape() != expect)
    throw InvalidArgument("window_merge: expected tokens " + shape_string(expect) + ", got " +
                          shape_string(tokens.shape()));
  return scatter(tokens, {channels, height, width}, WindowMap{channels, height, width, window, shift});
}

template <class T>
Var<T> window_partition(const Var<T>& x, int window, bool shift) {
  Tensor<T> out = window_partition(x.value(), window, shift);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  return x.tape().record(std::move(out), {x}, [x, c, h, w, window, shift](Tape<T>& tape, std::size_t self) {
    accumulate(tape, x, window_merge(tape.grad(self), c, h, w, window, shift));
  });
}

template <class T>
Var<T> window_merge(const Var<T>& tokens, int channels, int height, int width, int window, bool shift) {
  Tensor<T> out = window_merge(tokens.value(), channels, height, width, window, shift);
  return tokens.tape().record(std::move(out), {tokens}, [tokens, window, shift](Tape<T>& tape, std::size_t self) {
    accumulate(tape, tokens, window_partition(tape.grad(self), window, shift));
  });
}

#define IVF_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale(const Var<T>&, T);                                                             \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                              \
  template Var<T> relu(const Var<T>&);                                                                 \
  template Var<T> gelu(const Var<T>&);                                                                 \
  template Var<T> sum(const Var<T>&);                                                                  \
  template Var<T> mean(const Var<T>&);                                                                 \
  template Var<T> mean_abs_diff(const Var<T>&, const Tensor<T>&);                                      \
  template Var<T> reshape(const Var<T>&, Shape);                                                       \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                     \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                             \
  template Var<T> narrow(const Var<T>&, int, int, int);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool);                                             \
  template Var<T> softmax_rows(const Var<T>&);                                                         \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                          \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> pixel_unshuffle(const Var<T>&, int);                                                 \
  template Var<T> pixel_shuffle(const Var<T>&, int);                                                   \
  template Var<T> window_partition(const Var<T>&, int, bool);                                          \
  template Var<T> window_merge(const Var<T>&, int, int, int, int, bool);                               \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);                                           \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                                             \
  template Tensor<T> window_partition(const Tensor<T>&, int, bool);                                    \
  template Tensor<T> window_merge(const Tensor<T>&, int, int, int, int, bool);                         \
  template Tensor<T> softmax_rows(const Tensor<T>&);

IVF_INSTANTIATE_OPS(float)
IVF_INSTANTIATE_OPS(double)

}  // namespace ivf::nn
