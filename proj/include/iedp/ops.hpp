#ifndef IEDP_OPS_HPP
#define IEDP_OPS_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "iedp/image.hpp"
#include "iedp/tensor.hpp"

namespace iedp {

namespace detail {

inline Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  check_shape(axis >= 0 && axis < rank,
              "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

inline std::pair<Index, Index> axis_strides(const Shape& s, Index axis) {
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i)
    inner *= s[static_cast<std::size_t>(i)];
  return {outer, inner};
}

template <class S, class Fwd, class Dfn>
Tensor<S> unary_ew(const Tensor<S>& x, Fwd fwd, Dfn dfn) {
  ArrayX<S> y(x.numel());
  const ArrayX<S>& xv = x.array();
  for (Index i = 0; i < x.numel(); ++i) y[i] = fwd(xv[i]);
  return make_op<S>(
      x.shape(), std::move(y), {x.node()}, [dfn](TensorNode<S>& out) {
        auto& p = *out.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (Index i = 0; i < out.numel(); ++i)
          p.grad[i] += out.grad[i] * dfn(p.data[i], out.data[i]);
      });
}

}  // namespace detail

// ---- elementwise ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.shape() == b.shape(),
              "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_op<S>(a.shape(), a.array() + b.array(), {a.node(), b.node()},
                    [](TensorNode<S>& out) {
                      for (int i = 0; i < 2; ++i) {
                        auto& p = *out.parents[static_cast<std::size_t>(i)];
                        if (!p.requires_grad) continue;
                        p.ensure_grad();
                        p.grad += out.grad;
                      }
                    });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.shape() == b.shape(),
              "mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_op<S>(a.shape(), a.array() * b.array(), {a.node(), b.node()},
                    [](TensorNode<S>& out) {
                      auto& a = *out.parents[0];
                      auto& b = *out.parents[1];
                      if (a.requires_grad) {
                        a.ensure_grad();
                        a.grad += out.grad * b.data;
                      }
                      if (b.requires_grad) {
                        b.ensure_grad();
                        b.grad += out.grad * a.data;
                      }
                    });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return make_op<S>(x.shape(), -x.array(), {x.node()}, [](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad -= out.grad;
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, neg(b));
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return make_op<S>(x.shape(), ArrayX<S>(x.array() * c), {x.node()}, [c](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += out.grad * c;
  });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return make_op<S>(x.shape(), ArrayX<S>(x.array() + c), {x.node()}, [](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += out.grad;
  });
}

// y = x * s with s a scalar graph node (e.g. learnable temperature)
template <class S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& s) {
  check_shape(s.numel() == 1, "scale_by expects scalar, got " + shape_str(s.shape()));
  S sv = s.array()[0];
  return make_op<S>(x.shape(), ArrayX<S>(x.array() * sv), {x.node(), s.node()},
                    [](TensorNode<S>& out) {
                      auto& x = *out.parents[0];
                      auto& s = *out.parents[1];
                      if (x.requires_grad) {
                        x.ensure_grad();
                        x.grad += out.grad * s.data[0];
                      }
                      if (s.requires_grad) {
                        s.ensure_grad();
                        s.grad[0] += (out.grad * x.data).sum();
                      }
                    });
}

template <class S>
Tensor<S> exp_(const Tensor<S>& x) {
  return detail::unary_ew(
      x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log_(const Tensor<S>& x) {
  return detail::unary_ew(
      x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_ew(
      x,
      [](S v) {
        return v >= 0 ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_ew(
      x, [](S v) { return v > 0 ? v : S(0); }, [](S v, S) { return v > 0 ? S(1) : S(0); });
}

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  return detail::unary_ew(
      x,
      [](S v) {
        S sg = v >= 0 ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        return v * sg;
      },
      [](S v, S) {
        S sg = v >= 0 ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        return sg * (S(1) + v * (S(1) - sg));
      });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::unary_ew(
      x,
      [](S v) { return v > S(20) ? v : std::log1p(std::exp(v)); },
      [](S v, S) {
        return v >= 0 ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
      });
}

// ---- broadcast adds ----

// x: [.., D] plus row vector b: [D]
template <class S>
Tensor<S> add_rowwise(const Tensor<S>& x, const Tensor<S>& b) {
  check_shape(b.rank() == 1 && x.rank() >= 1 && x.extent(x.rank() - 1) == b.extent(0),
              "add_rowwise mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  Index d = b.extent(0);
  Index rows = x.numel() / d;
  ArrayX<S> y = x.array();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < d; ++j) y[r * d + j] += b.array()[j];
  return make_op<S>(x.shape(), std::move(y), {x.node(), b.node()}, [d, rows](TensorNode<S>& out) {
    auto& x = *out.parents[0];
    auto& b = *out.parents[1];
    if (x.requires_grad) {
      x.ensure_grad();
      x.grad += out.grad;
    }
    if (b.requires_grad) {
      b.ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) b.grad[j] += out.grad[r * d + j];
    }
  });
}

// x: [C,H,W] plus per-channel bias b: [C]
template <class S>
Tensor<S> add_channelwise(const Tensor<S>& x, const Tensor<S>& b) {
  check_shape(x.rank() == 3 && b.rank() == 1 && x.extent(0) == b.extent(0),
              "add_channelwise mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  Index c = x.extent(0), plane = x.extent(1) * x.extent(2);
  ArrayX<S> y = x.array();
  for (Index ci = 0; ci < c; ++ci) y.segment(ci * plane, plane) += b.array()[ci];
  return make_op<S>(x.shape(), std::move(y), {x.node(), b.node()}, [c, plane](TensorNode<S>& out) {
    auto& x = *out.parents[0];
    auto& b = *out.parents[1];
    if (x.requires_grad) {
      x.ensure_grad();
      x.grad += out.grad;
    }
    if (b.requires_grad) {
      b.ensure_grad();
      for (Index ci = 0; ci < c; ++ci) b.grad[ci] += out.grad.segment(ci * plane, plane).sum();
    }
  });
}

// ---- shape ops ----

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape to) {
  check_shape(numel(to) == x.numel(),
              "reshape " + shape_str(x.shape()) + " -> " + shape_str(to) + " changes element count");
  return make_op<S>(std::move(to), ArrayX<S>(x.array()), {x.node()}, [](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += out.grad;
  });
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  check_shape(x.rank() == 2, "transpose2d expects rank 2, got " + shape_str(x.shape()));
  Index m = x.extent(0), n = x.extent(1);
  ArrayX<S> y(m * n);
  CMatMap<S> xm(x.data(), m, n);
  MatMap<S>(y.data(), n, m) = xm.transpose();
  return make_op<S>({n, m}, std::move(y), {x.node()}, [m, n](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    MatMap<S>(p.grad.data(), m, n) += CMatMap<S>(out.grad.data(), n, m).transpose();
  });
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, Index axis, Index start, Index len) {
  axis = detail::normalize_axis(axis, x.rank());
  Index n = x.extent(axis);
  check_shape(start >= 0 && len >= 1 && start + len <= n,
              "slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                  ") out of range for axis extent " + std::to_string(n));
  auto [outer, inner] = detail::axis_strides(x.shape(), axis);
  Shape os = x.shape();
  os[static_cast<std::size_t>(axis)] = len;
  ArrayX<S> y(outer * len * inner);
  for (Index o = 0; o < outer; ++o)
    y.segment(o * len * inner, len * inner) =
        x.array().segment((o * n + start) * inner, len * inner);
  return make_op<S>(std::move(os), std::move(y), {x.node()},
                    [outer, inner, n, start, len](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (Index o = 0; o < outer; ++o)
                        p.grad.segment((o * n + start) * inner, len * inner) +=
                            out.grad.segment(o * len * inner, len * inner);
                    });
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  check_shape(!parts.empty(), "concat of zero tensors");
  Index rank = parts[0].rank();
  axis = detail::normalize_axis(axis, rank);
  Shape os = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == rank, "concat rank mismatch");
    for (Index i = 0; i < rank; ++i)
      check_shape(i == axis || p.extent(i) == os[static_cast<std::size_t>(i)],
                  "concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(os));
    total += p.extent(axis);
  }
  os[static_cast<std::size_t>(axis)] = total;
  auto [outer, inner] = detail::axis_strides(os, axis);
  ArrayX<S> y(outer * total * inner);
  std::vector<Index> lens;
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  Index off = 0;
  for (const auto& p : parts) {
    Index len = p.extent(axis);
    for (Index o = 0; o < outer; ++o)
      y.segment((o * total + off) * inner, len * inner) =
          p.array().segment(o * len * inner, len * inner);
    off += len;
    lens.push_back(len);
    nodes.push_back(p.node());
  }
  return make_op<S>(std::move(os), std::move(y), std::move(nodes),
                    [outer, inner, total, lens](TensorNode<S>& out) {
                      Index off = 0;
                      for (std::size_t pi = 0; pi < out.parents.size(); ++pi) {
                        auto& p = *out.parents[pi];
                        Index len = lens[pi];
                        if (p.requires_grad) {
                          p.ensure_grad();
                          for (Index o = 0; o < outer; ++o)
                            p.grad.segment(o * len * inner, len * inner) +=
                                out.grad.segment((o * total + off) * inner, len * inner);
                        }
                        off += len;
                      }
                    });
}

// out[i,:] = x[idx[i],:]; backward scatter-adds
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<Index>& idx) {
  check_shape(x.rank() == 2, "gather_rows expects rank 2, got " + shape_str(x.shape()));
  Index n = x.extent(0), d = x.extent(1);
  for (Index i : idx)
    check_shape(i >= 0 && i < n, "gather_rows index " + std::to_string(i) + " out of range");
  Index m = static_cast<Index>(idx.size());
  ArrayX<S> y(m * d);
  for (Index r = 0; r < m; ++r) y.segment(r * d, d) = x.array().segment(idx[static_cast<std::size_t>(r)] * d, d);
  return make_op<S>({m, d}, std::move(y), {x.node()}, [idx, d](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      p.grad.segment(idx[r] * d, d) += out.grad.segment(static_cast<Index>(r) * d, d);
  });
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  ArrayX<S> y(1);
  y[0] = x.array().sum();
  return make_op<S>({}, std::move(y), {x.node()}, [](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += out.grad[0];
  });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  Index n = x.numel();
  ArrayX<S> y(1);
  y[0] = x.array().sum() / static_cast<S>(n);
  return make_op<S>({}, std::move(y), {x.node()}, [n](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += out.grad[0] / static_cast<S>(n);
  });
}

// x: [L,D] -> [D], mean over rows
template <class S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  check_shape(x.rank() == 2, "mean_rows expects rank 2, got " + shape_str(x.shape()));
  Index l = x.extent(0), d = x.extent(1);
  ArrayX<S> y = ArrayX<S>::Zero(d);
  for (Index r = 0; r < l; ++r) y += x.array().segment(r * d, d);
  y /= static_cast<S>(l);
  return make_op<S>({d}, std::move(y), {x.node()}, [l, d](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (Index r = 0; r < l; ++r) p.grad.segment(r * d, d) += out.grad / static_cast<S>(l);
  });
}

// Unit L2 norm along the last axis.
template <class S>
Tensor<S> normalize_rows(const Tensor<S>& x, S eps = S(1e-12)) {
  Index d = x.extent(x.rank() - 1);
  Index rows = x.numel() / d;
  ArrayX<S> y(x.numel());
  auto norms = std::make_shared<ArrayX<S>>(rows);
  for (Index r = 0; r < rows; ++r) {
    S nrm = std::sqrt(x.array().segment(r * d, d).square().sum());
    nrm = std::max(nrm, eps);
    (*norms)[r] = nrm;
    y.segment(r * d, d) = x.array().segment(r * d, d) / nrm;
  }
  return make_op<S>(x.shape(), std::move(y), {x.node()}, [rows, d, norms](TensorNode<S>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (Index r = 0; r < rows; ++r) {
      auto yv = out.data.segment(r * d, d);
      auto gv = out.grad.segment(r * d, d);
      S dot = (gv * yv).sum();
      p.grad.segment(r * d, d) += (gv - yv * dot) / (*norms)[r];
    }
  });
}

// ---- matmul ----

// [..,M,K] x [..,K,N] -> [..,M,N]; leading batch dims broadcast
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.rank() >= 2 && b.rank() >= 2,
              "matmul expects rank>=2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Index m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  Index k2 = b.extent(b.rank() - 2), n = b.extent(b.rank() - 1);
  check_shape(k == k2, "matmul inner extents disagree: " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));

  Shape abat(a.shape().begin(), a.shape().end() - 2);
  Shape bbat(b.shape().begin(), b.shape().end() - 2);
  std::size_t brank = std::max(abat.size(), bbat.size());
  Shape obat(brank, 1);
  auto dim_at = [&](const Shape& s, std::size_t i) -> Index {
    // right-aligned
    std::size_t off = brank - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < brank; ++i) {
    Index da = dim_at(abat, i), db = dim_at(bbat, i);
    check_shape(da == db || da == 1 || db == 1,
                "matmul batch extents not broadcastable: " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
    obat[i] = std::max(da, db);
  }
  Index nbatch = numel(obat);

  // per-output-batch offsets into a and b
  auto aoff = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(nbatch));
  auto boff = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(nbatch));
  for (Index t = 0; t < nbatch; ++t) {
    Index rem = t, ai = 0, bi = 0;
    for (std::size_t i = 0; i < brank; ++i) {
      Index stride = 1;
      for (std::size_t j = i + 1; j < brank; ++j) stride *= obat[j];
      Index ix = rem / stride;
      rem %= stride;
      Index da = dim_at(abat, i), db = dim_at(bbat, i);
      ai = ai * da + (da == 1 ? 0 : ix);
      bi = bi * db + (db == 1 ? 0 : ix);
    }
    (*aoff)[static_cast<std::size_t>(t)] = ai * m * k;
    (*boff)[static_cast<std::size_t>(t)] = bi * k * n;
  }

  Shape os = obat;
  os.push_back(m);
  os.push_back(n);
  ArrayX<S> y(nbatch * m * n);
  for (Index t = 0; t < nbatch; ++t) {
    CMatMap<S> am(a.data() + (*aoff)[static_cast<std::size_t>(t)], m, k);
    CMatMap<S> bm(b.data() + (*boff)[static_cast<std::size_t>(t)], k, n);
    MatMap<S>(y.data() + t * m * n, m, n).noalias() = am * bm;
  }
  return make_op<S>(std::move(os), std::move(y), {a.node(), b.node()},
                    [m, k, n, nbatch, aoff, boff](TensorNode<S>& out) {
                      auto& a = *out.parents[0];
                      auto& b = *out.parents[1];
                      if (a.requires_grad) a.ensure_grad();
                      if (b.requires_grad) b.ensure_grad();
                      for (Index t = 0; t < nbatch; ++t) {
                        CMatMap<S> gm(out.grad.data() + t * m * n, m, n);
                        if (a.requires_grad) {
                          CMatMap<S> bm(b.data.data() + (*boff)[static_cast<std::size_t>(t)], k, n);
                          MatMap<S>(a.grad.data() + (*aoff)[static_cast<std::size_t>(t)], m, k)
                              .noalias() += gm * bm.transpose();
                        }
                        if (b.requires_grad) {
                          CMatMap<S> am(a.data.data() + (*aoff)[static_cast<std::size_t>(t)], m, k);
                          MatMap<S>(b.grad.data() + (*boff)[static_cast<std::size_t>(t)], k, n)
                              .noalias() += am.transpose() * gm;
                        }
                      }
                    });
}

// ---- softmax / layer norm ----

template <class S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  axis = detail::normalize_axis(axis, x.rank());
  Index n = x.extent(axis);
  auto [outer, inner] = detail::axis_strides(x.shape(), axis);
  ArrayX<S> y(x.numel());
  const ArrayX<S>& xv = x.array();
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < inner; ++j) {
      Index base = o * n * inner + j;
      S mx = xv[base];
      for (Index i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      S sum = 0;
      for (Index i = 0; i < n; ++i) {
        S e = std::exp(xv[base + i * inner] - mx);
        y[base + i * inner] = e;
        sum += e;
      }
      for (Index i = 0; i < n; ++i) y[base + i * inner] /= sum;
    }
  }
  return make_op<S>(x.shape(), std::move(y), {x.node()},
                    [n, outer = outer, inner = inner](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (Index o = 0; o < outer; ++o) {
                        for (Index j = 0; j < inner; ++j) {
                          Index base = o * n * inner + j;
                          S dot = 0;
                          for (Index i = 0; i < n; ++i)
                            dot += out.grad[base + i * inner] * out.data[base + i * inner];
                          for (Index i = 0; i < n; ++i)
                            p.grad[base + i * inner] += (out.grad[base + i * inner] - dot) *
                                                        out.data[base + i * inner];
                        }
                      }
                    });
}

// Normalizes the last axis; gain/bias have that extent.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  Index d = x.extent(x.rank() - 1);
  check_shape(gain.rank() == 1 && gain.extent(0) == d && bias.rank() == 1 && bias.extent(0) == d,
              "layer_norm gain/bias must match last extent " + std::to_string(d));
  Index rows = x.numel() / d;
  ArrayX<S> y(x.numel());
  auto xhat = std::make_shared<ArrayX<S>>(x.numel());
  auto inv = std::make_shared<ArrayX<S>>(rows);
  for (Index r = 0; r < rows; ++r) {
    auto xr = x.array().segment(r * d, d);
    S mu = xr.sum() / static_cast<S>(d);
    S var = (xr - mu).square().sum() / static_cast<S>(d);
    S iv = S(1) / std::sqrt(var + eps);
    (*inv)[r] = iv;
    xhat->segment(r * d, d) = (xr - mu) * iv;
    y.segment(r * d, d) = xhat->segment(r * d, d) * gain.array() + bias.array();
  }
  return make_op<S>(x.shape(), std::move(y), {x.node(), gain.node(), bias.node()},
                    [rows, d, xhat, inv](TensorNode<S>& out) {
                      auto& x = *out.parents[0];
                      auto& g = *out.parents[1];
                      auto& b = *out.parents[2];
                      for (Index r = 0; r < rows; ++r) {
                        auto go = out.grad.segment(r * d, d);
                        auto xh = xhat->segment(r * d, d);
                        if (g.requires_grad) {
                          g.ensure_grad();
                          g.grad += go * xh;
                        }
                        if (b.requires_grad) {
                          b.ensure_grad();
                          b.grad += go;
                        }
                        if (x.requires_grad) {
                          x.ensure_grad();
                          ArrayX<S> dxhat = go * g.data;
                          S m1 = dxhat.sum() / static_cast<S>(d);
                          S m2 = (dxhat * xh).sum() / static_cast<S>(d);
                          x.grad.segment(r * d, d) += (dxhat - m1 - xh * m2) * (*inv)[r];
                        }
                      }
                    });
}

// ---- conv2d ----

// x: [Ci,H,W], k: [Co,Ci,kh,kw]; zero padding; im2col + GEMM
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& k, Index stride, Index pad) {
  check_shape(x.rank() == 3 && k.rank() == 4,
              "conv2d expects x[Ci,H,W], k[Co,Ci,kh,kw]; got " + shape_str(x.shape()) + " and " +
                  shape_str(k.shape()));
  check_shape(stride >= 1, "conv2d stride must be >= 1");
  Index ci = x.extent(0), h = x.extent(1), w = x.extent(2);
  Index co = k.extent(0), kci = k.extent(1), kh = k.extent(2), kw = k.extent(3);
  check_shape(ci == kci, "conv2d channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(k.shape()));
  Index ho = (h + 2 * pad - kh) / stride + 1;
  Index wo = (w + 2 * pad - kw) / stride + 1;
  check_shape(h + 2 * pad >= kh && w + 2 * pad >= kw && ho >= 1 && wo >= 1,
              "conv2d kernel " + shape_str(k.shape()) + " larger than padded input " +
                  shape_str(x.shape()));

  Index krows = ci * kh * kw;
  auto cols = std::make_shared<MatX<S>>(krows, ho * wo);
  cols->setZero();
  for (Index c = 0; c < ci; ++c) {
    for (Index u = 0; u < kh; ++u) {
      for (Index v = 0; v < kw; ++v) {
        Index row = (c * kh + u) * kw + v;
        for (Index oy = 0; oy < ho; ++oy) {
          Index iy = oy * stride + u - pad;
          if (iy < 0 || iy >= h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            Index ix = ox * stride + v - pad;
            if (ix < 0 || ix >= w) continue;
            (*cols)(row, oy * wo + ox) = x.array()[(c * h + iy) * w + ix];
          }
        }
      }
    }
  }

  ArrayX<S> y(co * ho * wo);
  CMatMap<S> km(k.data(), co, krows);
  MatMap<S>(y.data(), co, ho * wo).noalias() = km * (*cols);

  return make_op<S>(
      {co, ho, wo}, std::move(y), {x.node(), k.node()},
      [ci, h, w, co, kh, kw, ho, wo, stride, pad, krows, cols](TensorNode<S>& out) {
        auto& x = *out.parents[0];
        auto& k = *out.parents[1];
        CMatMap<S> gm(out.grad.data(), co, ho * wo);
        if (k.requires_grad) {
          k.ensure_grad();
          MatMap<S>(k.grad.data(), co, krows).noalias() += gm * cols->transpose();
        }
        if (x.requires_grad) {
          x.ensure_grad();
          CMatMap<S> km(k.data.data(), co, krows);
          MatX<S> dcols(krows, ho * wo);
          dcols.noalias() = km.transpose() * gm;
          for (Index c = 0; c < ci; ++c) {
            for (Index u = 0; u < kh; ++u) {
              for (Index v = 0; v < kw; ++v) {
                Index row = (c * kh + u) * kw + v;
                for (Index oy = 0; oy < ho; ++oy) {
                  Index iy = oy * stride + u - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (Index ox = 0; ox < wo; ++ox) {
                    Index ix = ox * stride + v - pad;
                    if (ix < 0 || ix >= w) continue;
                    x.grad[(c * h + iy) * w + ix] += dcols(row, oy * wo + ox);
                  }
                }
              }
            }
          }
        }
      });
}

// ---- attention ----

// out = softmax(q k^T / sqrt(D)) v, row-stochastic weights returned
template <class S>
std::pair<Tensor<S>, Tensor<S>> attention(const Tensor<S>& q, const Tensor<S>& k,
                                          const Tensor<S>& v) {
  check_shape(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
              "attention expects rank-2 q,k,v");
  Index d = q.extent(1);
  check_shape(k.extent(1) == d, "attention width mismatch: q " + shape_str(q.shape()) + " vs k " +
                                    shape_str(k.shape()));
  check_shape(k.extent(0) == v.extent(0),
              "attention key/value count mismatch: " + shape_str(k.shape()) + " vs " +
                  shape_str(v.shape()));
  auto scores = scale(matmul(q, transpose2d(k)), S(1) / std::sqrt(static_cast<S>(d)));
  auto weights = softmax(scores, -1);
  auto out = matmul(weights, v);
  return {out, weights};
}

// ---- bilinear resize ----

namespace detail {
struct LerpTap {
  Index i0, i1;
  double w1;  // weight of i1; i0 gets 1-w1
};
inline std::vector<LerpTap> bilinear_taps(Index in, Index out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  double s = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    if (src < 0) src = 0;
    if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
    Index i0 = static_cast<Index>(std::floor(src));
    Index i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

// x: [C,H,W] -> [C,H2,W2], half-pixel centers
template <class S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, Index h2, Index w2) {
  check_shape(x.rank() == 3, "upsample_bilinear expects [C,H,W], got " + shape_str(x.shape()));
  Index c = x.extent(0), h = x.extent(1), w = x.extent(2);
  auto ty = std::make_shared<std::vector<detail::LerpTap>>(detail::bilinear_taps(h, h2));
  auto tx = std::make_shared<std::vector<detail::LerpTap>>(detail::bilinear_taps(w, w2));
  ArrayX<S> y(c * h2 * w2);
  for (Index ci = 0; ci < c; ++ci) {
    const S* plane = x.data() + ci * h * w;
    for (Index oy = 0; oy < h2; ++oy) {
      auto& a = (*ty)[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < w2; ++ox) {
        auto& b = (*tx)[static_cast<std::size_t>(ox)];
        S v00 = plane[a.i0 * w + b.i0], v01 = plane[a.i0 * w + b.i1];
        S v10 = plane[a.i1 * w + b.i0], v11 = plane[a.i1 * w + b.i1];
        S top = v00 + (v01 - v00) * static_cast<S>(b.w1);
        S bot = v10 + (v11 - v10) * static_cast<S>(b.w1);
        y[(ci * h2 + oy) * w2 + ox] = top + (bot - top) * static_cast<S>(a.w1);
      }
    }
  }
  return make_op<S>({c, h2, w2}, std::move(y), {x.node()},
                    [c, h, w, h2, w2, ty, tx](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (Index ci = 0; ci < c; ++ci) {
                        S* gplane = p.grad.data() + ci * h * w;
                        for (Index oy = 0; oy < h2; ++oy) {
                          auto& a = (*ty)[static_cast<std::size_t>(oy)];
                          S wy1 = static_cast<S>(a.w1), wy0 = S(1) - wy1;
                          for (Index ox = 0; ox < w2; ++ox) {
                            auto& b = (*tx)[static_cast<std::size_t>(ox)];
                            S g = out.grad[(ci * h2 + oy) * w2 + ox];
                            S wx1 = static_cast<S>(b.w1), wx0 = S(1) - wx1;
                            gplane[a.i0 * w + b.i0] += g * wy0 * wx0;
                            gplane[a.i0 * w + b.i1] += g * wy0 * wx1;
                            gplane[a.i1 * w + b.i0] += g * wy1 * wx0;
                            gplane[a.i1 * w + b.i1] += g * wy1 * wx1;
                          }
                        }
                      }
                    });
}

// ---- losses ----

// Mean NLL over non-ignored pixels; logits [C,H,W], target holds class ids.
template <class S>
Tensor<S> cross_entropy_spatial(const Tensor<S>& logits, const IntImage& target,
                                std::int32_t ignore_label, int* warn_all_ignored = nullptr) {
  check_shape(logits.rank() == 3, "cross_entropy_spatial expects [C,H,W]");
  Index c = logits.extent(0), h = logits.extent(1), w = logits.extent(2);
  check_shape(target.h == h && target.w == w,
              "mask extents " + std::to_string(target.h) + "x" + std::to_string(target.w) +
                  " do not match logits " + shape_str(logits.shape()));
  Index plane = h * w;
  auto probs = std::make_shared<ArrayX<S>>(c * plane);
  Index n = 0;
  S loss = 0;
  for (Index p = 0; p < plane; ++p) {
    std::int32_t t = target.v[static_cast<std::size_t>(p)];
    S mx = logits.array()[p];
    for (Index ci = 1; ci < c; ++ci) mx = std::max(mx, logits.array()[ci * plane + p]);
    S sum = 0;
    for (Index ci = 0; ci < c; ++ci) {
      S e = std::exp(logits.array()[ci * plane + p] - mx);
      (*probs)[ci * plane + p] = e;
      sum += e;
    }
    for (Index ci = 0; ci < c; ++ci) (*probs)[ci * plane + p] /= sum;
    if (t == ignore_label) continue;
    check_shape(t >= 0 && t < c, "mask value " + std::to_string(t) + " out of class range");
    loss += std::log(sum) + mx - logits.array()[t * plane + p];
    ++n;
  }
  if (n == 0) {
    if (warn_all_ignored) ++(*warn_all_ignored);
    return Tensor<S>::scalar(S(0));
  }
  ArrayX<S> y(1);
  y[0] = loss / static_cast<S>(n);
  IntImage tgt = target;
  return make_op<S>({}, std::move(y), {logits.node()},
                    [c, plane, n, probs, tgt = std::move(tgt), ignore_label](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      S g = out.grad[0] / static_cast<S>(n);
                      for (Index px = 0; px < plane; ++px) {
                        std::int32_t t = tgt.v[static_cast<std::size_t>(px)];
                        if (t == ignore_label) continue;
                        for (Index ci = 0; ci < c; ++ci)
                          p.grad[ci * plane + px] +=
                              g * ((*probs)[ci * plane + px] - (ci == t ? S(1) : S(0)));
                      }
                    });
}

// Mean NLL over rows; logits [N,C]
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& targets) {
  check_shape(logits.rank() == 2, "cross_entropy_rows expects [N,C]");
  Index n = logits.extent(0), c = logits.extent(1);
  check_shape(static_cast<Index>(targets.size()) == n, "targets length mismatch");
  auto probs = std::make_shared<ArrayX<S>>(n * c);
  S loss = 0;
  for (Index r = 0; r < n; ++r) {
    auto row = logits.array().segment(r * c, c);
    S mx = row.maxCoeff();
    ArrayX<S> e = (row - mx).exp();
    S sum = e.sum();
    probs->segment(r * c, c) = e / sum;
    int t = targets[static_cast<std::size_t>(r)];
    check_shape(t >= 0 && t < c, "target out of range");
    loss += std::log(sum) + mx - row[t];
  }
  ArrayX<S> y(1);
  y[0] = loss / static_cast<S>(n);
  return make_op<S>({}, std::move(y), {logits.node()},
                    [n, c, probs, targets](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      S g = out.grad[0] / static_cast<S>(n);
                      for (Index r = 0; r < n; ++r)
                        for (Index ci = 0; ci < c; ++ci)
                          p.grad[r * c + ci] +=
                              g * ((*probs)[r * c + ci] -
                                   (ci == targets[static_cast<std::size_t>(r)] ? S(1) : S(0)));
                    });
}

// Scale-invariant log loss: with g = log(pred) - log(gt) over n valid pixels,
// loss = mean(g^2) - lambda * mean(g)^2
template <class S>
Tensor<S> si_log_loss(const Tensor<S>& pred, const Tensor<S>& gt, const IntImage& valid,
                      S lambda, int* warn_empty = nullptr) {
  check_shape(pred.numel() == gt.numel(), "si_log_loss pred/gt size mismatch");
  check_shape(pred.numel() == valid.size(), "si_log_loss valid mask size mismatch");
  Index total = pred.numel();
  auto g = std::make_shared<ArrayX<S>>(total);
  Index n = 0;
  S sum_g = 0, sum_g2 = 0;
  for (Index i = 0; i < total; ++i) {
    if (!valid.v[static_cast<std::size_t>(i)]) continue;
    S pv = pred.array()[i], gv = gt.array()[i];
    if (!(gv > 0)) throw Error("si_log_loss: ground-truth depth must be positive on valid pixels");
    if (!(pv > 0)) throw Error("si_log_loss: prediction must be positive on valid pixels");
    S gi = std::log(pv) - std::log(gv);
    (*g)[i] = gi;
    sum_g += gi;
    sum_g2 += gi * gi;
    ++n;
  }
  if (n == 0) {
    if (warn_empty) ++(*warn_empty);
    return Tensor<S>::scalar(S(0));
  }
  ArrayX<S> y(1);
  S ns = static_cast<S>(n);
  y[0] = sum_g2 / ns - lambda * (sum_g / ns) * (sum_g / ns);
  IntImage vmask = valid;
  return make_op<S>({}, std::move(y), {pred.node()},
                    [g, vmask = std::move(vmask), sum_g, ns, lambda](TensorNode<S>& out) {
                      auto& p = *out.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      S go = out.grad[0];
                      for (Index i = 0; i < p.numel(); ++i) {
                        if (!vmask.v[static_cast<std::size_t>(i)]) continue;
                        S dg = S(2) * (*g)[i] / ns - S(2) * lambda * sum_g / (ns * ns);
                        p.grad[i] += go * dg / p.data[i];
                      }
                    });
}

}  // namespace iedp

#endif  // IEDP_OPS_HPP
