/*
 * Copyright (c) 2026 The saintcpp Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saint/rng.hpp"
#include "saint/tensor.hpp"

namespace saint {

enum class Reduction { kMean, kSum };

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                         shape_str(t.shape()));
    }
  }
}

template <typename T>
inline bool taping(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
inline void attach(Tensor<T>& out, const char* op, std::function<void()> fn) {
  Tape<T>* tape = active_tape<T>();
  auto st = out.storage();
  st->requires_grad = true;
  st->tape = tape;
  st->node = tape->push_record(op, std::move(fn));
}

inline int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw IndexError(std::string(op) + ": axis out of range");
  }
  return axis;
}

/// Decomposes a shape around `axis` into [outer, n, inner].
inline void lane_split(const Shape& shape, int axis, std::int64_t& outer,
                       std::int64_t& n, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    inner *= shape[i];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may either match `a`'s shape or be a suffix of
// it, in which case it is broadcast over the leading extents (bias adds,
// positional encodings).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void require_suffix(const Tensor<T>& a, const Tensor<T>& b,
                           const char* op) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(bs) +
                     " does not broadcast onto " + shape_str(as));
  }
  for (std::size_t i = 0; i < bs.size(); ++i) {
    if (bs[bs.size() - 1 - i] != as[as.size() - 1 - i]) {
      throw ShapeError(std::string(op) + ": shape " + shape_str(bs) +
                       " does not broadcast onto " + shape_str(as));
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_suffix(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.raw_values();
  auto av = a.values();
  auto bv = b.values();
  const std::size_t bn = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i % bn];
  detail::check_finite(out, "add");
  if (detail::taping<T>({&a, &b})) {
    detail::attach(out, "add", [as = a.storage(), bs = b.storage(),
                                os = out.storage(), bn]() {
      const auto& og = os->grad;
      if (og.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) as->grad[i] += og[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) bs->grad[i % bn] += og[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_suffix(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.raw_values();
  auto av = a.values();
  auto bv = b.values();
  const std::size_t bn = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i % bn];
  detail::check_finite(out, "sub");
  if (detail::taping<T>({&a, &b})) {
    detail::attach(out, "sub", [as = a.storage(), bs = b.storage(),
                                os = out.storage(), bn]() {
      const auto& og = os->grad;
      if (og.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) as->grad[i] += og[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) bs->grad[i % bn] -= og[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_suffix(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ov = out.raw_values();
  auto av = a.values();
  auto bv = b.values();
  const std::size_t bn = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i % bn];
  detail::check_finite(out, "mul");
  if (detail::taping<T>({&a, &b})) {
    detail::attach(out, "mul", [as = a.storage(), bs = b.storage(),
                                os = out.storage(), bn]() {
      const auto& og = os->grad;
      if (og.empty()) return;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          as->grad[i] += og[i] * bs->values[i % bn];
        }
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          bs->grad[i % bn] += og[i] * as->values[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto ov = out.raw_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * factor;
  detail::check_finite(out, "scale");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "scale",
                   [xs = x.storage(), os = out.storage(), factor]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     for (std::size_t i = 0; i < og.size(); ++i) {
                       xs->grad[i] += og[i] * factor;
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul with broadcastable leading batch extents:
// [..., p, q] x [..., q, r] -> [..., p, r].
// ---------------------------------------------------------------------------

namespace detail {

struct BatchMap {
  Shape out_batch;
  std::int64_t count = 1;
  // per output batch dim: strides into each operand's batch block (0 where
  // the operand broadcasts along that dim)
  std::vector<std::int64_t> a_stride, b_stride;

  std::int64_t offset_a(std::int64_t flat) const {
    return offset(flat, a_stride);
  }
  std::int64_t offset_b(std::int64_t flat) const {
    return offset(flat, b_stride);
  }

 private:
  std::int64_t offset(std::int64_t flat, const std::vector<std::int64_t>& strides) const {
    std::int64_t off = 0;
    for (std::size_t i = out_batch.size(); i-- > 0;) {
      const std::int64_t c = flat % out_batch[i];
      flat /= out_batch[i];
      off += c * strides[i];
    }
    return off;
  }
};

inline BatchMap broadcast_batches(const Shape& a, const Shape& b,
                                  const char* op) {
  const std::size_t an = a.size() - 2, bn = b.size() - 2;
  const std::size_t n = std::max(an, bn);
  BatchMap map;
  map.out_batch.assign(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t ad = i < n - an ? 1 : a[i - (n - an)];
    const std::int64_t bd = i < n - bn ? 1 : b[i - (n - bn)];
    if (ad != bd && ad != 1 && bd != 1) {
      throw ShapeError(std::string(op) + ": batch extents of " + shape_str(a) +
                       " and " + shape_str(b) + " do not broadcast");
    }
    map.out_batch[i] = std::max(ad, bd);
    map.count *= map.out_batch[i];
  }
  // strides in units of one batch element, computed right-to-left
  map.a_stride.assign(n, 0);
  map.b_stride.assign(n, 0);
  std::int64_t astr = 1, bstr = 1;
  for (std::size_t i = n; i-- > 0;) {
    const std::int64_t ad = i < n - an ? 1 : a[i - (n - an)];
    const std::int64_t bd = i < n - bn ? 1 : b[i - (n - bn)];
    map.a_stride[i] = ad == 1 ? 0 : astr;
    map.b_stride[i] = bd == 1 ? 0 : bstr;
    astr *= ad;
    bstr *= bd;
  }
  return map;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t p = a.dim(-2), q = a.dim(-1);
  const std::int64_t q2 = b.dim(-2), r = b.dim(-1);
  if (q != q2) {
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  detail::BatchMap map = detail::broadcast_batches(a.shape(), b.shape(), "matmul");
  Shape out_shape = map.out_batch;
  out_shape.push_back(p);
  out_shape.push_back(r);
  Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));

  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.raw_values().data();
  for (std::int64_t ob = 0; ob < map.count; ++ob) {
    const T* A = av + map.offset_a(ob) * p * q;
    const T* B = bv + map.offset_b(ob) * q * r;
    T* C = ov + ob * p * r;
    for (std::int64_t i = 0; i < p; ++i) {
      for (std::int64_t k = 0; k < q; ++k) {
        const T aik = A[i * q + k];
        const T* Bk = B + k * r;
        T* Ci = C + i * r;
        for (std::int64_t j = 0; j < r; ++j) Ci[j] += aik * Bk[j];
      }
    }
  }
  detail::check_finite(out, "matmul");

  if (detail::taping<T>({&a, &b})) {
    detail::attach(out, "matmul", [as = a.storage(), bs = b.storage(),
                                   os = out.storage(), map, p, q, r]() {
      const auto& og = os->grad;
      if (og.empty()) return;
      const T* gv = og.data();
      if (as->requires_grad) {
        as->ensure_grad();
        T* da = as->grad.data();
        const T* bvv = bs->values.data();
        for (std::int64_t ob = 0; ob < map.count; ++ob) {
          T* dA = da + map.offset_a(ob) * p * q;
          const T* B = bvv + map.offset_b(ob) * q * r;
          const T* G = gv + ob * p * r;
          for (std::int64_t i = 0; i < p; ++i) {
            for (std::int64_t k = 0; k < q; ++k) {
              const T* Bk = B + k * r;
              const T* Gi = G + i * r;
              T acc = 0;
              for (std::int64_t j = 0; j < r; ++j) acc += Gi[j] * Bk[j];
              dA[i * q + k] += acc;
            }
          }
        }
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        T* db = bs->grad.data();
        const T* avv = as->values.data();
        for (std::int64_t ob = 0; ob < map.count; ++ob) {
          const T* A = avv + map.offset_a(ob) * p * q;
          T* dB = db + map.offset_b(ob) * q * r;
          const T* G = gv + ob * p * r;
          for (std::int64_t i = 0; i < p; ++i) {
            const T* Gi = G + i * r;
            for (std::int64_t k = 0; k < q; ++k) {
              const T aik = A[i * q + k];
              T* dBk = dB + k * r;
              for (std::int64_t j = 0; j < r; ++j) dBk[j] += aik * Gi[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data movement: reshape (zero-copy alias), transpose, concat, slice,
// index_select.
// ---------------------------------------------------------------------------

/// Zero-copy: the result aliases the input storage, so gradients flow through
/// without a tape record.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  return Tensor<T>::view_as(x, std::move(new_shape));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  const int rank = x.rank();
  axis_a = detail::normalize_axis(axis_a, rank, "transpose");
  axis_b = detail::normalize_axis(axis_b, rank, "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<std::size_t>(axis_a)],
            out_shape[static_cast<std::size_t>(axis_b)]);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  if (axis_a == axis_b) {
    std::copy(x.values().begin(), x.values().end(), out.raw_values().begin());
  } else {
    // strides of the input, then walk the output in order
    const Shape& xs = x.shape();
    std::vector<std::int64_t> xstr(xs.size(), 1);
    for (std::size_t i = xs.size() - 1; i-- > 0;) xstr[i] = xstr[i + 1] * xs[i + 1];
    std::vector<std::int64_t> ostr(xstr);  // input strides in output coord order
    std::swap(ostr[static_cast<std::size_t>(axis_a)],
              ostr[static_cast<std::size_t>(axis_b)]);
    const T* xv = x.values().data();
    T* ov = out.raw_values().data();
    const std::int64_t n = x.numel();
    std::vector<std::int64_t> coord(out_shape.size(), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      ov[i] = xv[src];
      for (std::size_t d = out_shape.size(); d-- > 0;) {
        coord[d]++;
        src += ostr[d];
        if (coord[d] < out_shape[d]) break;
        src -= ostr[d] * out_shape[d];
        coord[d] = 0;
      }
    }
  }
  if (detail::taping<T>({&x})) {
    detail::attach(out, "transpose",
                   [xs = x.storage(), os = out.storage(),
                    in_shape = x.shape(), axis_a, axis_b]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     // the inverse movement is the same swap
                     Shape out_shape = in_shape;
                     std::swap(out_shape[static_cast<std::size_t>(axis_a)],
                               out_shape[static_cast<std::size_t>(axis_b)]);
                     std::vector<std::int64_t> xstr(in_shape.size(), 1);
                     for (std::size_t i = in_shape.size(); i-- > 1;) {
                       xstr[i - 1] = xstr[i] * in_shape[i];
                     }
                     std::vector<std::int64_t> ostr(xstr);
                     std::swap(ostr[static_cast<std::size_t>(axis_a)],
                               ostr[static_cast<std::size_t>(axis_b)]);
                     std::vector<std::int64_t> coord(out_shape.size(), 0);
                     std::int64_t src = 0;
                     for (std::size_t i = 0; i < og.size(); ++i) {
                       xs->grad[static_cast<std::size_t>(src)] += og[i];
                       for (std::size_t d = out_shape.size(); d-- > 0;) {
                         coord[d]++;
                         src += ostr[d];
                         if (coord[d] < out_shape[d]) break;
                         src -= ostr[d] * out_shape[d];
                         coord[d] = 0;
                       }
                     }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no tensors given");
  const int rank = parts.front().rank();
  axis = detail::normalize_axis(axis, rank, "concat");
  Shape out_shape = parts.front().shape();
  std::int64_t total = 0;
  for (const Tensor<T>& t : parts) {
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: off-axis extents differ: " +
                         shape_str(t.shape()) + " vs " +
                         shape_str(parts.front().shape()));
      }
    }
    total += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  std::int64_t outer, n_out, inner;
  detail::lane_split(out_shape, axis, outer, n_out, inner);
  T* ov = out.raw_values().data();
  std::int64_t at = 0;
  std::vector<std::int64_t> offsets;  // per part, start along axis
  for (const Tensor<T>& t : parts) {
    offsets.push_back(at);
    const std::int64_t len = t.dim(axis);
    const T* tv = t.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(tv + o * len * inner, tv + (o + 1) * len * inner,
                ov + (o * n_out + at) * inner);
    }
    at += len;
  }

  bool any_grad = false;
  for (const Tensor<T>& t : parts) any_grad |= t.requires_grad();
  if (active_tape<T>() && any_grad) {
    std::vector<std::shared_ptr<detail::Storage<T>>> stores;
    std::vector<std::int64_t> lens;
    for (const Tensor<T>& t : parts) {
      stores.push_back(t.storage());
      lens.push_back(t.dim(axis));
    }
    detail::attach(out, "concat",
                   [stores = std::move(stores), lens = std::move(lens),
                    offsets = std::move(offsets), os = out.storage(), outer,
                    n_out, inner]() {
                     const auto& og = os->grad;
                     if (og.empty()) return;
                     for (std::size_t pi = 0; pi < stores.size(); ++pi) {
                       auto& st = stores[pi];
                       if (!st->requires_grad) continue;
                       st->ensure_grad();
                       const std::int64_t len = lens[pi], at = offsets[pi];
                       for (std::int64_t o = 0; o < outer; ++o) {
                         const T* g = og.data() + (o * n_out + at) * inner;
                         T* dst = st->grad.data() + o * len * inner;
                         for (std::int64_t i = 0; i < len * inner; ++i) {
                           dst[i] += g[i];
                         }
                       }
                     }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start,
                std::int64_t len) {
  axis = detail::normalize_axis(axis, x.rank(), "slice");
  const std::int64_t n = x.dim(axis);
  if (start < 0 || len < 1 || start + len > n) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside axis extent " +
                     std::to_string(n));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::int64_t outer, n_in, inner;
  detail::lane_split(x.shape(), axis, outer, n_in, inner);
  const T* xv = x.values().data();
  T* ov = out.raw_values().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(xv + (o * n_in + start) * inner, xv + (o * n_in + start + len) * inner,
              ov + o * len * inner);
  }
  if (detail::taping<T>({&x})) {
    detail::attach(out, "slice",
                   [xs = x.storage(), os = out.storage(), outer, n_in, inner,
                    start, len]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     for (std::int64_t o = 0; o < outer; ++o) {
                       const T* g = og.data() + o * len * inner;
                       T* dst = xs->grad.data() + (o * n_in + start) * inner;
                       for (std::int64_t i = 0; i < len * inner; ++i) {
                         dst[i] += g[i];
                       }
                     }
                   });
  }
  return out;
}

/// Gathers rows (axis 0 slices) of `x`; the gradient scatter-adds them back.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::int64_t> ids) {
  if (x.rank() < 1) throw ShapeError("index_select: rank-0 input");
  const std::int64_t rows = x.dim(0);
  const std::int64_t stride = x.numel() / std::max<std::int64_t>(rows, 1);
  for (std::int64_t id : ids) {
    if (id < 0 || id >= rows) {
      throw IndexError("index_select: id " + std::to_string(id) +
                       " out of range [0, " + std::to_string(rows) + ")");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(ids.size());
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* xv = x.values().data();
  T* ov = out.raw_values().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(xv + ids[i] * stride, xv + (ids[i] + 1) * stride, ov + static_cast<std::int64_t>(i) * stride);
  }
  if (detail::taping<T>({&x})) {
    std::vector<std::int64_t> ids_copy(ids.begin(), ids.end());
    detail::attach(out, "index_select",
                   [xs = x.storage(), os = out.storage(),
                    ids = std::move(ids_copy), stride]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     for (std::size_t i = 0; i < ids.size(); ++i) {
                       const T* g = og.data() + static_cast<std::int64_t>(i) * stride;
                       T* dst = xs->grad.data() + ids[i] * stride;
                       for (std::int64_t k = 0; k < stride; ++k) dst[k] += g[k];
                     }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           std::span<const std::int64_t> ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be [V, d], got " +
                     shape_str(table.shape()));
  }
  return index_select(table, ids);
}

// ---------------------------------------------------------------------------
// Normalizations and activations.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank(), "softmax");
  std::int64_t outer, n, inner;
  detail::lane_split(x.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.values().data();
  T* ov = out.raw_values().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = xv[base];
      for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      T sum = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        ov[base + k * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::int64_t k = 0; k < n; ++k) ov[base + k * inner] *= inv;
    }
  }
  detail::check_finite(out, "softmax");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "softmax",
                   [xs = x.storage(), os = out.storage(), outer, n, inner]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     const T* s = os->values.data();
                     for (std::int64_t o = 0; o < outer; ++o) {
                       for (std::int64_t i = 0; i < inner; ++i) {
                         const std::int64_t base = o * n * inner + i;
                         T dot = 0;
                         for (std::int64_t k = 0; k < n; ++k) {
                           dot += og[static_cast<std::size_t>(base + k * inner)] *
                                  s[base + k * inner];
                         }
                         for (std::int64_t k = 0; k < n; ++k) {
                           const std::int64_t at = base + k * inner;
                           xs->grad[static_cast<std::size_t>(at)] +=
                               s[at] * (og[static_cast<std::size_t>(at)] - dot);
                         }
                       }
                     }
                   });
  }
  return out;
}

/// Layer normalization over the last axis, population-variance convention,
/// followed by the learned affine (gain, bias).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::int64_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) +
                     " elements");
  }
  const std::int64_t slices = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(slices));
  std::vector<T> inv_std(static_cast<std::size_t>(slices));
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  T* ov = out.raw_values().data();
  for (std::int64_t s = 0; s < slices; ++s) {
    const T* row = xv + s * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T istd = T(1) / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(s)] = mu;
    inv_std[static_cast<std::size_t>(s)] = istd;
    T* orow = ov + s * d;
    for (std::int64_t j = 0; j < d; ++j) {
      orow[j] = (row[j] - mu) * istd * gv[j] + bv[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (detail::taping<T>({&x, &gain, &bias})) {
    detail::attach(out, "layer_norm",
                   [xs = x.storage(), gs = gain.storage(), bs = bias.storage(),
                    os = out.storage(), mean = std::move(mean),
                    inv_std = std::move(inv_std), d, slices]() {
                     const auto& og = os->grad;
                     if (og.empty()) return;
                     const T* xv = xs->values.data();
                     const T* gv = gs->values.data();
                     if (xs->requires_grad) xs->ensure_grad();
                     if (gs->requires_grad) gs->ensure_grad();
                     if (bs->requires_grad) bs->ensure_grad();
                     std::vector<T> y(static_cast<std::size_t>(d));
                     std::vector<T> dy(static_cast<std::size_t>(d));
                     for (std::int64_t s = 0; s < slices; ++s) {
                       const T mu = mean[static_cast<std::size_t>(s)];
                       const T istd = inv_std[static_cast<std::size_t>(s)];
                       const T* g = og.data() + s * d;
                       for (std::int64_t j = 0; j < d; ++j) {
                         y[static_cast<std::size_t>(j)] = (xv[s * d + j] - mu) * istd;
                       }
                       if (gs->requires_grad || bs->requires_grad) {
                         for (std::int64_t j = 0; j < d; ++j) {
                           if (gs->requires_grad) {
                             gs->grad[static_cast<std::size_t>(j)] +=
                                 g[j] * y[static_cast<std::size_t>(j)];
                           }
                           if (bs->requires_grad) {
                             bs->grad[static_cast<std::size_t>(j)] += g[j];
                           }
                         }
                       }
                       if (xs->requires_grad) {
                         T mean_dy = 0, mean_dyy = 0;
                         for (std::int64_t j = 0; j < d; ++j) {
                           dy[static_cast<std::size_t>(j)] = g[j] * gv[j];
                           mean_dy += dy[static_cast<std::size_t>(j)];
                           mean_dyy += dy[static_cast<std::size_t>(j)] *
                                       y[static_cast<std::size_t>(j)];
                         }
                         mean_dy /= static_cast<T>(d);
                         mean_dyy /= static_cast<T>(d);
                         for (std::int64_t j = 0; j < d; ++j) {
                           xs->grad[static_cast<std::size_t>(s * d + j)] +=
                               istd * (dy[static_cast<std::size_t>(j)] - mean_dy -
                                       y[static_cast<std::size_t>(j)] * mean_dyy);
                         }
                       }
                     }
                   });
  }
  return out;
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.raw_values();
  const T inv_sqrt2 = T(0.70710678118654752440084436210485);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T phi = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
    ov[i] = xv[i] * phi;
  }
  detail::check_finite(out, "gelu");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "gelu", [xs = x.storage(), os = out.storage()]() {
      const auto& og = os->grad;
      if (og.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      const T inv_sqrt2 = T(0.70710678118654752440084436210485);
      const T inv_sqrt2pi = T(0.39894228040143267793994605993438);
      for (std::size_t i = 0; i < og.size(); ++i) {
        const T v = xs->values[i];
        const T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        xs->grad[i] += og[i] * (phi + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.raw_values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  detail::check_finite(out, "relu");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "relu", [xs = x.storage(), os = out.storage()]() {
      const auto& og = os->grad;
      if (og.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < og.size(); ++i) {
        if (xs->values[i] > T(0)) xs->grad[i] += og[i];
      }
    });
  }
  return out;
}

/// Inverted dropout: survivors are scaled by 1/(1-p) at train time so that
/// inference is the identity. With p == 0 or training == false the input is
/// returned unchanged and the generator is left untouched.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ParamError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.raw_values();
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> factor(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    factor[i] = rng.bernoulli(p) ? T(0) : keep_scale;
    ov[i] = xv[i] * factor[i];
  }
  detail::check_finite(out, "dropout");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "dropout",
                   [xs = x.storage(), os = out.storage(),
                    factor = std::move(factor)]() {
                     const auto& og = os->grad;
                     if (og.empty() || !xs->requires_grad) return;
                     xs->ensure_grad();
                     for (std::size_t i = 0; i < og.size(); ++i) {
                       xs->grad[i] += og[i] * factor[i];
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses and reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::span<const std::int64_t> targets,
                        Reduction reduction = Reduction::kMean) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [b, C], got " +
                     shape_str(logits.shape()));
  }
  const std::int64_t b = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != b) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for batch of " + std::to_string(b));
  }
  for (std::int64_t t : targets) {
    if (t < 0 || t >= c) {
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " out of range [0, " + std::to_string(c) + ")");
    }
  }
  const T* lv = logits.values().data();
  std::vector<T> probs(static_cast<std::size_t>(b * c));
  T total = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    const T* row = lv + i * c;
    T mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[static_cast<std::size_t>(i * c + j)] = e;
      sum += e;
    }
    const T lse = mx + std::log(sum);
    total += lse - row[targets[static_cast<std::size_t>(i)]];
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < c; ++j) probs[static_cast<std::size_t>(i * c + j)] *= inv;
  }
  if (reduction == Reduction::kMean) total /= static_cast<T>(b);
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "cross_entropy");
  if (detail::taping<T>({&logits})) {
    std::vector<std::int64_t> tgt(targets.begin(), targets.end());
    detail::attach(out, "cross_entropy",
                   [ls = logits.storage(), os = out.storage(),
                    probs = std::move(probs), tgt = std::move(tgt), b, c,
                    reduction]() {
                     const auto& og = os->grad;
                     if (og.empty() || !ls->requires_grad) return;
                     ls->ensure_grad();
                     const T gscale =
                         og[0] * (reduction == Reduction::kMean
                                      ? T(1) / static_cast<T>(b)
                                      : T(1));
                     for (std::int64_t i = 0; i < b; ++i) {
                       for (std::int64_t j = 0; j < c; ++j) {
                         T g = probs[static_cast<std::size_t>(i * c + j)];
                         if (j == tgt[static_cast<std::size_t>(i)]) g -= T(1);
                         ls->grad[static_cast<std::size_t>(i * c + j)] += gscale * g;
                       }
                     }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target,
              Reduction reduction = Reduction::kMean) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: shapes differ: " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  auto pv = pred.values();
  auto tv = target.values();
  T total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T e = pv[i] - tv[i];
    total += e * e;
  }
  const std::int64_t n = pred.numel();
  if (reduction == Reduction::kMean) total /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "mse");
  if (detail::taping<T>({&pred, &target})) {
    detail::attach(out, "mse",
                   [ps = pred.storage(), ts = target.storage(),
                    os = out.storage(), n, reduction]() {
                     const auto& og = os->grad;
                     if (og.empty()) return;
                     const T gscale =
                         og[0] * (reduction == Reduction::kMean
                                      ? T(1) / static_cast<T>(n)
                                      : T(1));
                     for (std::size_t i = 0; i < ps->values.size(); ++i) {
                       const T e = T(2) * (ps->values[i] - ts->values[i]) * gscale;
                       if (ps->requires_grad) {
                         ps->ensure_grad();
                         ps->grad[i] += e;
                       }
                       if (ts->requires_grad) {
                         ts->ensure_grad();
                         ts->grad[i] -= e;
                       }
                     }
                   });
  }
  return out;
}

/// Mean over rows of (1 - cos(z_i, z'_i)). Zero-norm rows contribute cos = 0
/// (with a warning) and receive zero gradient.
template <typename T>
Tensor<T> cosine_alignment(const Tensor<T>& z, const Tensor<T>& zp) {
  if (z.rank() != 2 || z.shape() != zp.shape()) {
    throw ShapeError("cosine_alignment: inputs must be matching [b, d], got " +
                     shape_str(z.shape()) + " vs " + shape_str(zp.shape()));
  }
  const std::int64_t b = z.dim(0), d = z.dim(1);
  const T* zv = z.values().data();
  const T* pv = zp.values().data();
  std::vector<T> nz(static_cast<std::size_t>(b)), np(static_cast<std::size_t>(b)),
      cosv(static_cast<std::size_t>(b));
  T total = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    T dot = 0, a2 = 0, b2 = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      dot += zv[i * d + j] * pv[i * d + j];
      a2 += zv[i * d + j] * zv[i * d + j];
      b2 += pv[i * d + j] * pv[i * d + j];
    }
    const T na = std::sqrt(a2), nb = std::sqrt(b2);
    T c;
    if (na == T(0) || nb == T(0)) {
      log_warn("cosine_alignment: zero-norm vector in row " + std::to_string(i) +
               ", treating cosine as 0");
      c = T(0);
    } else {
      c = dot / (na * nb);
    }
    nz[static_cast<std::size_t>(i)] = na;
    np[static_cast<std::size_t>(i)] = nb;
    cosv[static_cast<std::size_t>(i)] = c;
    total += T(1) - c;
  }
  total /= static_cast<T>(b);
  Tensor<T> out = Tensor<T>::scalar(total);
  if (detail::taping<T>({&z, &zp})) {
    detail::attach(out, "cosine_alignment",
                   [zs = z.storage(), ps = zp.storage(), os = out.storage(),
                    nz = std::move(nz), np = std::move(np),
                    cosv = std::move(cosv), b, d]() {
                     const auto& og = os->grad;
                     if (og.empty()) return;
                     const T gscale = -og[0] / static_cast<T>(b);  // d(1-cos) = -dcos
                     for (std::int64_t i = 0; i < b; ++i) {
                       const T na = nz[static_cast<std::size_t>(i)];
                       const T nb = np[static_cast<std::size_t>(i)];
                       if (na == T(0) || nb == T(0)) continue;
                       const T c = cosv[static_cast<std::size_t>(i)];
                       for (std::int64_t j = 0; j < d; ++j) {
                         const T zi = zs->values[static_cast<std::size_t>(i * d + j)];
                         const T pi = ps->values[static_cast<std::size_t>(i * d + j)];
                         if (zs->requires_grad) {
                           zs->ensure_grad();
                           zs->grad[static_cast<std::size_t>(i * d + j)] +=
                               gscale * (pi / (na * nb) - zi * c / (na * na));
                         }
                         if (ps->requires_grad) {
                           ps->ensure_grad();
                           ps->grad[static_cast<std::size_t>(i * d + j)] +=
                               gscale * (zi / (na * nb) - pi * c / (nb * nb));
                         }
                       }
                     }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "sum_all");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "sum_all", [xs = x.storage(), os = out.storage()]() {
      const auto& og = os->grad;
      if (og.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += og[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  const T n = static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(total / n);
  detail::check_finite(out, "mean_all");
  if (detail::taping<T>({&x})) {
    detail::attach(out, "mean_all", [xs = x.storage(), os = out.storage(), n]() {
      const auto& og = os->grad;
      if (og.empty() || !xs->requires_grad) return;
      xs->ensure_grad();
      const T g = og[0] / n;
      for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

}  // namespace saint
