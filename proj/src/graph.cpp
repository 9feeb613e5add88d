#include "dipnet/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace dipnet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Pad a shape on the left with extent-1 axes so every tensor iterates as 4-D.
struct Dims4 {
  int64_t d[4] = {1, 1, 1, 1};
};

Dims4 pad4(const Shape& s) {
  Dims4 r;
  int off = 4 - s.rank();
  for (int i = 0; i < s.rank(); ++i) r.d[off + i] = s[i];
  return r;
}

Dims4 strides4(const Dims4& dims, const Dims4& bcast_against) {
  // Strides for iterating `dims` under the broadcast target `bcast_against`;
  // axes where dims has extent 1 but the target is larger get stride 0.
  Dims4 st;
  int64_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st.d[i] = (dims.d[i] == 1 && bcast_against.d[i] != 1) ? 0 : acc;
    acc *= dims.d[i];
  }
  return st;
}

bool broadcast_compatible(const Dims4& a, const Dims4& b, Dims4& out) {
  for (int i = 0; i < 4; ++i) {
    if (a.d[i] == b.d[i]) out.d[i] = a.d[i];
    else if (a.d[i] == 1) out.d[i] = b.d[i];
    else if (b.d[i] == 1) out.d[i] = a.d[i];
    else return false;
  }
  return true;
}

Shape shape_from4(const Dims4& d, int rank) {
  switch (rank) {
    case 1: return Shape{d.d[3]};
    case 2: return Shape{d.d[2], d.d[3]};
    case 3: return Shape{d.d[1], d.d[2], d.d[3]};
    default: return Shape{d.d[0], d.d[1], d.d[2], d.d[3]};
  }
}

// Sum g over every axis where `target` is narrower, returning a tensor of
// target's shape.  Used to turn broadcast-output gradients into leaf grads.
template <typename T>
Tensor<T> reduce_grad_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Dims4 gd = pad4(g.shape());
  Dims4 td = pad4(target);
  Tensor<T> out(target, T(0));
  Dims4 tstr = strides4(td, gd);
  const T* gp = g.data();
  T* op = out.data();
  int64_t idx = 0;
  for (int64_t i0 = 0; i0 < gd.d[0]; ++i0)
    for (int64_t i1 = 0; i1 < gd.d[1]; ++i1)
      for (int64_t i2 = 0; i2 < gd.d[2]; ++i2) {
        int64_t base = i0 * tstr.d[0] + i1 * tstr.d[1] + i2 * tstr.d[2];
        for (int64_t i3 = 0; i3 < gd.d[3]; ++i3)
          op[base + i3 * tstr.d[3]] += gp[idx++];
      }
  return out;
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
T softplus(T z) {
  // log(1 + e^z) without overflow for large |z|
  T a = z > T(0) ? z : T(0);
  return a + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

// --- node plumbing ------------------------------------------------------

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Value v) {
  if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size())) throw Error("invalid graph value");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Value v) const {
  if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size())) throw Error("invalid graph value");
  return nodes_[v.id];
}

template <typename T>
typename Graph<T>::Value Graph<T>::emplace(Tensor<T> out, bool needs_grad, const char* opname,
                                           std::function<void(Graph&)> backfn) {
  if (!out.all_finite()) throw NumericError(std::string("non-finite output of ") + opname);
  Node n;
  n.out = std::move(out);
  n.needs_grad = needs_grad;
  n.backfn = std::move(backfn);
  nodes_.push_back(std::move(n));
  return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::add_grad(int32_t id, Tensor<T> g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = std::move(g);
    n.has_grad = true;
  } else {
    T* dst = n.grad.data();
    const T* src = g.data();
    for (int64_t i = 0, c = n.grad.numel(); i < c; ++i) dst[i] += src[i];
  }
}

template <typename T>
void Graph<T>::add_grad_scaled(int32_t id, const Tensor<T>& g, T s) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = Tensor<T>(g.shape(), T(0));
    n.has_grad = true;
  }
  T* dst = n.grad.data();
  const T* src = g.data();
  for (int64_t i = 0, c = n.grad.numel(); i < c; ++i) dst[i] += s * src[i];
}

template <typename T>
void Graph<T>::record_kink(const Tensor<T>& x) {
  if (!record_kinks_) return;
  constexpr uint64_t kPrime = 1099511628211ULL;
  const T* p = x.data();
  for (int64_t i = 0, c = x.numel(); i < c; ++i) {
    uint64_t sym = p[i] > T(0) ? 1u : (p[i] < T(0) ? 0u : 2u);
    kink_hash_ = (kink_hash_ ^ sym) * kPrime;
  }
}

// --- leaves ---------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::constant(Tensor<T> v) {
  return emplace(std::move(v), false, "constant", nullptr);
}

template <typename T>
typename Graph<T>::Value Graph<T>::input(Tensor<T> v, bool needs_grad) {
  Value out = emplace(std::move(v), needs_grad, "input", nullptr);
  node(out).is_input_leaf = true;
  return out;
}

template <typename T>
typename Graph<T>::Value Graph<T>::param(Parameter<T>& p) {
  Value out = emplace(p.value, p.requires_grad, "param", nullptr);
  if (p.requires_grad) node(out).bound_param = &p;
  return out;
}

template <typename T>
typename Graph<T>::Value Graph<T>::frozen(const Parameter<T>& p) {
  return emplace(p.value, false, "frozen", nullptr);
}

// --- elementwise ------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::binary_broadcast(Value a, Value b, BinOp op) {
  const Tensor<T>& ta = node(a).out;
  const Tensor<T>& tb = node(b).out;
  const char* name = op == BinOp::Add ? "add" : (op == BinOp::Sub ? "sub" : "mul");

  Dims4 da = pad4(ta.shape()), db = pad4(tb.shape()), dout;
  if (!broadcast_compatible(da, db, dout))
    throw ShapeError(std::string(name) + ": incompatible shapes " + ta.shape().str() + " vs " + tb.shape().str());
  int out_rank = std::max(ta.shape().rank(), tb.shape().rank());
  Shape oshape = shape_from4(dout, out_rank);

  Tensor<T> out(oshape);
  const T* pa = ta.data();
  const T* pb = tb.data();
  T* po = out.data();

  if (ta.shape() == tb.shape()) {
    int64_t n = ta.numel();
    switch (op) {
      case BinOp::Add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
  } else {
    Dims4 sa = strides4(da, dout), sb = strides4(db, dout);
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < dout.d[0]; ++i0)
      for (int64_t i1 = 0; i1 < dout.d[1]; ++i1)
        for (int64_t i2 = 0; i2 < dout.d[2]; ++i2)
          for (int64_t i3 = 0; i3 < dout.d[3]; ++i3) {
            T va = pa[i0 * sa.d[0] + i1 * sa.d[1] + i2 * sa.d[2] + i3 * sa.d[3]];
            T vb = pb[i0 * sb.d[0] + i1 * sb.d[1] + i2 * sb.d[2] + i3 * sb.d[3]];
            po[idx++] = op == BinOp::Add ? va + vb : (op == BinOp::Sub ? va - vb : va * vb);
          }
  }

  bool ng = wants(a) || wants(b);
  int32_t ia = a.id, ib = b.id;
  Value v = emplace(std::move(out), ng, name, nullptr);
  int32_t iv = v.id;
  if (ng) {
    node(v).backfn = [ia, ib, iv, op](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& va = g.nodes_[ia].out;
      const Tensor<T>& vb = g.nodes_[ib].out;
      if (g.nodes_[ia].needs_grad) {
        Tensor<T> ga;
        if (op == BinOp::Mul) {
          // elementwise g*b on the broadcast frame, then reduce to a's shape
          Tensor<T> full(gr.shape());
          Dims4 dg = pad4(gr.shape());
          Dims4 sb = strides4(pad4(vb.shape()), dg);
          const T* pg = gr.data();
          const T* pb = vb.data();
          T* pf = full.data();
          int64_t idx = 0;
          for (int64_t i0 = 0; i0 < dg.d[0]; ++i0)
            for (int64_t i1 = 0; i1 < dg.d[1]; ++i1)
              for (int64_t i2 = 0; i2 < dg.d[2]; ++i2)
                for (int64_t i3 = 0; i3 < dg.d[3]; ++i3, ++idx)
                  pf[idx] = pg[idx] * pb[i0 * sb.d[0] + i1 * sb.d[1] + i2 * sb.d[2] + i3 * sb.d[3]];
          ga = reduce_grad_to(full, va.shape());
        } else {
          ga = reduce_grad_to(gr, va.shape());
        }
        g.add_grad(ia, std::move(ga));
      }
      if (g.nodes_[ib].needs_grad) {
        Tensor<T> gb;
        if (op == BinOp::Mul) {
          Tensor<T> full(gr.shape());
          Dims4 dg = pad4(gr.shape());
          Dims4 sa = strides4(pad4(va.shape()), dg);
          const T* pg = gr.data();
          const T* pa = va.data();
          T* pf = full.data();
          int64_t idx = 0;
          for (int64_t i0 = 0; i0 < dg.d[0]; ++i0)
            for (int64_t i1 = 0; i1 < dg.d[1]; ++i1)
              for (int64_t i2 = 0; i2 < dg.d[2]; ++i2)
                for (int64_t i3 = 0; i3 < dg.d[3]; ++i3, ++idx)
                  pf[idx] = pg[idx] * pa[i0 * sa.d[0] + i1 * sa.d[1] + i2 * sa.d[2] + i3 * sa.d[3]];
          gb = reduce_grad_to(full, vb.shape());
        } else if (op == BinOp::Sub) {
          Tensor<T> neg(gr.shape());
          const T* pg = gr.data();
          T* pn = neg.data();
          for (int64_t i = 0, c = gr.numel(); i < c; ++i) pn[i] = -pg[i];
          gb = reduce_grad_to(neg, vb.shape());
        } else {
          gb = reduce_grad_to(gr, vb.shape());
        }
        g.add_grad(ib, std::move(gb));
      }
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::add(Value a, Value b) { return binary_broadcast(a, b, BinOp::Add); }
template <typename T>
typename Graph<T>::Value Graph<T>::sub(Value a, Value b) { return binary_broadcast(a, b, BinOp::Sub); }
template <typename T>
typename Graph<T>::Value Graph<T>::mul(Value a, Value b) { return binary_broadcast(a, b, BinOp::Mul); }

template <typename T>
typename Graph<T>::Value Graph<T>::scale(Value a, T s) {
  const Tensor<T>& ta = node(a).out;
  Tensor<T> out(ta.shape());
  const T* pa = ta.data();
  T* po = out.data();
  for (int64_t i = 0, c = ta.numel(); i < c; ++i) po[i] = s * pa[i];
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "scale", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, s](Graph& g) { g.add_grad_scaled(ia, g.nodes_[iv].grad, s); };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::neg(Value a) { return scale(a, T(-1)); }

template <typename T>
typename Graph<T>::Value Graph<T>::abs(Value a) {
  const Tensor<T>& ta = node(a).out;
  record_kink(ta);
  Tensor<T> out(ta.shape());
  const T* pa = ta.data();
  T* po = out.data();
  for (int64_t i = 0, c = ta.numel(); i < c; ++i) po[i] = std::abs(pa[i]);
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "abs", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& x = g.nodes_[ia].out;
      Tensor<T> gx(gr.shape());
      const T* pg = gr.data();
      const T* px = x.data();
      T* pd = gx.data();
      for (int64_t i = 0, c = gr.numel(); i < c; ++i)
        pd[i] = px[i] > T(0) ? pg[i] : (px[i] < T(0) ? -pg[i] : T(0));
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::relu(Value a) {
  const Tensor<T>& ta = node(a).out;
  record_kink(ta);
  Tensor<T> out(ta.shape());
  const T* pa = ta.data();
  T* po = out.data();
  for (int64_t i = 0, c = ta.numel(); i < c; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "relu", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& x = g.nodes_[ia].out;
      Tensor<T> gx(gr.shape());
      const T* pg = gr.data();
      const T* px = x.data();
      T* pd = gx.data();
      for (int64_t i = 0, c = gr.numel(); i < c; ++i) pd[i] = px[i] > T(0) ? pg[i] : T(0);
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::leaky_relu(Value a, T slope) {
  const Tensor<T>& ta = node(a).out;
  record_kink(ta);
  Tensor<T> out(ta.shape());
  const T* pa = ta.data();
  T* po = out.data();
  for (int64_t i = 0, c = ta.numel(); i < c; ++i) po[i] = pa[i] > T(0) ? pa[i] : slope * pa[i];
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "leaky_relu", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, slope](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& x = g.nodes_[ia].out;
      Tensor<T> gx(gr.shape());
      const T* pg = gr.data();
      const T* px = x.data();
      T* pd = gx.data();
      for (int64_t i = 0, c = gr.numel(); i < c; ++i) pd[i] = px[i] > T(0) ? pg[i] : slope * pg[i];
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::sigmoid(Value a) {
  const Tensor<T>& ta = node(a).out;
  Tensor<T> out(ta.shape());
  const T* pa = ta.data();
  T* po = out.data();
  for (int64_t i = 0, c = ta.numel(); i < c; ++i) po[i] = stable_sigmoid(pa[i]);
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "sigmoid", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& y = g.nodes_[iv].out;
      Tensor<T> gx(gr.shape());
      const T* pg = gr.data();
      const T* py = y.data();
      T* pd = gx.data();
      for (int64_t i = 0, c = gr.numel(); i < c; ++i) pd[i] = pg[i] * py[i] * (T(1) - py[i]);
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

// --- reductions -------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::sum(Value a, const std::vector<int>& axes) {
  const Tensor<T>& ta = node(a).out;
  if (axes.empty()) {  // identity reduction
    Tensor<T> out = ta;
    bool ng = wants(a);
    Value v = emplace(std::move(out), ng, "sum", nullptr);
    if (ng) {
      int32_t ia = a.id, iv = v.id;
      node(v).backfn = [ia, iv](Graph& g) { g.add_grad(ia, g.nodes_[iv].grad); };
    }
    return v;
  }
  int rank = ta.shape().rank();
  std::vector<bool> red(static_cast<size_t>(rank), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= rank) throw ShapeError("reduce axis " + std::to_string(ax) + " out of range for " + ta.shape().str());
    red[static_cast<size_t>(ax)] = true;
  }
  std::vector<int64_t> odims;
  for (int i = 0; i < rank; ++i) odims.push_back(red[i] ? 1 : ta.shape()[i]);
  Shape oshape = [&] {
    switch (rank) {
      case 1: return Shape{odims[0]};
      case 2: return Shape{odims[0], odims[1]};
      case 3: return Shape{odims[0], odims[1], odims[2]};
      default: return Shape{odims[0], odims[1], odims[2], odims[3]};
    }
  }();
  Tensor<T> out(oshape, T(0));
  // iterate input, accumulate into collapsed coords
  Dims4 di = pad4(ta.shape());
  Dims4 dout = pad4(oshape);
  Dims4 ostr = strides4(dout, di);
  const T* pi = ta.data();
  T* po = out.data();
  int64_t idx = 0;
  for (int64_t i0 = 0; i0 < di.d[0]; ++i0)
    for (int64_t i1 = 0; i1 < di.d[1]; ++i1)
      for (int64_t i2 = 0; i2 < di.d[2]; ++i2) {
        int64_t base = i0 * ostr.d[0] + i1 * ostr.d[1] + i2 * ostr.d[2];
        for (int64_t i3 = 0; i3 < di.d[3]; ++i3)
          po[base + i3 * ostr.d[3]] += pi[idx++];
      }
  bool ng = wants(a);
  Shape ishape = ta.shape();  // copy before emplace() may reallocate nodes_
  Value v = emplace(std::move(out), ng, "sum", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, ishape](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      Tensor<T> gx(ishape);
      Dims4 din = pad4(ishape);
      Dims4 gstr = strides4(pad4(gr.shape()), din);
      const T* pg = gr.data();
      T* pd = gx.data();
      int64_t k = 0;
      for (int64_t i0 = 0; i0 < din.d[0]; ++i0)
        for (int64_t i1 = 0; i1 < din.d[1]; ++i1)
          for (int64_t i2 = 0; i2 < din.d[2]; ++i2) {
            int64_t base = i0 * gstr.d[0] + i1 * gstr.d[1] + i2 * gstr.d[2];
            for (int64_t i3 = 0; i3 < din.d[3]; ++i3)
              pd[k++] = pg[base + i3 * gstr.d[3]];
          }
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::mean(Value a, const std::vector<int>& axes) {
  const Tensor<T>& ta = node(a).out;
  int64_t count = 1;
  for (int ax : axes) {
    if (ax < 0 || ax >= ta.shape().rank())
      throw ShapeError("reduce axis " + std::to_string(ax) + " out of range for " + ta.shape().str());
    count *= ta.shape()[ax];
  }
  Value s = sum(a, axes);
  return count == 1 ? s : scale(s, T(1) / static_cast<T>(count));
}

template <typename T>
typename Graph<T>::Value Graph<T>::sum_all(Value a) {
  const Shape& s = node(a).out.shape();
  std::vector<int> axes;
  for (int i = 0; i < s.rank(); ++i) axes.push_back(i);
  return reshape(sum(a, axes), Shape::scalar());
}

template <typename T>
typename Graph<T>::Value Graph<T>::mean_all(Value a) {
  int64_t n = node(a).out.numel();
  return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// --- structure --------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::reshape(Value a, Shape s) {
  const Tensor<T>& ta = node(a).out;
  if (ta.numel() != s.numel())
    throw ShapeError("reshape " + ta.shape().str() + " -> " + s.str() + " changes element count");
  Tensor<T> reshaped(s);
  std::memcpy(reshaped.data(), ta.data(), sizeof(T) * static_cast<size_t>(ta.numel()));
  bool ng = wants(a);
  Shape ishape = ta.shape();  // copy before emplace() may reallocate nodes_
  Value v = emplace(std::move(reshaped), ng, "reshape", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, ishape](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      Tensor<T> gx(ishape);
      std::memcpy(gx.data(), gr.data(), sizeof(T) * static_cast<size_t>(gr.numel()));
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::concat_channels(const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = node(parts[0]).out.shape();
  if (first.rank() != 4) throw ShapeError("concat expects rank-4 tensors");
  int64_t n = first[0], h = first[2], w = first[3], ctot = 0;
  for (Value p : parts) {
    const Shape& s = node(p).out.shape();
    if (s.rank() != 4 || s[0] != n || s[2] != h || s[3] != w)
      throw ShapeError("concat: mismatched shape " + s.str());
    ctot += s[1];
  }
  Tensor<T> out(Shape{n, ctot, h, w});
  int64_t hw = h * w;
  int64_t coff = 0;
  for (Value p : parts) {
    const Tensor<T>& tp = node(p).out;
    int64_t c = tp.shape()[1];
    for (int64_t in = 0; in < n; ++in)
      std::memcpy(out.data() + (in * ctot + coff) * hw, tp.data() + in * c * hw,
                  sizeof(T) * static_cast<size_t>(c * hw));
    coff += c;
  }
  bool ng = false;
  for (Value p : parts) ng = ng || wants(p);
  Value v = emplace(std::move(out), ng, "concat", nullptr);
  if (ng) {
    std::vector<int32_t> ids;
    std::vector<int64_t> chans;
    for (Value p : parts) {
      ids.push_back(p.id);
      chans.push_back(node(p).out.shape()[1]);
    }
    int32_t iv = v.id;
    node(v).backfn = [ids, chans, iv, n, hw, ctot](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      int64_t coff = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        int64_t c = chans[k];
        if (g.nodes_[ids[k]].needs_grad) {
          Tensor<T> gx(g.nodes_[ids[k]].out.shape());
          for (int64_t in = 0; in < n; ++in)
            std::memcpy(gx.data() + in * c * hw, gr.data() + (in * ctot + coff) * hw,
                        sizeof(T) * static_cast<size_t>(c * hw));
          g.add_grad(ids[k], std::move(gx));
        }
        coff += c;
      }
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::broadcast_hw(Value a, int64_t h, int64_t w) {
  const Tensor<T>& ta = node(a).out;
  const Shape& s = ta.shape();
  if (s.rank() != 4 || s[2] != 1 || s[3] != 1)
    throw ShapeError("broadcast_hw expects (N,C,1,1), got " + s.str());
  int64_t n = s[0], c = s[1];
  Tensor<T> out(Shape{n, c, h, w});
  const T* pa = ta.data();
  T* po = out.data();
  int64_t hw = h * w;
  for (int64_t i = 0; i < n * c; ++i) {
    T v = pa[i];
    for (int64_t j = 0; j < hw; ++j) po[i * hw + j] = v;
  }
  bool ng = wants(a);
  Value v = emplace(std::move(out), ng, "broadcast_hw", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, n, c, hw](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      Tensor<T> gx(Shape{n, c, 1, 1});
      const T* pg = gr.data();
      T* pd = gx.data();
      for (int64_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < hw; ++j) acc += pg[i * hw + j];
        pd[i] = acc;
      }
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

// --- conv2d -----------------------------------------------------------------

namespace {

// col is (IC*KH*KW) x (OH*OW) row-major for one sample.
template <typename T>
void im2col(const T* in, int64_t ic, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t oh,
            int64_t ow, int stride, int pad, T* col) {
  for (int64_t c = 0; c < ic; ++c) {
    const T* chan = in + c * h * w;
    for (int64_t r = 0; r < kh; ++r)
      for (int64_t s = 0; s < kw; ++s) {
        T* row = col + ((c * kh + r) * kw + s) * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          int64_t iy = y * stride - pad + r;
          if (iy < 0 || iy >= h) {
            for (int64_t x = 0; x < ow; ++x) row[y * ow + x] = T(0);
            continue;
          }
          for (int64_t x = 0; x < ow; ++x) {
            int64_t ix = x * stride - pad + s;
            row[y * ow + x] = (ix >= 0 && ix < w) ? chan[iy * w + ix] : T(0);
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t ic, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t oh,
                int64_t ow, int stride, int pad, T* in_grad) {
  for (int64_t c = 0; c < ic; ++c) {
    T* chan = in_grad + c * h * w;
    for (int64_t r = 0; r < kh; ++r)
      for (int64_t s = 0; s < kw; ++s) {
        const T* row = col + ((c * kh + r) * kw + s) * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          int64_t iy = y * stride - pad + r;
          if (iy < 0 || iy >= h) continue;
          for (int64_t x = 0; x < ow; ++x) {
            int64_t ix = x * stride - pad + s;
            if (ix >= 0 && ix < w) chan[iy * w + ix] += row[y * ow + x];
          }
        }
      }
  }
}

}  // namespace

template <typename T>
typename Graph<T>::Value Graph<T>::conv2d(Value in, Value weight, std::optional<Value> bias,
                                          int stride, int padding) {
  const Tensor<T>& tx = node(in).out;
  const Tensor<T>& tw = node(weight).out;
  if (tx.shape().rank() != 4 || tw.shape().rank() != 4)
    throw ShapeError("conv2d expects rank-4 input and weight");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: bad stride/padding");
  int64_t n = tx.shape()[0], ic = tx.shape()[1], h = tx.shape()[2], w = tx.shape()[3];
  int64_t oc = tw.shape()[0], kh = tw.shape()[2], kw = tw.shape()[3];
  if (tw.shape()[1] != ic)
    throw ShapeError("conv2d: weight expects " + std::to_string(tw.shape()[1]) + " input channels, got " + std::to_string(ic));
  int64_t oh = (h + 2 * padding - kh) / stride + 1;
  int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel larger than padded input");
  if (bias && node(*bias).out.shape() != Shape{oc})
    throw ShapeError("conv2d: bias shape must be (out_channels)");

  int64_t k = ic * kh * kw, s = oh * ow;
  Tensor<T> out(Shape{n, oc, oh, ow});
  std::vector<T> col(static_cast<size_t>(k * s));
  CMapMat<T> wmat(tw.data(), oc, k);
  for (int64_t i = 0; i < n; ++i) {
    im2col(tx.data() + i * ic * h * w, ic, h, w, kh, kw, oh, ow, stride, padding, col.data());
    CMapMat<T> cmat(col.data(), k, s);
    MapMat<T> omat(out.data() + i * oc * s, oc, s);
    omat.noalias() = wmat * cmat;
  }
  if (bias) {
    const T* pb = node(*bias).out.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < oc; ++c) {
        T b = pb[c];
        T* row = po + (i * oc + c) * s;
        for (int64_t j = 0; j < s; ++j) row[j] += b;
      }
  }

  bool ng = wants(in) || wants(weight) || (bias && wants(*bias));
  Value v = emplace(std::move(out), ng, "conv2d", nullptr);
  if (ng) {
    int32_t ix = in.id, iw = weight.id, iv = v.id;
    int32_t ibias = bias ? bias->id : -1;
    node(v).backfn = [=](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& x = g.nodes_[ix].out;
      const Tensor<T>& wt = g.nodes_[iw].out;
      std::vector<T> colbuf(static_cast<size_t>(k * s));
      if (ibias >= 0 && g.nodes_[ibias].needs_grad) {
        Tensor<T> gb(Shape{oc}, T(0));
        const T* pg = gr.data();
        T* pb = gb.data();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t c = 0; c < oc; ++c) {
            T acc = T(0);
            const T* row = pg + (i * oc + c) * s;
            for (int64_t j = 0; j < s; ++j) acc += row[j];
            pb[c] += acc;
          }
        g.add_grad(ibias, std::move(gb));
      }
      bool want_w = g.nodes_[iw].needs_grad;
      bool want_x = g.nodes_[ix].needs_grad;
      Tensor<T> gw;
      if (want_w) gw = Tensor<T>(wt.shape(), T(0));
      Tensor<T> gx;
      if (want_x) gx = Tensor<T>(x.shape(), T(0));
      std::vector<T> gcol(want_x ? static_cast<size_t>(k * s) : 0);
      CMapMat<T> wmat2(wt.data(), oc, k);
      for (int64_t i = 0; i < n; ++i) {
        CMapMat<T> gmat(gr.data() + i * oc * s, oc, s);
        if (want_w) {
          im2col(x.data() + i * ic * h * w, ic, h, w, kh, kw, oh, ow, stride, padding, colbuf.data());
          CMapMat<T> cmat(colbuf.data(), k, s);
          MapMat<T> gwmat(gw.data(), oc, k);
          gwmat.noalias() += gmat * cmat.transpose();
        }
        if (want_x) {
          MapMat<T> gcmat(gcol.data(), k, s);
          gcmat.noalias() = wmat2.transpose() * gmat;
          col2im_add(gcol.data(), ic, h, w, kh, kw, oh, ow, stride, padding,
                     gx.data() + i * ic * h * w);
        }
      }
      if (want_w) g.add_grad(iw, std::move(gw));
      if (want_x) g.add_grad(ix, std::move(gx));
    };
  }
  return v;
}

// --- matmul / pooling ---------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::matmul(Value a, Value b) {
  const Tensor<T>& ta = node(a).out;
  const Tensor<T>& tb = node(b).out;
  if (ta.shape().rank() != 2 || tb.shape().rank() != 2 || ta.shape()[1] != tb.shape()[0])
    throw ShapeError("matmul: " + ta.shape().str() + " x " + tb.shape().str());
  int64_t m = ta.shape()[0], k = ta.shape()[1], n = tb.shape()[1];
  Tensor<T> out(Shape{m, n});
  CMapMat<T> A(ta.data(), m, k);
  CMapMat<T> B(tb.data(), k, n);
  MapMat<T> O(out.data(), m, n);
  O.noalias() = A * B;
  bool ng = wants(a) || wants(b);
  Value v = emplace(std::move(out), ng, "matmul", nullptr);
  if (ng) {
    int32_t ia = a.id, ib = b.id, iv = v.id;
    node(v).backfn = [=](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      CMapMat<T> G(gr.data(), m, n);
      if (g.nodes_[ia].needs_grad) {
        Tensor<T> ga(Shape{m, k});
        CMapMat<T> B2(g.nodes_[ib].out.data(), k, n);
        MapMat<T>(ga.data(), m, k).noalias() = G * B2.transpose();
        g.add_grad(ia, std::move(ga));
      }
      if (g.nodes_[ib].needs_grad) {
        Tensor<T> gb(Shape{k, n});
        CMapMat<T> A2(g.nodes_[ia].out.data(), m, k);
        MapMat<T>(gb.data(), k, n).noalias() = A2.transpose() * G;
        g.add_grad(ib, std::move(gb));
      }
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::global_avg_pool(Value a) {
  const Tensor<T>& ta = node(a).out;
  if (ta.shape().rank() != 4) throw ShapeError("global_avg_pool expects rank-4");
  int64_t n = ta.shape()[0], c = ta.shape()[1], hw = ta.shape()[2] * ta.shape()[3];
  Tensor<T> out(Shape{n, c});
  const T* pa = ta.data();
  T* po = out.data();
  T inv = T(1) / static_cast<T>(hw);
  for (int64_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    for (int64_t j = 0; j < hw; ++j) acc += pa[i * hw + j];
    po[i] = acc * inv;
  }
  bool ng = wants(a);
  Shape ishape = ta.shape();  // copy before emplace() may reallocate nodes_
  Value v = emplace(std::move(out), ng, "global_avg_pool", nullptr);
  if (ng) {
    int32_t ia = a.id, iv = v.id;
    node(v).backfn = [ia, iv, ishape, hw, inv](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      Tensor<T> gx(ishape);
      const T* pg = gr.data();
      T* pd = gx.data();
      for (int64_t i = 0, nc = gr.numel(); i < nc; ++i) {
        T v2 = pg[i] * inv;
        for (int64_t j = 0; j < hw; ++j) pd[i * hw + j] = v2;
      }
      g.add_grad(ia, std::move(gx));
    };
  }
  return v;
}

// --- batch norm ---------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::batch_norm(Value x, Value gamma, Value beta, BnStats<T>& stats,
                                              BnMode mode, bool update_running_stats) {
  const Tensor<T>& tx = node(x).out;
  if (tx.shape().rank() != 4) throw ShapeError("batch_norm expects rank-4 input");
  int64_t n = tx.shape()[0], c = tx.shape()[1], hw = tx.shape()[2] * tx.shape()[3];
  if (node(gamma).out.shape() != Shape{c} || node(beta).out.shape() != Shape{c})
    throw ShapeError("batch_norm: gamma/beta must have shape (C)");
  if (stats.mean.shape() != Shape{c})
    throw ShapeError("batch_norm: stats channel mismatch");

  const T* px = tx.data();
  const T* pg = node(gamma).out.data();
  const T* pb = node(beta).out.data();
  Tensor<T> out(tx.shape());
  T* po = out.data();

  if (mode == BnMode::Eval) {
    if (stats.updates == 0)
      throw Error("batch_norm: eval mode requested before any running-stat update");
    Tensor<T> rinv(Shape{c});
    for (int64_t ch = 0; ch < c; ++ch) rinv[ch] = T(1) / std::sqrt(stats.var[ch] + kBnEps);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        T mu = stats.mean[ch], ri = rinv[ch], ga = pg[ch], be = pb[ch];
        const T* src = px + (i * c + ch) * hw;
        T* dst = po + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) dst[j] = ga * (src[j] - mu) * ri + be;
      }
    bool ng = wants(x) || wants(gamma) || wants(beta);
    Value v = emplace(std::move(out), ng, "batch_norm", nullptr);
    if (ng) {
      int32_t ix = x.id, iga = gamma.id, ibe = beta.id, iv = v.id;
      Tensor<T> mu = stats.mean, var = stats.var;
      node(v).backfn = [=](Graph& g) {
        const Tensor<T>& gr = g.nodes_[iv].grad;
        const Tensor<T>& xin = g.nodes_[ix].out;
        const T* pgr = gr.data();
        const T* pxi = xin.data();
        const T* pga = g.nodes_[iga].out.data();
        if (g.nodes_[iga].needs_grad || g.nodes_[ibe].needs_grad) {
          Tensor<T> dga(Shape{c}, T(0)), dbe(Shape{c}, T(0));
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
              T ri = T(1) / std::sqrt(var[ch] + kBnEps);
              const T* gp = pgr + (i * c + ch) * hw;
              const T* xp = pxi + (i * c + ch) * hw;
              T s1 = T(0), s2 = T(0);
              for (int64_t j = 0; j < hw; ++j) {
                s1 += gp[j];
                s2 += gp[j] * (xp[j] - mu[ch]) * ri;
              }
              dbe[ch] += s1;
              dga[ch] += s2;
            }
          if (g.nodes_[iga].needs_grad) g.add_grad(iga, std::move(dga));
          if (g.nodes_[ibe].needs_grad) g.add_grad(ibe, std::move(dbe));
        }
        if (g.nodes_[ix].needs_grad) {
          Tensor<T> dx(xin.shape());
          T* pdx = dx.data();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
              T coef = pga[ch] / std::sqrt(var[ch] + kBnEps);
              const T* gp = pgr + (i * c + ch) * hw;
              T* dp = pdx + (i * c + ch) * hw;
              for (int64_t j = 0; j < hw; ++j) dp[j] = gp[j] * coef;
            }
          g.add_grad(ix, std::move(dx));
        }
      };
    }
    return v;
  }

  // train mode: normalize by batch statistics
  int64_t m = n * hw;
  if (m < 2) throw ShapeError("batch_norm: train mode needs more than one value per channel");
  Tensor<T> mu(Shape{c}, T(0)), var(Shape{c}, T(0)), istd(Shape{c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = px + (i * c + ch) * hw;
      T acc = T(0);
      for (int64_t j = 0; j < hw; ++j) acc += src[j];
      mu[ch] += acc;
    }
  for (int64_t ch = 0; ch < c; ++ch) mu[ch] /= static_cast<T>(m);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = px + (i * c + ch) * hw;
      T acc = T(0), mv = mu[ch];
      for (int64_t j = 0; j < hw; ++j) {
        T d = src[j] - mv;
        acc += d * d;
      }
      var[ch] += acc;
    }
  for (int64_t ch = 0; ch < c; ++ch) {
    var[ch] /= static_cast<T>(m);  // biased, used for normalization
    istd[ch] = T(1) / std::sqrt(var[ch] + kBnEps);
  }
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      T mv = mu[ch], ri = istd[ch], ga = pg[ch], be = pb[ch];
      const T* src = px + (i * c + ch) * hw;
      T* dst = po + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) dst[j] = ga * (src[j] - mv) * ri + be;
    }

  if (update_running_stats) {
    T unbias = static_cast<T>(m) / static_cast<T>(m - 1);
    for (int64_t ch = 0; ch < c; ++ch) {
      stats.mean[ch] = (T(1) - kBnMomentum) * stats.mean[ch] + kBnMomentum * mu[ch];
      stats.var[ch] = (T(1) - kBnMomentum) * stats.var[ch] + kBnMomentum * var[ch] * unbias;
    }
    stats.updates++;
  }

  bool ng = wants(x) || wants(gamma) || wants(beta);
  Value v = emplace(std::move(out), ng, "batch_norm", nullptr);
  if (ng) {
    int32_t ix = x.id, iga = gamma.id, ibe = beta.id, iv = v.id;
    node(v).backfn = [=](Graph& g) {
      const Tensor<T>& gr = g.nodes_[iv].grad;
      const Tensor<T>& xin = g.nodes_[ix].out;
      const T* pgr = gr.data();
      const T* pxi = xin.data();
      const T* pga = g.nodes_[iga].out.data();
      // per-channel sums of g and g*xhat
      Tensor<T> s1(Shape{c}, T(0)), s2(Shape{c}, T(0));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          T mv = mu[ch], ri = istd[ch];
          const T* gp = pgr + (i * c + ch) * hw;
          const T* xp = pxi + (i * c + ch) * hw;
          T a1 = T(0), a2 = T(0);
          for (int64_t j = 0; j < hw; ++j) {
            a1 += gp[j];
            a2 += gp[j] * (xp[j] - mv) * ri;
          }
          s1[ch] += a1;
          s2[ch] += a2;
        }
      if (g.nodes_[ibe].needs_grad) {
        Tensor<T> dbe = s1;
        g.add_grad(ibe, std::move(dbe));
      }
      if (g.nodes_[iga].needs_grad) {
        Tensor<T> dga = s2;
        g.add_grad(iga, std::move(dga));
      }
      if (g.nodes_[ix].needs_grad) {
        Tensor<T> dx(xin.shape());
        T* pdx = dx.data();
        T invm = T(1) / static_cast<T>(m);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            T mv = mu[ch], ri = istd[ch], ga = pga[ch];
            T m1 = s1[ch] * invm, m2 = s2[ch] * invm;
            const T* gp = pgr + (i * c + ch) * hw;
            const T* xp = pxi + (i * c + ch) * hw;
            T* dp = pdx + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
              T xhat = (xp[j] - mv) * ri;
              dp[j] = ga * ri * (gp[j] - m1 - xhat * m2);
            }
          }
        g.add_grad(ix, std::move(dx));
      }
    };
  }
  return v;
}

// --- gradient reversal ----------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::grad_reverse(Value x, T lambda) {
  Tensor<T> out = node(x).out;  // bitwise copy
  bool ng = wants(x);
  Value v = emplace(std::move(out), ng, "grad_reverse", nullptr);
  if (ng) {
    int32_t ix = x.id, iv = v.id;
    node(v).backfn = [ix, iv, lambda](Graph& g) {
      g.add_grad_scaled(ix, g.nodes_[iv].grad, -lambda);
    };
  }
  return v;
}

// --- fused losses ----------------------------------------------------------------

template <typename T>
typename Graph<T>::Value Graph<T>::softmax_cross_entropy(Value logits, const std::vector<int>& labels) {
  const Tensor<T>& tl = node(logits).out;
  if (tl.shape().rank() != 2) throw ShapeError("softmax_cross_entropy expects rank-2 logits");
  int64_t n = tl.shape()[0], m = tl.shape()[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= m) throw ShapeError("softmax_cross_entropy: label out of range");

  Tensor<T> probs(tl.shape());
  const T* pl = tl.data();
  T* pp = probs.data();
  T loss = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T* row = pl + i * m;
    T mx = row[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < m; ++j) {
      T e = std::exp(row[j] - mx);
      pp[i * m + j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < m; ++j) pp[i * m + j] *= inv;
    loss += (mx + std::log(sum)) - row[labels[i]];
  }
  loss /= static_cast<T>(n);

  bool ng = wants(logits);
  Value v = emplace(Tensor<T>::scalar(loss), ng, "softmax_cross_entropy", nullptr);
  if (ng) {
    int32_t il = logits.id, iv = v.id;
    std::vector<int> lab = labels;
    node(v).backfn = [il, iv, lab, n, m, probs](Graph& g) {
      T gscale = g.nodes_[iv].grad.item() / static_cast<T>(n);
      Tensor<T> gx(Shape{n, m});
      const T* pp2 = probs.data();
      T* pd = gx.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j)
          pd[i * m + j] = (pp2[i * m + j] - (lab[i] == j ? T(1) : T(0))) * gscale;
      g.add_grad(il, std::move(gx));
    };
  }
  return v;
}

template <typename T>
typename Graph<T>::Value Graph<T>::bce_with_logits(Value logits, T target) {
  const Tensor<T>& tl = node(logits).out;
  int64_t cnt = tl.numel();
  const T* pl = tl.data();
  T loss = T(0);
  for (int64_t i = 0; i < cnt; ++i) loss += softplus(pl[i]) - target * pl[i];
  loss /= static_cast<T>(cnt);

  bool ng = wants(logits);
  Value v = emplace(Tensor<T>::scalar(loss), ng, "bce_with_logits", nullptr);
  if (ng) {
    int32_t il = logits.id, iv = v.id;
    node(v).backfn = [il, iv, target, cnt](Graph& g) {
      T gscale = g.nodes_[iv].grad.item() / static_cast<T>(cnt);
      const Tensor<T>& z = g.nodes_[il].out;
      Tensor<T> gx(z.shape());
      const T* pz = z.data();
      T* pd = gx.data();
      for (int64_t i = 0; i < cnt; ++i) pd[i] = (stable_sigmoid(pz[i]) - target) * gscale;
      g.add_grad(il, std::move(gx));
    };
  }
  return v;
}

// --- backward --------------------------------------------------------------------

template <typename T>
GradientMap<T> Graph<T>::backward(Value loss) {
  if (backward_done_) throw Error("backward already ran on this graph");
  Node& ln = node(loss);
  if (ln.out.numel() != 1) throw ShapeError("backward expects a scalar loss, got " + ln.out.shape().str());
  if (!ln.needs_grad) throw Error("backward: loss does not depend on any differentiable leaf");
  backward_done_ = true;

  ln.grad = Tensor<T>(ln.out.shape(), T(1));
  ln.has_grad = true;

  GradientMap<T> map;
  for (int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.has_grad) continue;
    if (!n.grad.all_finite()) throw NumericError("non-finite gradient in backward pass");
    if (n.backfn) n.backfn(*this);
    if (n.bound_param) map.accumulate(n.bound_param, n.grad);
  }
  return map;
}

template <typename T>
const Tensor<T>& Graph<T>::grad_of(Value v) const {
  const Node& n = node(v);
  if (!n.has_grad) throw Error("no gradient recorded for this value");
  return n.grad;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace dipnet
