#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aspectrec/kernels.hpp"
#include "aspectrec/param_store.hpp"
#include "aspectrec/tensor.hpp"

namespace aspectrec {

// Eager reverse-mode tape. Forward ops compute immediately and record a
// backward closure; backward() walks the recording in reverse (creation order
// is already topological). One tape per forward pass. Parameter leaves alias
// the store rather than copying; exported gradients are summed per slot.
//
// Heavier primitives (masked multi-head attention, the cross-entropy losses)
// are fused nodes with hand-derived backward rules; the gradient checker is
// the contract that keeps them honest.
template <class S>
class Tape {
 public:
  using Id = int;

  explicit Tape(ParamStore<S>& store) : store_(&store) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ------------------------------------------------------------- leaves
  Id param(int param_id) {
    auto it = param_leaf_.find(param_id);
    if (it != param_leaf_.end()) return it->second;
    Node n;
    n.param_id = param_id;
    const Id id = push(std::move(n));
    param_leaf_.emplace(param_id, id);
    return id;
  }

  Id constant(Tensor<S> v) {
    Node n;
    n.value = std::move(v);
    return push(std::move(n));
  }

  // ---------------------------------------------------------- accessors
  const Tensor<S>& value(Id id) const {
    const Node& n = nodes_[idx(id)];
    return n.param_id >= 0 ? store_->value(n.param_id) : n.value;
  }

  const Tensor<S>& grad(Id id) const {
    if (!ran_backward_) throw std::logic_error("grad() before backward()");
    return nodes_[idx(id)].grad;
  }

  // --------------------------------------------------------- primitives
  Id matmul(Id a, Id b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
      shape_error("matmul", av.shape_str(), bv.shape_str());
    const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor<S> out = Tensor<S>::matrix(m, n);
    kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
    return make(std::move(out), [a, b, m, k, n](Tape& t, Node& self) {
      kernels::matmul_a_bt(self.grad.data(), t.value(b).data(),
                           t.grad_of(a).data(), m, n, k, true);
      kernels::matmul_at_b(t.value(a).data(), self.grad.data(),
                           t.grad_of(b).data(), k, m, n, true);
    });
  }

  // Same-shape add, or row-broadcast when b is rank-1 (or 1 x n) against an
  // (m x n) a.
  Id add(Id a, Id b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.same_shape(bv)) {
      Tensor<S> out = av;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
      return make(std::move(out), [a, b](Tape& t, Node& self) {
        accumulate(t.grad_of(a), self.grad);
        accumulate(t.grad_of(b), self.grad);
      });
    }
    const bool b_is_row =
        av.rank() == 2 &&
        ((bv.rank() == 1 && bv.shape[0] == av.shape[1]) ||
         (bv.rank() == 2 && bv.shape[0] == 1 && bv.shape[1] == av.shape[1]));
    if (!b_is_row) shape_error("add", av.shape_str(), bv.shape_str());
    const std::size_t m = av.shape[0], n = av.shape[1];
    Tensor<S> out = av;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
    return make(std::move(out), [a, b, m, n](Tape& t, Node& self) {
      accumulate(t.grad_of(a), self.grad);
      Tensor<S>& gb = t.grad_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    });
  }

  Id mul(Id a, Id b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (!av.same_shape(bv)) shape_error("mul", av.shape_str(), bv.shape_str());
    Tensor<S> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make(std::move(out), [a, b](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      Tensor<S>& gb = t.grad_of(b);
      const Tensor<S>& av2 = t.value(a);
      const Tensor<S>& bv2 = t.value(b);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        ga[i] += self.grad[i] * bv2[i];
        gb[i] += self.grad[i] * av2[i];
      }
    });
  }

  Id scale(Id a, S c) {
    Tensor<S> out = value(a);
    for (S& v : out.values) v *= c;
    return make(std::move(out), [a, c](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ga[i] += c * self.grad[i];
    });
  }

  // N-ary axis-0 concatenation. Rank-1 inputs chain into a longer rank-1
  // vector; rank-2 inputs with equal widths stack rows.
  Id concat(std::vector<Id> parts) {
    if (parts.empty()) throw std::invalid_argument("concat of nothing");
    const Tensor<S>& first = value(parts[0]);
    if (first.rank() > 2)
      throw std::invalid_argument("concat supports rank <= 2");
    Tensor<S> out;
    if (first.rank() <= 1) {
      std::size_t total = 0;
      for (Id p : parts) {
        if (value(p).rank() > 1)
          shape_error("concat", first.shape_str(), value(p).shape_str());
        total += value(p).size();
      }
      out.shape = {total};
      out.values.reserve(total);
      for (Id p : parts)
        out.values.insert(out.values.end(), value(p).values.begin(),
                          value(p).values.end());
    } else {
      const std::size_t ncols = first.shape[1];
      std::size_t total_rows = 0;
      for (Id p : parts) {
        const Tensor<S>& v = value(p);
        if (v.rank() != 2 || v.shape[1] != ncols)
          shape_error("concat", first.shape_str(), v.shape_str());
        total_rows += v.shape[0];
      }
      out = Tensor<S>::matrix(total_rows, ncols);
      std::size_t row = 0;
      for (Id p : parts) {
        const Tensor<S>& v = value(p);
        std::copy(v.values.begin(), v.values.end(),
                  out.values.begin() + row * ncols);
        row += v.shape[0];
      }
    }
    return make(std::move(out), [parts = std::move(parts)](Tape& t,
                                                           Node& self) {
      std::size_t off = 0;
      for (Id p : parts) {
        Tensor<S>& gp = t.grad_of(p);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[off + i];
        off += gp.size();
      }
    });
  }

  Id concat2(Id a, Id b) { return concat({a, b}); }

  // Gather rows of a (rows x d) table; backward scatter-adds.
  Id embedding_rows(Id table, std::vector<int> ids) {
    const Tensor<S>& tv = value(table);
    if (tv.rank() != 2)
      throw std::invalid_argument("embedding_rows: table must be rank 2");
    const std::size_t d = tv.shape[1];
    for (int r : ids)
      if (r < 0 || static_cast<std::size_t>(r) >= tv.shape[0])
        throw std::out_of_range("embedding_rows: id " + std::to_string(r) +
                                " out of range for table " + tv.shape_str());
    Tensor<S> out = Tensor<S>::matrix(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy(tv.data() + static_cast<std::size_t>(ids[i]) * d,
                tv.data() + static_cast<std::size_t>(ids[i] + 1) * d,
                out.data() + i * d);
    return make(std::move(out),
                [table, ids = std::move(ids), d](Tape& t, Node& self) {
                  Tensor<S>& gt = t.grad_of(table);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    S* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                    const S* src = self.grad.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                  }
                });
  }

  Id take_row(Id a, std::size_t row) {
    const Tensor<S>& av = value(a);
    if (av.rank() != 2 || row >= av.shape[0])
      throw std::out_of_range("take_row: row " + std::to_string(row) + " of " +
                              av.shape_str());
    const std::size_t d = av.shape[1];
    Tensor<S> out = Tensor<S>::matrix(1, d);
    std::copy(av.data() + row * d, av.data() + (row + 1) * d, out.data());
    return make(std::move(out), [a, row, d](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t j = 0; j < d; ++j) ga[row * d + j] += self.grad[j];
    });
  }

  Id slice_rows(Id a, std::size_t r0, std::size_t r1) {
    const Tensor<S>& av = value(a);
    if (av.rank() != 2 || r0 > r1 || r1 > av.shape[0])
      throw std::out_of_range("slice_rows bounds for " + av.shape_str());
    const std::size_t d = av.shape[1];
    Tensor<S> out = Tensor<S>::matrix(r1 - r0, d);
    std::copy(av.data() + r0 * d, av.data() + r1 * d, out.data());
    return make(std::move(out), [a, r0, d](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ga[r0 * d + i] += self.grad[i];
    });
  }

  // Copy into a rank-1 vector (gradient passes through untouched).
  Id flatten(Id a) {
    const Tensor<S>& av = value(a);
    Tensor<S> out;
    out.shape = {av.size()};
    out.values = av.values;
    return make(std::move(out), [a](Tape& t, Node& self) {
      accumulate(t.grad_of(a), self.grad);
    });
  }

  // Single element as a scalar node.
  Id slice_elem(Id a, std::size_t i) {
    const Tensor<S>& av = value(a);
    if (i >= av.size())
      throw std::out_of_range("slice_elem: index " + std::to_string(i) +
                              " of " + av.shape_str());
    return make(Tensor<S>::scalar(av[i]), [a, i](Tape& t, Node& self) {
      t.grad_of(a)[i] += self.grad[0];
    });
  }

  // Sum of all elements as a scalar.
  Id sum_elements(Id a) {
    const Tensor<S>& av = value(a);
    S s = S(0);
    for (const S v : av.values) s += v;
    return make(Tensor<S>::scalar(s), [a](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0];
    });
  }

  // Multiply a tensor by a scalar node (broadcast).
  Id scale_by(Id a, Id scalar) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& sv = value(scalar);
    if (sv.size() != 1)
      shape_error("scale_by", av.shape_str(), sv.shape_str());
    Tensor<S> out = av;
    for (S& v : out.values) v *= sv[0];
    return make(std::move(out), [a, scalar](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      Tensor<S>& gs = t.grad_of(scalar);
      const Tensor<S>& av2 = t.value(a);
      const S s = t.value(scalar)[0];
      for (std::size_t i = 0; i < av2.size(); ++i) {
        ga[i] += self.grad[i] * s;
        gs[0] += self.grad[i] * av2[i];
      }
    });
  }

  Id mean_rows(Id a) {
    const Tensor<S>& av = value(a);
    if (av.rank() != 2) throw std::invalid_argument("mean_rows: rank 2 only");
    const std::size_t m = av.shape[0], d = av.shape[1];
    Tensor<S> out = Tensor<S>::matrix(1, d);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += av[i * d + j];
    const S inv = S(1) / static_cast<S>(m);
    for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    return make(std::move(out), [a, m, d, inv](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += self.grad[j] * inv;
    });
  }

  // Reshape a rank-1 vector into rows of the given width, zero-padding the
  // tail of the last row.
  Id reshape_rows_pad(Id a, std::size_t width) {
    const Tensor<S>& av = value(a);
    if (av.rank() != 1 || width == 0)
      throw std::invalid_argument("reshape_rows_pad: rank-1 input required");
    const std::size_t n = av.size();
    const std::size_t rows = (n + width - 1) / width;
    Tensor<S> out = Tensor<S>::matrix(rows, width);
    std::copy(av.values.begin(), av.values.end(), out.values.begin());
    return make(std::move(out), [a, n](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    });
  }

  // Softmax along the stated axis: rank-1 vectors use axis 0, matrices
  // normalize each row with axis 1. Outputs sum to 1 along that axis.
  Id softmax(Id a, int axis) {
    const Tensor<S>& av = value(a);
    std::size_t rows, n;
    if (av.rank() == 1 && axis == 0) {
      rows = 1;
      n = av.shape[0];
    } else if (av.rank() == 2 && axis == 1) {
      rows = av.shape[0];
      n = av.shape[1];
    } else {
      throw std::invalid_argument("softmax: unsupported axis for " +
                                  av.shape_str());
    }
    Tensor<S> out;
    out.shape = av.shape;
    out.values.resize(av.size());
    kernels::softmax_rows(av.data(), out.data(), rows, n);
    return make(std::move(out), [a, rows, n](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      const Tensor<S>& y = self.value;
      for (std::size_t i = 0; i < rows; ++i) {
        const S* yr = y.data() + i * n;
        const S* gr = self.grad.data() + i * n;
        S dot = S(0);
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        S* gar = ga.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) gar[j] += (gr[j] - dot) * yr[j];
      }
    });
  }

  Id sigmoid(Id a) {
    Tensor<S> out = value(a);
    for (S& v : out.values) v = S(1) / (S(1) + std::exp(-v));
    return make(std::move(out), [a](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      const Tensor<S>& y = self.value;
      for (std::size_t i = 0; i < y.size(); ++i)
        ga[i] += self.grad[i] * y[i] * (S(1) - y[i]);
    });
  }

  // tanh-approximation GELU; smooth everywhere, which keeps finite-difference
  // checks clean.
  Id gelu(Id a) {
    Tensor<S> out = value(a);
    for (S& v : out.values) v = gelu_fwd(v);
    return make(std::move(out), [a](Tape& t, Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      const Tensor<S>& x = t.value(a);
      for (std::size_t i = 0; i < x.size(); ++i)
        ga[i] += self.grad[i] * gelu_bwd(x[i]);
    });
  }

  // Row layer norm: y = (x - mean) / sqrt(var + eps) * gain + bias.
  Id layer_norm(Id a, Id gain, Id bias) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& gv = value(gain);
    const Tensor<S>& bv = value(bias);
    if (av.rank() != 2 || gv.size() != av.shape[1] || bv.size() != av.shape[1])
      shape_error("layer_norm", av.shape_str(), gv.shape_str());
    const std::size_t m = av.shape[0], n = av.shape[1];
    constexpr S eps = S(1e-5);
    Tensor<S> out = Tensor<S>::matrix(m, n);
    // stash row layout: n normalized values followed by inv_std
    auto stash = std::make_shared<Tensor<S>>(Tensor<S>::matrix(m, n + 1));
    for (std::size_t i = 0; i < m; ++i) {
      const S* x = av.data() + i * n;
      S mean = S(0);
      for (std::size_t j = 0; j < n; ++j) mean += x[j];
      mean /= static_cast<S>(n);
      S var = S(0);
      for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= static_cast<S>(n);
      const S inv_std = S(1) / std::sqrt(var + eps);
      S* xhat = stash->data() + i * (n + 1);
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (x[j] - mean) * inv_std;
        out.at(i, j) = xhat[j] * gv[j] + bv[j];
      }
      xhat[n] = inv_std;
    }
    return make(std::move(out), [a, gain, bias, stash, m, n](Tape& t,
                                                             Node& self) {
      Tensor<S>& ga = t.grad_of(a);
      Tensor<S>& gg = t.grad_of(gain);
      Tensor<S>& gb = t.grad_of(bias);
      const Tensor<S>& gvv = t.value(gain);
      for (std::size_t i = 0; i < m; ++i) {
        const S* xhat = stash->data() + i * (n + 1);
        const S inv_std = xhat[n];
        const S* dy = self.grad.data() + i * n;
        S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
        for (std::size_t j = 0; j < n; ++j) {
          const S dxhat = dy[j] * gvv[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat[j];
          gg[j] += dy[j] * xhat[j];
          gb[j] += dy[j];
        }
        const S inv_n = S(1) / static_cast<S>(n);
        S* gar = ga.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const S dxhat = dy[j] * gvv[j];
          gar[j] += inv_std * (dxhat - inv_n * sum_dxhat -
                               xhat[j] * inv_n * sum_dxhat_xhat);
        }
      }
    });
  }

  // Fused causal multi-head self-attention. Position t attends to positions
  // <= t; masked score entries are forced so far negative that exp underflows
  // to exact zero, which is what makes the causality invariants bitwise.
  Id causal_self_attention(Id x, Id wq, Id bq, Id wk, Id bk, Id wv, Id bv,
                           Id wo, Id bo, int heads) {
    const Tensor<S>& xv = value(x);
    if (xv.rank() != 2) shape_error("attention", xv.shape_str(), "(L x d)");
    const std::size_t L = xv.shape[0], d = xv.shape[1];
    if (heads <= 0 || d % static_cast<std::size_t>(heads) != 0)
      throw std::invalid_argument("attention: heads must divide width");
    const std::size_t H = static_cast<std::size_t>(heads), hd = d / H;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));

    auto st = std::make_shared<AttnStash>();
    st->q = project(xv, value(wq), value(bq));
    st->k = project(xv, value(wk), value(bk));
    st->v = project(xv, value(wv), value(bv));
    st->probs.assign(H, Tensor<S>::matrix(L, L));
    st->ctx = Tensor<S>::matrix(L, d);

    Tensor<S> scores = Tensor<S>::matrix(L, L);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const S* qrow = st->q.data() + i * d + h * hd;
        for (std::size_t j = 0; j < L; ++j) {
          if (j > i) {
            scores.at(i, j) = mask_value();
            continue;
          }
          const S* krow = st->k.data() + j * d + h * hd;
          S acc = S(0);
          for (std::size_t p = 0; p < hd; ++p) acc += qrow[p] * krow[p];
          scores.at(i, j) = acc * inv_sqrt;
        }
      }
      kernels::softmax_rows(scores.data(), st->probs[h].data(), L, L);
      for (std::size_t i = 0; i < L; ++i) {
        S* crow = st->ctx.data() + i * d + h * hd;
        const S* prow = st->probs[h].data() + i * L;
        for (std::size_t j = 0; j <= i; ++j) {
          const S pj = prow[j];
          const S* vrow = st->v.data() + j * d + h * hd;
          for (std::size_t p = 0; p < hd; ++p) crow[p] += pj * vrow[p];
        }
      }
    }
    Tensor<S> out = Tensor<S>::matrix(L, d);
    kernels::matmul(st->ctx.data(), value(wo).data(), out.data(), L, d, d);
    const Tensor<S>& bov = value(bo);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bov[j];

    return make(std::move(out), [x, wq, bq, wk, bk, wv, bv, wo, bo, st, L, d,
                                 H, hd, inv_sqrt](Tape& t, Node& self) {
      Tensor<S> dctx = Tensor<S>::matrix(L, d);
      kernels::matmul_a_bt(self.grad.data(), t.value(wo).data(), dctx.data(),
                           L, d, d);
      kernels::matmul_at_b(st->ctx.data(), self.grad.data(),
                           t.grad_of(wo).data(), d, L, d, true);
      {
        Tensor<S>& gbo = t.grad_of(bo);
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < d; ++j) gbo[j] += self.grad[i * d + j];
      }
      Tensor<S> dq = Tensor<S>::matrix(L, d);
      Tensor<S> dk = Tensor<S>::matrix(L, d);
      Tensor<S> dv = Tensor<S>::matrix(L, d);
      Tensor<S> dprobs = Tensor<S>::matrix(L, L);
      Tensor<S> dscores = Tensor<S>::matrix(L, L);
      for (std::size_t h = 0; h < H; ++h) {
        const Tensor<S>& probs = st->probs[h];
        for (std::size_t i = 0; i < L; ++i) {
          const S* dcrow = dctx.data() + i * d + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const S* vrow = st->v.data() + j * d + h * hd;
            S acc = S(0);
            for (std::size_t p = 0; p < hd; ++p) acc += dcrow[p] * vrow[p];
            dprobs.at(i, j) = acc;
            const S pj = probs.at(i, j);
            S* dvrow = dv.data() + j * d + h * hd;
            for (std::size_t p = 0; p < hd; ++p) dvrow[p] += pj * dcrow[p];
          }
        }
        // softmax backward per row; the inv_sqrt scale of the scores folds in
        // here, and masked entries stay zero
        for (std::size_t i = 0; i < L; ++i) {
          const S* prow = probs.data() + i * L;
          S dot = S(0);
          for (std::size_t j = 0; j <= i; ++j) dot += dprobs.at(i, j) * prow[j];
          for (std::size_t j = 0; j < L; ++j)
            dscores.at(i, j) =
                j <= i ? (dprobs.at(i, j) - dot) * prow[j] * inv_sqrt : S(0);
        }
        for (std::size_t i = 0; i < L; ++i) {
          S* dqrow = dq.data() + i * d + h * hd;
          const S* qrow = st->q.data() + i * d + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const S ds = dscores.at(i, j);
            const S* krow = st->k.data() + j * d + h * hd;
            S* dkrow = dk.data() + j * d + h * hd;
            for (std::size_t p = 0; p < hd; ++p) {
              dqrow[p] += ds * krow[p];
              dkrow[p] += ds * qrow[p];
            }
          }
        }
      }
      t.project_backward(x, wq, bq, dq);
      t.project_backward(x, wk, bk, dk);
      t.project_backward(x, wv, bv, dv);
    });
  }

  // Mean next-token cross entropy: logits row i is scored against targets[i].
  Id cross_entropy_rows(Id logits, std::vector<int> targets) {
    const Tensor<S>& lv = value(logits);
    if (lv.rank() != 2 || lv.shape[0] != targets.size())
      shape_error("cross_entropy_rows", lv.shape_str(),
                  "(" + std::to_string(targets.size()) + " targets)");
    const std::size_t m = lv.shape[0], n = lv.shape[1];
    for (int tgt : targets)
      if (tgt < 0 || static_cast<std::size_t>(tgt) >= n)
        throw std::out_of_range("cross_entropy_rows: target out of range");
    auto probs = std::make_shared<Tensor<S>>(Tensor<S>::matrix(m, n));
    kernels::softmax_rows(lv.data(), probs->data(), m, n);
    double loss = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const S* row = lv.data() + i * n;
      S mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
      loss += static_cast<double>(mx) + std::log(static_cast<double>(sum)) -
              static_cast<double>(row[targets[i]]);
    }
    loss /= static_cast<double>(m);
    return make(Tensor<S>::scalar(static_cast<S>(loss)),
                [logits, targets = std::move(targets), probs, m,
                 n](Tape& t, Node& self) {
                  Tensor<S>& gl = t.grad_of(logits);
                  const S g = self.grad[0] / static_cast<S>(m);
                  for (std::size_t i = 0; i < m; ++i) {
                    const S* prow = probs->data() + i * n;
                    S* grow = gl.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) grow[j] += g * prow[j];
                    grow[static_cast<std::size_t>(targets[i])] -= g;
                  }
                });
  }

  // Multi-label cross entropy over one shared softmax (rank-1 logits):
  // loss = sum_k (logsumexp(l) - l[truth_k]).
  Id multilabel_cross_entropy(Id logits, const std::vector<int>& truth) {
    const Tensor<S>& lv = value(logits);
    const std::size_t n = lv.size();
    if (truth.empty())
      throw std::invalid_argument("multilabel_cross_entropy: empty truth");
    for (int a : truth)
      if (a < 0 || static_cast<std::size_t>(a) >= n)
        throw std::out_of_range(
            "multilabel_cross_entropy: truth id out of range");
    S mx = lv[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(lv[j] - mx);
    const S lse = mx + std::log(sum);
    S loss = S(0);
    for (int a : truth) loss += lse - lv[a];
    const S k = static_cast<S>(truth.size());
    auto counts = std::make_shared<std::vector<int>>(n, 0);
    for (int a : truth) (*counts)[a] += 1;
    return make(Tensor<S>::scalar(loss),
                [logits, counts, k, n](Tape& t, Node& self) {
                  Tensor<S>& gl = t.grad_of(logits);
                  const Tensor<S>& lv2 = t.value(logits);
                  Tensor<S> p;
                  p.shape = {n};
                  p.values.resize(n);
                  kernels::softmax_rows(lv2.data(), p.data(), 1, n);
                  const S g = self.grad[0];
                  for (std::size_t j = 0; j < n; ++j)
                    gl[j] += g * (k * p[j] - static_cast<S>((*counts)[j]));
                });
  }

  // Sum of squared errors against a fixed target.
  Id sum_squared_error(Id pred, Tensor<S> target) {
    const Tensor<S>& pv = value(pred);
    if (pv.size() != target.size())
      shape_error("sum_squared_error", pv.shape_str(), target.shape_str());
    S loss = S(0);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const S d = pv[i] - target[i];
      loss += d * d;
    }
    auto tgt = std::make_shared<Tensor<S>>(std::move(target));
    return make(Tensor<S>::scalar(loss), [pred, tgt](Tape& t, Node& self) {
      Tensor<S>& gp = t.grad_of(pred);
      const Tensor<S>& pv2 = t.value(pred);
      for (std::size_t i = 0; i < pv2.size(); ++i)
        gp[i] += self.grad[0] * S(2) * (pv2[i] - (*tgt)[i]);
    });
  }

  Id add_many(const std::vector<Id>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_many of nothing");
    Id acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
  }

  // Custom node escape hatch (tests use it to inject a corrupted backward
  // rule as a negative control).
  Id custom(Tensor<S> value,
            std::function<void(Tape&, const Tensor<S>& upstream)> back) {
    return make(std::move(value), [back = std::move(back)](Tape& t,
                                                           Node& self) {
      back(t, self.grad);
    });
  }

  Tensor<S>& grad_of(Id id) { return nodes_[idx(id)].grad; }

  // ----------------------------------------------------------- backward
  void backward(Id loss) {
    const Tensor<S>& lv = value(loss);
    if (lv.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  lv.shape_str());
    for (Node& n : nodes_) n.grad = Tensor<S>(node_value(n).shape);
    nodes_[idx(loss)].grad.values[0] = S(1);
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].back) nodes_[i].back(*this, nodes_[i]);
    ran_backward_ = true;
  }

  // Adds this tape's parameter gradients into `out` (trainable params only).
  void export_grads(Gradients<S>& out) const {
    for (const auto& [pid, node_id] : param_leaf_) {
      if (!store_->trainable(pid)) continue;
      const Node& n = nodes_[idx(node_id)];
      if (n.grad.size() == 0) continue;
      Tensor<S>& slot = out.slot_for(*store_, pid);
      for (std::size_t i = 0; i < n.grad.size(); ++i) slot[i] += n.grad[i];
    }
  }

  ParamStore<S>& store() { return *store_; }

 private:
  struct Node {
    Tensor<S> value;  // owned storage; param leaves read the store instead
    Tensor<S> grad;
    int param_id = -1;
    std::function<void(Tape&, Node&)> back;
  };

  struct AttnStash {
    Tensor<S> q, k, v, ctx;
    std::vector<Tensor<S>> probs;
  };

  static std::size_t idx(Id id) { return static_cast<std::size_t>(id); }

  static constexpr S mask_value() { return S(-1e30); }

  const Tensor<S>& node_value(const Node& n) const {
    return n.param_id >= 0 ? store_->value(n.param_id) : n.value;
  }

  static void accumulate(Tensor<S>& dst, const Tensor<S>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }

  Tensor<S> project(const Tensor<S>& x, const Tensor<S>& w,
                    const Tensor<S>& b) const {
    if (w.rank() != 2 || x.shape[1] != w.shape[0] || b.size() != w.shape[1])
      shape_error("attention projection", x.shape_str(), w.shape_str());
    const std::size_t m = x.shape[0], k = x.shape[1], n = w.shape[1];
    Tensor<S> out = Tensor<S>::matrix(m, n);
    kernels::matmul(x.data(), w.data(), out.data(), m, k, n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    return out;
  }

  void project_backward(Id x, Id w, Id b, const Tensor<S>& dy) {
    const Tensor<S>& xv = value(x);
    const Tensor<S>& wv = value(w);
    const std::size_t m = xv.shape[0], k = xv.shape[1], n = wv.shape[1];
    kernels::matmul_a_bt(dy.data(), wv.data(), grad_of(x).data(), m, n, k,
                         true);
    kernels::matmul_at_b(xv.data(), dy.data(), grad_of(w).data(), k, m, n,
                         true);
    Tensor<S>& gb = grad_of(b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
  }

  Id make(Tensor<S> value, std::function<void(Tape&, Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    return push(std::move(n));
  }

  Id push(Node n) {
    nodes_.push_back(std::move(n));
#ifdef ASPECTREC_CHECK_FINITE
    for (const S v : node_value(nodes_.back()).values)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error("non-finite value produced by a primitive");
#endif
    return static_cast<Id>(nodes_.size() - 1);
  }

  static S gelu_fwd(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
  }

  static S gelu_bwd(S x) {
    const S c = S(0.7978845608028654);
    const S u = c * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(u);
    const S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
  }

  ParamStore<S>* store_;
  std::vector<Node> nodes_;
  std::unordered_map<int, Id> param_leaf_;
  bool ran_backward_ = false;
};

}  // namespace aspectrec
