#include <lofa/autodiff.hpp>

#include <atomic>
#include <cassert>
#include <cmath>
#include <limits>

namespace lofa::ad {

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands recorded on different tapes");
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

std::atomic<size_t> g_backward_calls{0};

bool any_grad(Var a) { return a.tape()->requires_grad(a.id()); }
bool any_grad(Var a, Var b) { return any_grad(a) || any_grad(b); }

}  // namespace

Var Tape::param(Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = grad_enabled_ ? &p : nullptr;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return {this, id};
}

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Mat value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

size_t backward_calls() { return g_backward_calls.load(); }

void Tape::backward(Var loss) {
  ++g_backward_calls;
  if (loss.tape() != this) throw std::logic_error("backward on foreign variable");
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward expects a 1x1 loss");
  if (!requires_grad(loss.id())) return;
  grad(loss.id()).setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Tape& t = *a.tape();
  Mat out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Tape& t = *a.tape();
  Mat out;
  out.noalias() = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), any_grad(a, b), [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
    if (t.requires_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), any_grad(a, b), [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), any_grad(a, b), [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), any_grad(a, b),
                          [ia, ib](Tape& t, int self) {
                            const Mat& g = t.grad(self);
                            if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
                            if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
                          });
}

Var scale(Var a, float s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, any_grad(a), [ia, s](Tape& t, int self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return a.tape()->record(std::move(out), any_grad(a, row), [ia, ir](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

Var gather_rows(Var table, std::span<const int> index) {
  const Mat& src = table.value();
  Mat out(static_cast<Eigen::Index>(index.size()), src.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= src.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = src.row(index[i]);
  }
  const int it = table.id();
  std::vector<int> idx(index.begin(), index.end());
  return table.tape()->record(std::move(out), any_grad(table),
                              [it, idx = std::move(idx)](Tape& t, int self) {
                                const Mat& g = t.grad(self);
                                Mat& gt = t.grad(it);
                                for (size_t i = 0; i < idx.size(); ++i) {
                                  gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                                }
                              });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& tape = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool req = false;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw std::logic_error("operands recorded on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    req = req || any_grad(p);
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    layout.emplace_back(p.id(), r);
    r += p.rows();
  }
  return tape.record(std::move(out), req, [layout = std::move(layout)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (const auto& [id, offset] : layout) {
      if (!t.requires_grad(id)) continue;
      Mat& gp = t.grad(id);
      gp += g.middleRows(offset, gp.rows());
    }
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeError("slice_rows: out of range");
  const int ia = a.id();
  return a.tape()->record(a.value().middleRows(begin, count), any_grad(a),
                          [ia, begin, count](Tape& t, int self) {
                            t.grad(ia).middleRows(begin, count) += t.grad(self);
                          });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: size mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a), [ia](Tape& t, int self) {
    Mat& ga = t.grad(ia);
    const Mat& g = t.grad(self);
    Eigen::Map<Mat>(ga.data(), g.rows(), g.cols()) += g;
  });
}

Var group_mean(Var a, Eigen::Index group, std::span<const int> lens) {
  if (group <= 0 || a.rows() % group != 0) throw ShapeError("group_mean: rows not divisible by group");
  const Eigen::Index groups = a.rows() / group;
  if (!lens.empty() && static_cast<Eigen::Index>(lens.size()) != groups) {
    throw ShapeError("group_mean: lens size mismatch");
  }
  std::vector<int> counts(static_cast<size_t>(groups), static_cast<int>(group));
  if (!lens.empty()) counts.assign(lens.begin(), lens.end());
  Mat out(groups, a.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    const int c = counts[static_cast<size_t>(g)];
    if (c <= 0 || c > group) throw ShapeError("group_mean: invalid group length");
    out.row(g) = a.value().middleRows(g * group, c).colwise().sum() / static_cast<float>(c);
  }
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a),
                          [ia, group, counts = std::move(counts)](Tape& t, int self) {
                            const Mat& g = t.grad(self);
                            Mat& ga = t.grad(ia);
                            for (Eigen::Index gi = 0; gi < g.rows(); ++gi) {
                              const int c = counts[static_cast<size_t>(gi)];
                              const auto row = g.row(gi) / static_cast<float>(c);
                              for (int r = 0; r < c; ++r) ga.row(gi * group + r) += row;
                            }
                          });
}

Var silu(Var a) {
  const Mat& x = a.value();
  Mat sig = (1.0f + (-x.array()).exp()).inverse().matrix();
  Mat out = x.cwiseProduct(sig);
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a), [ia, sig = std::move(sig)](Tape& t, int self) {
    const Mat& x = t.value(ia);
    const auto s = sig.array();
    t.grad(ia).array() += t.grad(self).array() * (s * (1.0f + x.array() * (1.0f - s)));
  });
}

Var sigmoid(Var a) {
  Mat out = (1.0f + (-a.value().array()).exp()).inverse().matrix();
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a), [ia](Tape& t, int self) {
    const auto s = t.value(self).array();
    t.grad(ia).array() += t.grad(self).array() * s * (1.0f - s);
  });
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias shape mismatch");
  }
  Mat xhat(n, d);
  Eigen::VectorXf inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i).array();
    const float mu = row.mean();
    const float var = (row - mu).square().mean();
    inv_std(i) = 1.0f / std::sqrt(var + eps);
    xhat.row(i) = ((row - mu) * inv_std(i)).matrix();
  }
  Mat out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool req = any_grad(x) || any_grad(gain) || any_grad(bias);
  return x.tape()->record(
      std::move(out), req,
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (!t.requires_grad(ix)) return;
        Mat dxhat = g;
        dxhat.array().rowwise() *= t.value(ig).row(0).array();
        Mat& gx = t.grad(ix);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          const auto dh = dxhat.row(i).array();
          const auto xh = xhat.row(i).array();
          const float m1 = dh.mean();
          const float m2 = (dh * xh).mean();
          gx.row(i).array() += inv_std(i) * (dh - m1 - xh * m2);
        }
      });
}

Var attention(Var q, Var k, Var v, int heads, Eigen::Index tq, Eigen::Index tk,
              std::span<const int> key_lens) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: width mismatch");
  if (tq <= 0 || tk <= 0 || q.rows() % tq != 0) throw ShapeError("attention: bad query grouping");
  const Eigen::Index groups = q.rows() / tq;
  if (k.rows() != groups * tk || v.rows() != groups * tk) throw ShapeError("attention: bad key grouping");
  if (!key_lens.empty() && static_cast<Eigen::Index>(key_lens.size()) != groups) {
    throw ShapeError("attention: key_lens size mismatch");
  }
  const Eigen::Index hd = d / heads;
  const float scale_f = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<int> lens(static_cast<size_t>(groups), static_cast<int>(tk));
  if (!key_lens.empty()) lens.assign(key_lens.begin(), key_lens.end());

  // probs[g * heads + h] is tq x len(g).
  std::vector<Mat> probs(static_cast<size_t>(groups * heads));
  Mat out(q.rows(), d);
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  for (Eigen::Index g = 0; g < groups; ++g) {
    const int len = lens[static_cast<size_t>(g)];
    if (len <= 0 || len > tk) throw ShapeError("attention: invalid key length");
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qh = Q.block(g * tq, h * hd, tq, hd);
      const auto kh = K.block(g * tk, h * hd, len, hd);
      const auto vh = V.block(g * tk, h * hd, len, hd);
      Mat s = (qh * kh.transpose()) * scale_f;
      for (Eigen::Index i = 0; i < tq; ++i) {
        auto row = s.row(i).array();
        const float mx = row.maxCoeff();
        row = (row - mx).exp();
        row /= row.sum();
      }
      out.block(g * tq, h * hd, tq, hd).noalias() = s * vh;
      probs[static_cast<size_t>(g * heads + h)] = std::move(s);
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  const bool req = any_grad(q) || any_grad(k) || any_grad(v);
  return q.tape()->record(
      std::move(out), req,
      [iq, ik, iv, heads, tq, tk, hd, scale_f, groups, lens = std::move(lens),
       probs = std::move(probs)](Tape& t, int self) {
        const Mat& G = t.grad(self);
        const Mat& Q = t.value(iq);
        const Mat& K = t.value(ik);
        const Mat& V = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        Mat* dQ = gq ? &t.grad(iq) : nullptr;
        Mat* dK = gk ? &t.grad(ik) : nullptr;
        Mat* dV = gv ? &t.grad(iv) : nullptr;
        for (Eigen::Index g = 0; g < groups; ++g) {
          const int len = lens[static_cast<size_t>(g)];
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Mat& P = probs[static_cast<size_t>(g * heads + h)];
            const auto go = G.block(g * tq, h * hd, tq, hd);
            const auto vh = V.block(g * tk, h * hd, len, hd);
            if (dV) dV->block(g * tk, h * hd, len, hd).noalias() += P.transpose() * go;
            if (!dQ && !dK) continue;
            Mat dP = go * vh.transpose();
            Mat dS = P.cwiseProduct(dP);
            const Eigen::VectorXf rs = dS.rowwise().sum();
            dS -= P.cwiseProduct(rs.replicate(1, P.cols()));
            dS *= scale_f;
            if (dQ) {
              dQ->block(g * tq, h * hd, tq, hd).noalias() += dS * K.block(g * tk, h * hd, len, hd);
            }
            if (dK) {
              dK->block(g * tk, h * hd, len, hd).noalias() +=
                  dS.transpose() * Q.block(g * tq, h * hd, tq, hd);
            }
          }
        }
      });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a), [ia](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  const float n = static_cast<float>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().sum() / n;
  const int ia = a.id();
  return a.tape()->record(std::move(out), any_grad(a), [ia, n](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0) / n;
  });
}

Var mse(Var pred, Var target) {
  check_same_tape(pred, target);
  check_same_shape(pred, target, "mse");
  Mat diff = pred.value() - target.value();
  const float n = static_cast<float>(diff.size());
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  const int ip = pred.id(), it = target.id();
  return pred.tape()->record(std::move(out), any_grad(pred, target),
                             [ip, it, n, diff = std::move(diff)](Tape& t, int self) {
                               const float g = t.grad(self)(0, 0) * 2.0f / n;
                               if (t.requires_grad(ip)) t.grad(ip) += diff * g;
                               if (t.requires_grad(it)) t.grad(it) -= diff * g;
                             });
}

Var l1(Var pred, Var target) {
  check_same_tape(pred, target);
  check_same_shape(pred, target, "l1");
  Mat diff = pred.value() - target.value();
  const float n = static_cast<float>(diff.size());
  Mat out(1, 1);
  out(0, 0) = diff.cwiseAbs().sum() / n;
  Mat sgn = diff.unaryExpr([](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
  const int ip = pred.id(), it = target.id();
  return pred.tape()->record(std::move(out), any_grad(pred, target),
                             [ip, it, n, sgn = std::move(sgn)](Tape& t, int self) {
                               const float g = t.grad(self)(0, 0) / n;
                               if (t.requires_grad(ip)) t.grad(ip) += sgn * g;
                               if (t.requires_grad(it)) t.grad(it) -= sgn * g;
                             });
}

Var bce(Var p, const Mat& target, float clamp, bool one_sided) {
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw ShapeError("bce: shape mismatch");
  const float n = static_cast<float>(target.size());
  const float lo = clamp, hi = 1.0f - clamp;
  const Mat pc = p.value().cwiseMax(lo).cwiseMin(hi);
  float total = 0.0f;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const float r = target.data()[i];
    const float q = pc.data()[i];
    total -= r * std::log(q);
    if (!one_sided) total -= (1.0f - r) * std::log(1.0f - q);
  }
  Mat out(1, 1);
  out(0, 0) = total / n;
  const int ip = p.id();
  return p.tape()->record(std::move(out), any_grad(p),
                          [ip, n, lo, hi, one_sided, target](Tape& t, int self) {
                            const float g = t.grad(self)(0, 0) / n;
                            const Mat& pv = t.value(ip);
                            Mat& gp = t.grad(ip);
                            for (Eigen::Index i = 0; i < pv.size(); ++i) {
                              const float q = pv.data()[i];
                              if (q < lo || q > hi) continue;  // clamped: zero gradient
                              const float r = target.data()[i];
                              float d = -r / q;
                              if (!one_sided) d += (1.0f - r) / (1.0f - q);
                              gp.data()[i] += g * d;
                            }
                          });
}

}  // namespace lofa::ad
