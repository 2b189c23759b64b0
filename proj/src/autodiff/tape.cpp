#include "rfvla/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rfvla/errors.hpp"
#include "rfvla/kernels.hpp"

namespace rfvla {
namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

// dst[c x r] = src[r x c]^T
void transpose_into(const double* src, std::size_t r, std::size_t c, double* dst) {
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
}

enum class Broadcast { none, rows };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.size() == a.cols() && b.cols() == a.cols()) return Broadcast::rows;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                       " and " + shape_string(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// bookkeeping

Tape::Node& Tape::node(Var v) {
  check_owner(v);
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  check_owner(v);
  return nodes_[v.id_];
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size())
    throw ContractError("variable does not belong to this tape");
}

std::vector<double>& Tape::grad_ref(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Tape::push(Tensor value, bool needs_grad, Tensor* bound) {
  nodes_.push_back(Node{std::move(value), {}, needs_grad, bound});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

bool Tape::any_needs_grad(std::initializer_list<Var> vs) const {
  if (mode_ == GradMode::disabled) return false;
  for (Var v : vs)
    if (node(v).needs_grad) return true;
  return false;
}

Var Tape::record(std::vector<std::uint32_t> inputs, Tensor out, bool needs_grad,
                 std::function<void(Tape&, std::uint32_t)> backward) {
  Var v = push(std::move(out), needs_grad);
  if (needs_grad) ops_.push_back(Op{std::move(inputs), v.id_, std::move(backward)});
  return v;
}

Var Tape::constant(Tensor value) {
  value.clear_grad();
  return push(std::move(value), false);
}

Var Tape::variable(Tensor value) {
  value.clear_grad();
  return push(std::move(value), mode_ == GradMode::enabled);
}

Var Tape::leaf(Tensor& param) {
  const bool track = mode_ == GradMode::enabled && param.requires_grad();
  Tensor copy(param.shape(), param.storage());
  return push(std::move(copy), track, track ? &param : nullptr);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

std::span<const double> Tape::grad(Var v) const { return node(v).grad; }

bool Tape::needs_grad(Var v) const { return node(v).needs_grad; }

// ---------------------------------------------------------------------------
// primitives

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k)
    throw DimensionError("matmul: inner extents differ " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  Tensor out({m, n});
  kernels::active().gemm(m, n, k, A.data().data(), k, B.data().data(), n, out.data().data(), n);
  const bool ng = any_needs_grad({a, b});
  return record({a.id_, b.id_}, std::move(out), ng, [a, b, m, n, k](Tape& t, std::uint32_t o) {
    const auto& gc = t.nodes_[o].grad;
    const auto& kt = kernels::active();
    if (t.nodes_[a.id_].needs_grad) {
      std::vector<double> bt(n * k);
      transpose_into(t.nodes_[b.id_].value.data().data(), k, n, bt.data());
      kt.gemm(m, k, n, gc.data(), n, bt.data(), k, t.grad_ref(a.id_).data(), k);
    }
    if (t.nodes_[b.id_].needs_grad) {
      std::vector<double> at(k * m);
      transpose_into(t.nodes_[a.id_].value.data().data(), m, k, at.data());
      kt.gemm(k, n, m, at.data(), m, gc.data(), n, t.grad_ref(b.id_).data(), n);
    }
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Broadcast bc = broadcast_kind(A, B, "add");
  Tensor out = A;
  const std::size_t cols = A.cols(), rows = A.rows();
  if (bc == Broadcast::none) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  }
  out.set_requires_grad(false);
  const bool ng = any_needs_grad({a, b});
  return record({a.id_, b.id_}, std::move(out), ng, [a, b, bc, rows, cols](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    if (t.nodes_[a.id_].needs_grad) kernels::active().axpy(g.size(), 1.0, g.data(), t.grad_ref(a.id_).data());
    if (t.nodes_[b.id_].needs_grad) {
      auto& gb = t.grad_ref(b.id_);
      if (bc == Broadcast::none) {
        kernels::active().axpy(g.size(), 1.0, g.data(), gb.data());
      } else {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Broadcast bc = broadcast_kind(A, B, "mul");
  Tensor out(A.shape());
  const std::size_t cols = A.cols(), rows = A.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      out[i] = A[i] * (bc == Broadcast::none ? B[i] : B[c]);
    }
  const bool ng = any_needs_grad({a, b});
  return record({a.id_, b.id_}, std::move(out), ng, [a, b, bc, rows, cols](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    const Tensor& A = t.nodes_[a.id_].value;
    const Tensor& B = t.nodes_[b.id_].value;
    if (t.nodes_[a.id_].needs_grad) {
      auto& ga = t.grad_ref(a.id_);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          ga[i] += g[i] * (bc == Broadcast::none ? B[i] : B[c]);
        }
    }
    if (t.nodes_[b.id_].needs_grad) {
      auto& gb = t.grad_ref(b.id_);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          gb[bc == Broadcast::none ? i : c] += g[i] * A[i];
        }
    }
  });
}

Var Tape::scale(Var a, double s) {
  Tensor out(value(a).shape());
  const Tensor& A = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * s;
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a, s](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    kernels::active().axpy(g.size(), s, g.data(), t.grad_ref(a.id_).data());
  });
}

Var Tape::transpose(Var a) {
  const Tensor& A = value(a);
  require_matrix(A, "transpose");
  const std::size_t r = A.shape()[0], c = A.shape()[1];
  Tensor out({c, r});
  transpose_into(A.data().data(), r, c, out.data().data());
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a, r, c](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    auto& ga = t.grad_ref(a.id_);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = value(a);
  out.set_requires_grad(false);
  out.clear_grad();
  out.reshape(std::move(shape));
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    kernels::active().axpy(g.size(), 1.0, g.data(), t.grad_ref(a.id_).data());
  });
}

Var Tape::softmax_rows(Var a) {
  const Tensor& A = value(a);
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = A.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += (y[c] = std::exp(x[c] - mx));
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a, rows, cols](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    const Tensor& Y = t.nodes_[o].value;
    auto& ga = t.grad_ref(a.id_);
    const auto& kt = kernels::active();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = Y.data().data() + r * cols;
      const double* gy = g.data() + r * cols;
      const double s = kt.dot(cols, gy, y);
      double* gx = ga.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - s);
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  const std::size_t rows = X.rows(), cols = X.cols();
  if (G.size() != cols || B.size() != cols)
    throw DimensionError("layer_norm: gain/bias must match trailing extent " + std::to_string(cols));
  Tensor out(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * inv[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * G[c] + B[c];
    }
  }
  const bool ng = any_needs_grad({x, gain, bias});
  if (!ng) return record({}, std::move(out), false, {});
  return record({x.id_, gain.id_, bias.id_}, std::move(out), ng,
                [x, gain, bias, rows, cols, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, std::uint32_t o) {
                  const auto& g = t.nodes_[o].grad;
                  const Tensor& G = t.nodes_[gain.id_].value;
                  if (t.nodes_[gain.id_].needs_grad) {
                    auto& gg = t.grad_ref(gain.id_);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xhat[r * cols + c];
                  }
                  if (t.nodes_[bias.id_].needs_grad) {
                    auto& gb = t.grad_ref(bias.id_);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                  }
                  if (t.nodes_[x.id_].needs_grad) {
                    auto& gx = t.grad_ref(x.id_);
                    const double n = static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_gh = 0.0, mean_ghx = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double gh = g[r * cols + c] * G[c];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[r * cols + c];
                      }
                      mean_gh /= n;
                      mean_ghx /= n;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double gh = g[r * cols + c] * G[c];
                        gx[r * cols + c] += inv[r] * (gh - mean_gh - xhat[r * cols + c] * mean_ghx);
                      }
                    }
                  }
                });
}

Var Tape::gelu(Var a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < A.size(); ++i)
    out[i] = 0.5 * A[i] * (1.0 + std::erf(A[i] * kInvSqrt2));
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a](Tape& t, std::uint32_t o) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const auto& g = t.nodes_[o].grad;
    const Tensor& A = t.nodes_[a.id_].value;
    auto& ga = t.grad_ref(a.id_);
    for (std::size_t i = 0; i < A.size(); ++i) {
      const double x = A[i];
      const double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * d;
    }
  });
}

Var Tape::gather_rows(Var table, std::span<const std::uint32_t> ids) {
  const Tensor& T = value(table);
  require_matrix(T, "gather_rows");
  const std::size_t n = T.shape()[0], d = T.shape()[1];
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n)
      throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " out of range " + std::to_string(n));
    std::copy_n(T.data().data() + ids[i] * d, d, out.data().data() + i * d);
  }
  const bool ng = any_needs_grad({table});
  std::vector<std::uint32_t> idx;
  if (ng) idx.assign(ids.begin(), ids.end());
  return record({table.id_}, std::move(out), ng, [table, d, idx = std::move(idx)](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    auto& gt = t.grad_ref(table.id_);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += g[i * d + c];
  });
}

Var Tape::slice(Var a, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  const Tensor& A = value(a);
  const std::size_t rows = A.rows(), cols = A.cols();
  if (nrows == 0 || ncols == 0 || row0 + nrows > rows || col0 + ncols > cols)
    throw DimensionError("slice out of range on " + shape_string(A.shape()));
  Tensor out({nrows, ncols});
  for (std::size_t r = 0; r < nrows; ++r)
    std::copy_n(A.data().data() + (row0 + r) * cols + col0, ncols, out.data().data() + r * ncols);
  const bool ng = any_needs_grad({a});
  return record({a.id_}, std::move(out), ng, [a, row0, nrows, col0, ncols, cols](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    auto& ga = t.grad_ref(a.id_);
    for (std::size_t r = 0; r < nrows; ++r)
      for (std::size_t c = 0; c < ncols; ++c) ga[(row0 + r) * cols + col0 + c] += g[r * ncols + c];
  });
}

Var Tape::slice_rows(Var a, std::size_t row0, std::size_t nrows) {
  return slice(a, row0, nrows, 0, value(a).cols());
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  bool ng = false;
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    if (value(p).cols() != cols) throw DimensionError("concat_rows: trailing extents differ");
    rows += value(p).rows();
    ng = ng || any_needs_grad({p});
    ids.push_back(p.id_);
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return record(ids, std::move(out), ng, [ids](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    std::size_t off = 0;
    for (std::uint32_t id : ids) {
      const std::size_t n = t.nodes_[id].value.size();
      if (t.nodes_[id].needs_grad) kernels::active().axpy(n, 1.0, g.data() + off, t.grad_ref(id).data());
      off += n;
    }
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool ng = false;
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw DimensionError("concat_cols: leading extents differ");
    cols += value(p).cols();
    ng = ng || any_needs_grad({p});
    ids.push_back(p.id_);
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    const std::size_t pc = v.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * pc, pc, out.data().data() + r * cols + c0);
    c0 += pc;
  }
  return record(ids, std::move(out), ng, [ids, rows, cols](Tape& t, std::uint32_t o) {
    const auto& g = t.nodes_[o].grad;
    std::size_t c0 = 0;
    for (std::uint32_t id : ids) {
      const std::size_t pc = t.nodes_[id].value.cols();
      if (t.nodes_[id].needs_grad) {
        auto& gp = t.grad_ref(id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + c0 + c];
      }
      c0 += pc;
    }
  });
}

Var Tape::mean(Var a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (double v : A.data()) s += v;
  const double n = static_cast<double>(A.size());
  const bool ng = any_needs_grad({a});
  return record({a.id_}, Tensor::scalar(s / n), ng, [a, n](Tape& t, std::uint32_t o) {
    const double g = t.nodes_[o].grad[0] / n;
    for (double& v : t.grad_ref(a.id_)) v += g;
  });
}

Var Tape::nll_loss(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  const Tensor& L = value(logits);
  const std::size_t rows = L.rows(), vocab = L.cols();
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("nll_loss: " + std::to_string(rows) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw IndexError("nll_loss: target " + std::to_string(targets[r]) + " outside vocabulary of " +
                       std::to_string(vocab));
    ++count;
  }
  if (count == 0) throw DegenerateBatchError("nll_loss: mask selects no positions");
  // Row-wise softmax is kept for backward.
  std::vector<double> probs(L.size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const double* x = L.data().data() + r * vocab;
    const double mx = *std::max_element(x, x + vocab);
    double sum = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) sum += (probs[r * vocab + c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= sum;
    total += (mx + std::log(sum)) - x[targets[r]];
  }
  const double n = static_cast<double>(count);
  const bool ng = any_needs_grad({logits});
  std::vector<int> tg;
  std::vector<std::uint8_t> mk;
  if (ng) {
    tg.assign(targets.begin(), targets.end());
    mk.assign(mask.begin(), mask.end());
  } else {
    probs.clear();
  }
  return record({logits.id_}, Tensor::scalar(total / n), ng,
                [logits, rows, vocab, n, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)](
                    Tape& t, std::uint32_t o) {
                  const double g = t.nodes_[o].grad[0] / n;
                  auto& gl = t.grad_ref(logits.id_);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!mk[r]) continue;
                    for (std::size_t c = 0; c < vocab; ++c) gl[r * vocab + c] += g * probs[r * vocab + c];
                    gl[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
                  }
                });
}

Var Tape::nll_loss(Var logits, std::span<const int> targets) {
  std::vector<std::uint8_t> all(targets.size(), 1);
  return nll_loss(logits, targets, all);
}

// ---------------------------------------------------------------------------

void Tape::backward(Var loss) {
  if (mode_ == GradMode::disabled) throw ContractError("backward on a tape recorded without gradients");
  if (consumed_) throw ContractError("backward already ran on this tape");
  const Node& root = node(loss);
  if (root.value.size() != 1)
    throw ContractError("backward needs a scalar loss, got " + shape_string(root.value.shape()));
  consumed_ = true;
  if (!root.needs_grad) return;
  grad_ref(loss.id_)[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (it->output > loss.id_) continue;
    const Node& out = nodes_[it->output];
    if (out.grad.empty()) continue;
    it->backward(*this, it->output);
  }
  const auto& kt = kernels::active();
  for (Node& n : nodes_) {
    if (n.bound == nullptr) continue;
    auto& dst = n.bound->grad_storage();
    if (!n.grad.empty()) kt.axpy(dst.size(), 1.0, n.grad.data(), dst.data());
  }
}

}  // namespace rfvla
