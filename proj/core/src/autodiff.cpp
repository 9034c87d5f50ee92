// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/autodiff.hpp"

#include <cassert>

#include "dlm/kernels.hpp"

namespace dlm::ad {

Var Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Var Tape::parameter(const Matrix& value, Matrix* sink) {
    Var v = push(value, nullptr);
    nodes_[v.id].sink = sink;
    return v;
}

Var Tape::push(Matrix value, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(backward), nullptr});
    return Var{nodes_.size() - 1};
}

Matrix& Tape::grad_at(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.value.same_shape(n.grad)) n.grad = Matrix(n.value.rows, n.value.cols);
    return n.grad;
}

void Tape::backward(Var out, double seed) {
    grad(out).data.assign(value(out).size(), seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.value.same_shape(n.grad)) continue;  // no gradient reached this node
        if (n.backward) n.backward(*this, i);
        if (n.sink != nullptr) {
            assert(n.sink->same_shape(n.grad));
            for (std::size_t k = 0; k < n.grad.size(); ++k) n.sink->data[k] += n.grad.data[k];
        }
    }
}

Var matmul_nt(Tape& t, Var x, Var w) {
    const Matrix& xv = t.value(x);
    const Matrix& wv = t.value(w);
    if (xv.cols != wv.cols) throw std::logic_error("matmul_nt: inner dimension mismatch");
    Matrix out(xv.rows, wv.rows);
    for (std::size_t r = 0; r < xv.rows; ++r) kernels::matvec_nt(xv.row(r), wv, out.row(r));
    return t.push(std::move(out), [x, w](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        const Matrix& xv = tp.value(x);
        const Matrix& wv = tp.value(w);
        Matrix& gx = tp.grad(x);
        Matrix& gw = tp.grad(w);
        for (std::size_t r = 0; r < g.rows; ++r) {
            for (std::size_t j = 0; j < g.cols; ++j) {
                const double gj = g(r, j);
                if (gj == 0.0) continue;
                for (std::size_t k = 0; k < xv.cols; ++k) {
                    gx(r, k) += gj * wv(j, k);
                    gw(j, k) += gj * xv(r, k);
                }
            }
        }
    });
}

Var add(Tape& t, Var a, Var b) {
    Matrix out = t.value(a);
    const Matrix& bv = t.value(b);
    if (!out.same_shape(bv)) throw std::logic_error("add: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    return t.push(std::move(out), [a, b](Tape& tp, std::size_t self) {
        const Matrix g = tp.grad_at(self);
        Matrix& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Matrix& gb = tp.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
    });
}

Var add_row(Tape& t, Var x, Var bias) {
    Matrix out = t.value(x);
    const Matrix& bv = t.value(bias);
    if (bv.rows != 1 || bv.cols != out.cols) throw std::logic_error("add_row: shape mismatch");
    for (std::size_t r = 0; r < out.rows; ++r) {
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv(0, c);
    }
    return t.push(std::move(out), [x, bias](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        Matrix& gx = tp.grad(x);
        Matrix& gb = tp.grad(bias);
        for (std::size_t r = 0; r < g.rows; ++r) {
            for (std::size_t c = 0; c < g.cols; ++c) {
                gx(r, c) += g(r, c);
                gb(0, c) += g(r, c);
            }
        }
    });
}

Var scale(Tape& t, Var x, double c) {
    Matrix out = t.value(x);
    for (double& v : out.data) v *= c;
    return t.push(std::move(out), [x, c](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        Matrix& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += c * g.data[i];
    });
}

Var mul(Tape& t, Var a, Var b) {
    Matrix out = t.value(a);
    const Matrix& bv = t.value(b);
    if (!out.same_shape(bv)) throw std::logic_error("mul: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    return t.push(std::move(out), [a, b](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        const Matrix& av = tp.value(a);
        const Matrix& bv = tp.value(b);
        Matrix& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
        Matrix& gb = tp.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
    });
}

Var silu(Tape& t, Var x) {
    Matrix out = t.value(x);
    for (double& v : out.data) v = kernels::silu(v);
    return t.push(std::move(out), [x](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        const Matrix& xv = tp.value(x);
        Matrix& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * kernels::silu_grad(xv.data[i]);
    });
}

Var rmsnorm(Tape& t, Var x, Var gain) {
    const Matrix& xv = t.value(x);
    const Matrix& gv = t.value(gain);
    if (gv.rows != 1 || gv.cols != xv.cols) throw std::logic_error("rmsnorm: gain shape mismatch");
    Matrix out(xv.rows, xv.cols);
    std::vector<double> inv(xv.rows);
    for (std::size_t r = 0; r < xv.rows; ++r) inv[r] = kernels::rmsnorm(xv.row(r), gv.row(0), out.row(r));
    return t.push(std::move(out), [x, gain, inv = std::move(inv)](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        const Matrix& xv = tp.value(x);
        const Matrix& gv = tp.value(gain);
        Matrix& gx = tp.grad(x);
        Matrix& gg = tp.grad(gain);
        const double d = static_cast<double>(xv.cols);
        for (std::size_t r = 0; r < xv.rows; ++r) {
            // y_i = x_i * s * g_i with s = (mean(x^2) + eps)^(-1/2)
            double dot = 0.0;
            for (std::size_t i = 0; i < xv.cols; ++i) {
                gg(0, i) += g(r, i) * xv(r, i) * inv[r];
                dot += g(r, i) * gv(0, i) * xv(r, i);
            }
            const double s = inv[r];
            for (std::size_t i = 0; i < xv.cols; ++i) {
                gx(r, i) += s * g(r, i) * gv(0, i) - s * s * s * xv(r, i) * dot / d;
            }
        }
    });
}

Var rope(Tape& t, Var x, const std::vector<std::size_t>& positions, std::size_t n_heads, double base) {
    Matrix out = t.value(x);
    if (positions.size() != out.rows) throw std::logic_error("rope: positions/rows mismatch");
    for (std::size_t r = 0; r < out.rows; ++r) kernels::rope_rotate(out.row(r), n_heads, positions[r], base);
    return t.push(std::move(out), [x, positions, n_heads, base](Tape& tp, std::size_t self) {
        Matrix g = tp.grad_at(self);
        for (std::size_t r = 0; r < g.rows; ++r) kernels::rope_rotate(g.row(r), n_heads, positions[r], base, -1.0);
        Matrix& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
    });
}

Var attention(Tape& t, Var q, Var k, Var v, const std::vector<std::uint8_t>& allow, std::size_t n_heads) {
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const std::size_t n = qv.rows;
    const std::size_t m = kv.rows;
    const std::size_t hd = qv.cols / n_heads;
    if (allow.size() != n * m) throw std::logic_error("attention: mask shape mismatch");

    std::vector<std::vector<std::size_t>> allowed(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (allow[i * m + j]) allowed[i].push_back(j);
        }
    }
    // probs[i][h * |allowed_i| + a]
    std::vector<std::vector<double>> probs(n);
    Matrix out(n, qv.cols);
    for (std::size_t i = 0; i < n; ++i) {
        probs[i].assign(n_heads * allowed[i].size(), 0.0);
        for (std::size_t h = 0; h < n_heads; ++h) {
            kernels::attend_head(qv.data.data() + i * qv.cols, kv, vv, allowed[i], h, hd,
                                 out.data.data() + i * out.cols, probs[i].data() + h * allowed[i].size());
        }
    }
    return t.push(std::move(out), [q, k, v, n_heads, hd, allowed = std::move(allowed),
                                   probs = std::move(probs)](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        const Matrix& qv = tp.value(q);
        const Matrix& kv = tp.value(k);
        const Matrix& vv = tp.value(v);
        Matrix& gq = tp.grad(q);
        Matrix& gk = tp.grad(k);
        Matrix& gv = tp.grad(v);
        const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<double> dp;
        for (std::size_t i = 0; i < allowed.size(); ++i) {
            const auto& al = allowed[i];
            dp.resize(al.size());
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double* p = probs[i].data() + h * al.size();
                const std::size_t off = h * hd;
                double dot = 0.0;
                for (std::size_t a = 0; a < al.size(); ++a) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        acc += g(i, off + c) * vv(al[a], off + c);
                        gv(al[a], off + c) += p[a] * g(i, off + c);
                    }
                    dp[a] = acc;
                    dot += acc * p[a];
                }
                for (std::size_t a = 0; a < al.size(); ++a) {
                    const double ds = p[a] * (dp[a] - dot) * sc;
                    if (ds == 0.0) continue;
                    for (std::size_t c = 0; c < hd; ++c) {
                        gq(i, off + c) += ds * kv(al[a], off + c);
                        gk(al[a], off + c) += ds * qv(i, off + c);
                    }
                }
            }
        }
    });
}

Var embedding(Tape& t, Var table, const std::vector<TokenId>& ids) {
    const Matrix& tv = t.value(table);
    Matrix out(ids.size(), tv.cols);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto id = static_cast<std::size_t>(ids[r]);
        if (id >= tv.rows) throw std::logic_error("embedding: id out of range");
        std::copy_n(tv.data.data() + id * tv.cols, tv.cols, out.data.data() + r * tv.cols);
    }
    return t.push(std::move(out), [table, ids](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        Matrix& gt = tp.grad(table);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const auto id = static_cast<std::size_t>(ids[r]);
            for (std::size_t c = 0; c < g.cols; ++c) gt(id, c) += g(r, c);
        }
    });
}

Var concat_cols(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    if (av.rows != bv.rows) throw std::logic_error("concat_cols: row mismatch");
    Matrix out(av.rows, av.cols + bv.cols);
    for (std::size_t r = 0; r < av.rows; ++r) {
        for (std::size_t c = 0; c < av.cols; ++c) out(r, c) = av(r, c);
        for (std::size_t c = 0; c < bv.cols; ++c) out(r, av.cols + c) = bv(r, c);
    }
    const std::size_t split = av.cols;
    return t.push(std::move(out), [a, b, split](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        Matrix& ga = tp.grad(a);
        Matrix& gb = tp.grad(b);
        for (std::size_t r = 0; r < g.rows; ++r) {
            for (std::size_t c = 0; c < split; ++c) ga(r, c) += g(r, c);
            for (std::size_t c = split; c < g.cols; ++c) gb(r, c - split) += g(r, c);
        }
    });
}

Var weighted_nll(Tape& t, Var logits, const std::vector<TokenId>& targets, const std::vector<double>& weights) {
    const Matrix& lv = t.value(logits);
    if (targets.size() != lv.rows || weights.size() != lv.rows) throw std::logic_error("weighted_nll: size mismatch");
    Matrix out(1, 1);
    for (std::size_t r = 0; r < lv.rows; ++r) {
        if (weights[r] == 0.0) continue;
        out(0, 0) += weights[r] * (log_sum_exp(lv.row(r)) - lv(r, static_cast<std::size_t>(targets[r])));
    }
    return t.push(std::move(out), [logits, targets, weights](Tape& tp, std::size_t self) {
        const double g = tp.grad_at(self)(0, 0);
        const Matrix& lv = tp.value(logits);
        Matrix& gl = tp.grad(logits);
        std::vector<double> p(lv.cols);
        for (std::size_t r = 0; r < lv.rows; ++r) {
            if (weights[r] == 0.0) continue;
            std::copy(lv.row(r).begin(), lv.row(r).end(), p.begin());
            softmax_inplace(p);
            p[static_cast<std::size_t>(targets[r])] -= 1.0;
            for (std::size_t c = 0; c < lv.cols; ++c) gl(r, c) += g * weights[r] * p[c];
        }
    });
}

Var squared_error(Tape& t, Var x, const Matrix& target) {
    const Matrix& xv = t.value(x);
    if (!xv.same_shape(target)) throw std::logic_error("squared_error: shape mismatch");
    Matrix out(1, 1);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double d = xv.data[i] - target.data[i];
        out(0, 0) += d * d;
    }
    return t.push(std::move(out), [x, target](Tape& tp, std::size_t self) {
        const double g = tp.grad_at(self)(0, 0);
        const Matrix& xv = tp.value(x);
        Matrix& gx = tp.grad(x);
        for (std::size_t i = 0; i < xv.size(); ++i) gx.data[i] += 2.0 * g * (xv.data[i] - target.data[i]);
    });
}

Var moe_combine(Tape& t, Var gate, const std::vector<Var>& experts,
                const std::vector<std::vector<std::size_t>>& selection, double gate_scale) {
    const Matrix& gv = t.value(gate);
    const std::size_t n = gv.rows;
    const std::size_t d = t.value(experts.front()).cols;
    Matrix out(n, d);
    std::vector<std::vector<double>> weights(n);
    for (std::size_t r = 0; r < n; ++r) {
        auto& w = weights[r];
        for (std::size_t e : selection[r]) w.push_back(gate_scale * gv(r, e));
        softmax_inplace(w);
        for (std::size_t k = 0; k < w.size(); ++k) {
            const Matrix& ev = t.value(experts[selection[r][k]]);
            for (std::size_t c = 0; c < d; ++c) out(r, c) += w[k] * ev(r, c);
        }
    }
    return t.push(std::move(out), [gate, experts, selection, gate_scale,
                                   weights = std::move(weights)](Tape& tp, std::size_t self) {
        const Matrix g = tp.grad_at(self);
        Matrix& gg = tp.grad(gate);
        std::vector<double> dw;
        for (std::size_t r = 0; r < g.rows; ++r) {
            const auto& w = weights[r];
            const auto& sel = selection[r];
            dw.assign(w.size(), 0.0);
            double dot = 0.0;
            for (std::size_t k = 0; k < w.size(); ++k) {
                const Matrix& ev = tp.value(experts[sel[k]]);
                Matrix& ge = tp.grad(experts[sel[k]]);
                for (std::size_t c = 0; c < g.cols; ++c) {
                    dw[k] += g(r, c) * ev(r, c);
                    ge(r, c) += w[k] * g(r, c);
                }
                dot += w[k] * dw[k];
            }
            for (std::size_t k = 0; k < w.size(); ++k) gg(r, sel[k]) += gate_scale * w[k] * (dw[k] - dot);
        }
    });
}

}  // namespace dlm::ad
