#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "gemq/tensor.hpp"

namespace gemq {

using NodeId = int;

// Reverse-mode tape over Tensor-valued primitives. Nodes are recorded in
// topological order by construction; backward walks them once in reverse.
// Discrete routing decisions are never on the tape: callers select indices
// from node *values* and pass them into ops as constants, which gives the
// straight-through gradient through the continuous parts.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool tracked = false;
        std::function<void(Tape&)> back; // empty for leaves
    };

    NodeId input(Tensor v, bool tracked = true) {
        return push(std::move(v), tracked, {});
    }

    const Tensor& value(NodeId id) const { return nodes_[std::size_t(id)].value; }
    const Tensor& grad(NodeId id) const { return nodes_[std::size_t(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    NodeId matmul(NodeId a, NodeId b) {
        Tensor v = gemq::matmul(value(a), value(b));
        return push(std::move(v), tracked(a) || tracked(b), [a, b](Tape& t) {
            NodeId self = t.current_;
            const Tensor& g = t.nodes_[std::size_t(self)].grad;
            t.accumulate(a, gemq::matmul_nt(g, t.value(b)));    // dA = G * B^T
            t.accumulate(b, gemq::matmul_tn(t.value(a), g));    // dB = A^T * G
        });
    }

    // a * b^T
    NodeId matmul_nt(NodeId a, NodeId b) {
        Tensor v = gemq::matmul_nt(value(a), value(b));
        return push(std::move(v), tracked(a) || tracked(b), [a, b](Tape& t) {
            NodeId self = t.current_;
            const Tensor& g = t.nodes_[std::size_t(self)].grad;
            t.accumulate(a, gemq::matmul(g, t.value(b)));       // dA = G * B
            t.accumulate(b, gemq::matmul_tn(g, t.value(a)));    // dB = G^T * A
        });
    }

    NodeId add(NodeId a, NodeId b) {
        Tensor v = gemq::add(value(a), value(b));
        return push(std::move(v), tracked(a) || tracked(b), [a, b](Tape& t) {
            const Tensor& g = t.nodes_[std::size_t(t.current_)].grad;
            t.accumulate(a, g);
            t.accumulate(b, g);
        });
    }

    NodeId silu(NodeId a) {
        Tensor v = gemq::silu(value(a));
        return push(std::move(v), tracked(a), [a](Tape& t) {
            const Tensor& g = t.nodes_[std::size_t(t.current_)].grad;
            const Tensor& x = t.value(a);
            Tensor da(x.rows, x.cols);
            for (std::size_t i = 0; i < x.size(); ++i)
                da.data[i] = g.data[i] * silu_grad(x.data[i]);
            t.accumulate(a, da);
        });
    }

    NodeId softmax_rows(NodeId a) {
        Tensor v = gemq::softmax_rows(value(a));
        return push(std::move(v), tracked(a), [a](Tape& t) {
            NodeId self = t.current_;
            const Tensor& g = t.nodes_[std::size_t(self)].grad;
            const Tensor& s = t.value(self);
            Tensor da(s.rows, s.cols);
            for (std::size_t i = 0; i < s.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < s.cols; ++j) dot += g(i, j) * s(i, j);
                for (std::size_t j = 0; j < s.cols; ++j)
                    da(i, j) = s(i, j) * (g(i, j) - dot);
            }
            t.accumulate(a, da);
        });
    }

    NodeId causal_mean(NodeId a) {
        Tensor v = gemq::causal_mean(value(a));
        return push(std::move(v), tracked(a), [a](Tape& t) {
            const Tensor& g = t.nodes_[std::size_t(t.current_)].grad;
            Tensor da(g.rows, g.cols);
            // suffix pass: dX[s] = sum_{t>=s} G[t]/(t+1)
            std::vector<double> acc(g.cols, 0.0);
            for (std::size_t t2 = g.rows; t2-- > 0;) {
                for (std::size_t j = 0; j < g.cols; ++j) {
                    acc[j] += g(t2, j) / double(t2 + 1);
                    da(t2, j) = acc[j];
                }
            }
            t.accumulate(a, da);
        });
    }

    // Row gather: out[i] = a[indices[i]].
    NodeId gather_rows(NodeId a, std::vector<std::size_t> indices) {
        const Tensor& src = value(a);
        Tensor v(indices.size(), src.cols);
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < src.cols; ++j) v(i, j) = src(indices[i], j);
        return push(std::move(v), tracked(a), [a, idx = std::move(indices)](Tape& t) {
            const Tensor& g = t.nodes_[std::size_t(t.current_)].grad;
            const Tensor& src = t.value(a);
            Tensor da(src.rows, src.cols);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < g.cols; ++j) da(idx[i], j) += g(i, j);
            t.accumulate(a, da);
        });
    }

    // Per-row column select: out[i][k] = a[i][cols[i][k]]. Rows of `cols`
    // must have uniform width.
    NodeId select_cols(NodeId a, std::vector<std::vector<std::size_t>> cols) {
        const Tensor& src = value(a);
        if (cols.size() != src.rows) fail("shape", "select_cols needs one index row per input row");
        std::size_t k = cols.empty() ? 0 : cols[0].size();
        Tensor v(src.rows, k);
        for (std::size_t i = 0; i < src.rows; ++i)
            for (std::size_t j = 0; j < k; ++j) v(i, j) = src(i, cols[i][j]);
        return push(std::move(v), tracked(a), [a, c = std::move(cols)](Tape& t) {
            const Tensor& g = t.nodes_[std::size_t(t.current_)].grad;
            const Tensor& src = t.value(a);
            Tensor da(src.rows, src.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) da(i, c[i][j]) += g(i, j);
            t.accumulate(a, da);
        });
    }

    // Scatter gated expert rows into a T x d output:
    //   out[t] += gates(t, slot) * src[r]   for each placement (r, t, slot).
    // Gradient flows to both the expert rows and the gate entries.
    struct Placement {
        std::size_t src_row;
        std::size_t token;
        std::size_t slot;
    };
    NodeId scatter_rows_gated(NodeId src, NodeId gates,
                              std::vector<Placement> placements, std::size_t out_rows) {
        const Tensor& s = value(src);
        const Tensor& g = value(gates);
        Tensor v(out_rows, s.cols);
        for (const Placement& p : placements)
            for (std::size_t j = 0; j < s.cols; ++j)
                v(p.token, j) += g(p.token, p.slot) * s(p.src_row, j);
        return push(std::move(v), tracked(src) || tracked(gates),
                    [src, gates, pl = std::move(placements)](Tape& t) {
            const Tensor& go = t.nodes_[std::size_t(t.current_)].grad;
            const Tensor& s = t.value(src);
            const Tensor& g = t.value(gates);
            Tensor ds(s.rows, s.cols);
            Tensor dg(g.rows, g.cols);
            for (const Placement& p : pl) {
                double dot = 0.0;
                for (std::size_t j = 0; j < s.cols; ++j) {
                    ds(p.src_row, j) += g(p.token, p.slot) * go(p.token, j);
                    dot += s(p.src_row, j) * go(p.token, j);
                }
                dg(p.token, p.slot) += dot;
            }
            t.accumulate(src, ds);
            t.accumulate(gates, dg);
        });
    }

    NodeId sum_all(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        Tensor out(1, 1);
        out(0, 0) = s;
        return push(std::move(out), tracked(a), [a](Tape& t) {
            double g = t.nodes_[std::size_t(t.current_)].grad(0, 0);
            const Tensor& src = t.value(a);
            Tensor da(src.rows, src.cols);
            for (double& v : da.data) v = g;
            t.accumulate(a, da);
        });
    }

    // Mean cross-entropy over rows; targets are constants.
    NodeId cross_entropy(NodeId logits, std::vector<int> targets) {
        double loss = gemq::cross_entropy(value(logits), targets);
        Tensor out(1, 1);
        out(0, 0) = loss;
        return push(std::move(out), tracked(logits),
                    [logits, tg = std::move(targets)](Tape& t) {
            double g = t.nodes_[std::size_t(t.current_)].grad(0, 0);
            const Tensor& lg = t.value(logits);
            Tensor sm = gemq::softmax_rows(lg);
            double inv = g / double(lg.rows);
            for (std::size_t i = 0; i < lg.rows; ++i) sm(i, std::size_t(tg[i])) -= 1.0;
            for (double& v : sm.data) v *= inv;
            t.accumulate(logits, sm);
        });
    }

    // Runs one reverse pass from a scalar node; fills grads of all nodes
    // that (transitively) feed it. Grads of earlier backward calls are reset.
    void backward(NodeId loss) {
        const Tensor& lv = value(loss);
        if (lv.rows != 1 || lv.cols != 1)
            fail("shape", "backward requires a scalar (1x1) loss node");
        for (Node& n : nodes_) n.grad = Tensor(n.value.rows, n.value.cols);
        nodes_[std::size_t(loss)].grad(0, 0) = 1.0;
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[std::size_t(id)];
            if (!n.back) continue;
            bool any = false;
            for (double v : n.grad.data)
                if (v != 0.0) { any = true; break; }
            if (!any) continue;
            current_ = id;
            n.back(*this);
        }
    }

private:
    bool tracked(NodeId id) const { return nodes_[std::size_t(id)].tracked; }

    NodeId push(Tensor v, bool tracked, std::function<void(Tape&)> back) {
        Node n;
        n.value = std::move(v);
        n.tracked = tracked;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return NodeId(nodes_.size() - 1);
    }

    void accumulate(NodeId id, const Tensor& g) {
        Tensor& dst = nodes_[std::size_t(id)].grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
    }

    std::vector<Node> nodes_;
    NodeId current_ = -1;
};

} // namespace gemq
