#include "marval/autodiff.hpp"

#include <cmath>
#include <unordered_set>

#include "marval/errors.hpp"

namespace marval::ad {

namespace {

thread_local bool t_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make(Mat value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) any = any || in->requires_grad;
    }
    if (any) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
    }
}

inline Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

}  // namespace

Real Var::item() const {
    if (rows() != 1 || cols() != 1) throw ContractError("item() on non-scalar Var");
    return node_->value(0, 0);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var constant(Mat value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var constant_like(Real fill, Index rows, Index cols) { return constant(Mat::Constant(rows, cols, fill)); }

Var parameter(Param& p, bool track) {
    auto node = std::make_shared<Node>();
    node->value = p.value;
    if (track && t_grad_enabled) {
        node->requires_grad = true;
        node->param = &p;
    }
    return Var(std::move(node));
}

Var variable(Mat value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = t_grad_enabled;
    return Var(std::move(node));
}

Var detach(const Var& a) { return constant(a.value()); }

void backward(const Var& out) {
    if (out.rows() != 1 || out.cols() != 1) throw ContractError("backward() needs a scalar output");
    backward(out, Mat::Ones(1, 1));
}

void backward(const Var& out, const Mat& seed) {
    if (!out.requires_grad()) return;
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(&out.node(), 0);
    seen.insert(&out.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    out.node().accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->grad.size() == 0) continue;
        if (node->backward) node->backward(*node);
        if (node->param != nullptr) {
            Param& p = *node->param;
            if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
            p.grad += node->grad;
        }
    }
    // Interior gradients are not needed after the sweep; leaves keep theirs.
    for (Node* node : order) {
        if (node != &out.node() && !node->inputs.empty()) node->grad.resize(0, 0);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make(a.value() + b.value(), {a.ptr(), b.ptr()}, [](Node& n) {
        if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
        if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make(a.value() - b.value(), {a.ptr(), b.ptr()}, [](Node& n) {
        if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
        if (in(n, 1).requires_grad) in(n, 1).accumulate(-n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make(a.value().cwiseProduct(b.value()), {a.ptr(), b.ptr()}, [](Node& n) {
        Node& x = in(n, 0);
        Node& y = in(n, 1);
        if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
        if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, Real c) {
    return make(a.value() * c, {a.ptr()}, [c](Node& n) { in(n, 0).accumulate(n.grad * c); });
}

Var add_scalar(const Var& a, Real c) {
    return make(a.value().array() + c, {a.ptr()}, [](Node& n) { in(n, 0).accumulate(n.grad); });
}

Var silu(const Var& a) {
    Mat sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    Mat out = a.value().cwiseProduct(sig);
    return make(std::move(out), {a.ptr()}, [sig = std::move(sig)](Node& n) {
        const auto& x = in(n, 0).value.array();
        const auto s = sig.array();
        in(n, 0).accumulate((n.grad.array() * (s + x * s * (1.0 - s))).matrix());
    });
}

Var tanh(const Var& a) {
    Mat out = a.value().array().tanh().matrix();
    return make(out, {a.ptr()}, [out](Node& n) {
        in(n, 0).accumulate((n.grad.array() * (1.0 - out.array().square())).matrix());
    });
}

Var clamp(const Var& a, Real lo, Real hi) {
    if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
    const Mat& x = a.value();
    Mat inside = ((x.array() >= lo) && (x.array() <= hi)).cast<Real>().matrix();
    return make(x.cwiseMax(lo).cwiseMin(hi), {a.ptr()}, [inside](Node& n) {
        in(n, 0).accumulate(n.grad.cwiseProduct(inside));
    });
}

Var sqrt(const Var& a) {
    Mat out = a.value().array().sqrt().matrix();
    return make(out, {a.ptr()}, [out](Node& n) {
        in(n, 0).accumulate((n.grad.array() * 0.5 / out.array()).matrix());
    });
}

Var square(const Var& a) {
    return make(a.value().array().square().matrix(), {a.ptr()}, [](Node& n) {
        in(n, 0).accumulate((2.0 * n.grad.array() * in(n, 0).value.array()).matrix());
    });
}

Var reciprocal(const Var& a) {
    Mat out = a.value().array().inverse().matrix();
    return make(out, {a.ptr()}, [out](Node& n) {
        in(n, 0).accumulate((-n.grad.array() * out.array().square()).matrix());
    });
}

// ---------------------------------------------------------------------------
// Broadcasting

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ContractError("add_row: row shape mismatch");
    Mat out = a.value().rowwise() + row.value().row(0);
    return make(std::move(out), {a.ptr(), row.ptr()}, [](Node& n) {
        if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
        if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.colwise().sum());
    });
}

Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ContractError("mul_row: row shape mismatch");
    Mat out = a.value().array().rowwise() * row.value().row(0).array();
    return make(std::move(out), {a.ptr(), row.ptr()}, [](Node& n) {
        Node& x = in(n, 0);
        Node& r = in(n, 1);
        if (x.requires_grad) x.accumulate((n.grad.array().rowwise() * r.value.row(0).array()).matrix());
        if (r.requires_grad) r.accumulate(n.grad.cwiseProduct(x.value).colwise().sum());
    });
}

Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) throw ContractError("mul_col: column shape mismatch");
    Mat out = a.value().array().colwise() * col.value().col(0).array();
    return make(std::move(out), {a.ptr(), col.ptr()}, [](Node& n) {
        Node& x = in(n, 0);
        Node& c = in(n, 1);
        if (x.requires_grad) x.accumulate((n.grad.array().colwise() * c.value.col(0).array()).matrix());
        if (c.requires_grad) c.accumulate(n.grad.cwiseProduct(x.value).rowwise().sum());
    });
}

Var scale_rows(const Var& a, const Vec& s) {
    if (s.size() != a.rows()) throw ContractError("scale_rows: factor count mismatch");
    Mat out = a.value().array().colwise() * s.array();
    return make(std::move(out), {a.ptr()}, [s](Node& n) {
        in(n, 0).accumulate((n.grad.array().colwise() * s.array()).matrix());
    });
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ContractError("matmul: inner dimension mismatch");
    Mat out;
    out.noalias() = a.value() * b.value();
    return make(std::move(out), {a.ptr(), b.ptr()}, [](Node& n) {
        Node& x = in(n, 0);
        Node& w = in(n, 1);
        if (x.requires_grad) {
            Mat g;
            g.noalias() = n.grad * w.value.transpose();
            x.accumulate(g);
        }
        if (w.requires_grad) {
            Mat g;
            g.noalias() = x.value.transpose() * n.grad;
            w.accumulate(g);
        }
    });
}

Var sum(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a.value().sum();
    return make(std::move(out), {a.ptr()}, [](Node& n) {
        const Node& x = in(n, 0);
        in(n, 0).accumulate(Mat::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const auto count = static_cast<Real>(a.value().size());
    return scale(sum(a), 1.0 / count);
}

Var row_sum(const Var& a) {
    return make(a.value().rowwise().sum(), {a.ptr()}, [](Node& n) {
        const Index c = in(n, 0).value.cols();
        in(n, 0).accumulate(n.grad.col(0).replicate(1, c));
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw ContractError("slice_cols: out of range");
    return make(a.value().middleCols(start, count), {a.ptr()}, [start, count](Node& n) {
        Node& x = in(n, 0);
        if (x.grad.size() == 0) x.grad.setZero(x.value.rows(), x.value.cols());
        x.grad.middleCols(start, count) += n.grad;
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const Index rows = parts.front().rows();
    Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ContractError("concat_cols: row count mismatch");
        total += p.cols();
    }
    Mat out(rows, total);
    std::vector<NodePtr> inputs;
    Index offset = 0;
    for (const auto& p : parts) {
        out.middleCols(offset, p.cols()) = p.value();
        offset += p.cols();
        inputs.push_back(p.ptr());
    }
    return make(std::move(out), std::move(inputs), [](Node& n) {
        Index off = 0;
        for (auto& child : n.inputs) {
            const Index c = child->value.cols();
            if (child->requires_grad) child->accumulate(n.grad.middleCols(off, c));
            off += c;
        }
    });
}

Var reshape(const Var& a, Index rows, Index cols) {
    if (rows * cols != a.value().size()) throw ContractError("reshape: element count mismatch");
    using RowMajor = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMajor src = a.value();
    Mat out = Eigen::Map<RowMajor>(src.data(), rows, cols);
    return make(std::move(out), {a.ptr()}, [](Node& n) {
        Node& x = in(n, 0);
        RowMajor g = n.grad;
        Mat back = Eigen::Map<RowMajor>(g.data(), x.value.rows(), x.value.cols());
        x.accumulate(back);
    });
}

Var gather_rows(const Var& a, std::span<const int> idx) {
    Mat out(static_cast<Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) throw ContractError("gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
    }
    std::vector<int> keep(idx.begin(), idx.end());
    return make(std::move(out), {a.ptr()}, [keep = std::move(keep)](Node& n) {
        Node& x = in(n, 0);
        if (x.grad.size() == 0) x.grad.setZero(x.value.rows(), x.value.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) x.grad.row(keep[i]) += n.grad.row(static_cast<Index>(i));
    });
}

Var put_rows(const Var& base, std::span<const int> idx, const Var& values) {
    if (values.rows() != static_cast<Index>(idx.size()) || values.cols() != base.cols()) {
        throw ContractError("put_rows: values shape mismatch");
    }
    Mat out = base.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= base.rows()) throw ContractError("put_rows: index out of range");
        out.row(idx[i]) = values.value().row(static_cast<Index>(i));
    }
    std::vector<int> keep(idx.begin(), idx.end());
    return make(std::move(out), {base.ptr(), values.ptr()}, [keep = std::move(keep)](Node& n) {
        Node& b = in(n, 0);
        Node& v = in(n, 1);
        if (b.requires_grad) {
            Mat g = n.grad;
            for (int r : keep) g.row(r).setZero();
            b.accumulate(g);
        }
        if (v.requires_grad) {
            Mat g(static_cast<Index>(keep.size()), n.grad.cols());
            for (std::size_t i = 0; i < keep.size(); ++i) g.row(static_cast<Index>(i)) = n.grad.row(keep[i]);
            v.accumulate(g);
        }
    });
}

Var select_rows(const Var& a, const Var& row, std::span<const unsigned char> mask) {
    if (static_cast<Index>(mask.size()) != a.rows() || row.rows() != 1 || row.cols() != a.cols()) {
        throw ContractError("select_rows: shape mismatch");
    }
    Mat out = a.value();
    for (Index i = 0; i < out.rows(); ++i) {
        if (mask[static_cast<std::size_t>(i)]) out.row(i) = row.value().row(0);
    }
    std::vector<unsigned char> keep(mask.begin(), mask.end());
    return make(std::move(out), {a.ptr(), row.ptr()}, [keep = std::move(keep)](Node& n) {
        Node& x = in(n, 0);
        Node& r = in(n, 1);
        if (x.requires_grad) {
            Mat g = n.grad;
            for (Index i = 0; i < g.rows(); ++i) {
                if (keep[static_cast<std::size_t>(i)]) g.row(i).setZero();
            }
            x.accumulate(g);
        }
        if (r.requires_grad) {
            RowVec g = RowVec::Zero(n.grad.cols());
            for (Index i = 0; i < n.grad.rows(); ++i) {
                if (keep[static_cast<std::size_t>(i)]) g += n.grad.row(i);
            }
            r.accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------

Var layer_norm(const Var& x, Real eps) {
    const Index cols = x.cols();
    Vec mu = x.value().rowwise().mean();
    Mat centered = x.value().colwise() - mu;
    Vec inv_std = ((centered.array().square().rowwise().sum() / static_cast<Real>(cols)) + eps).rsqrt().matrix();
    Mat out = centered.array().colwise() * inv_std.array();
    Mat normalized = out;
    return make(std::move(out), {x.ptr()}, [normalized = std::move(normalized), inv_std](Node& n) {
        const Index c = normalized.cols();
        // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
        Vec g_mean = n.grad.rowwise().mean();
        Vec gx_mean = n.grad.cwiseProduct(normalized).rowwise().sum() / static_cast<Real>(c);
        Mat dx = n.grad;
        dx.colwise() -= g_mean;
        dx -= (normalized.array().colwise() * gx_mean.array()).matrix();
        dx = (dx.array().colwise() * inv_std.array()).matrix();
        in(n, 0).accumulate(dx);
    });
}

Var log_softmax_rows(const Var& a) {
    Vec mx = a.value().rowwise().maxCoeff();
    Mat shifted = a.value().colwise() - mx;
    Vec lse = shifted.array().exp().rowwise().sum().log().matrix();
    Mat out = shifted.colwise() - lse;
    Mat probs = out.array().exp().matrix();
    return make(std::move(out), {a.ptr()}, [probs = std::move(probs)](Node& n) {
        Vec gsum = n.grad.rowwise().sum();
        in(n, 0).accumulate(n.grad - (probs.array().colwise() * gsum.array()).matrix());
    });
}

Var block_attention(const Var& q, const Var& k, const Var& v, Index block, Index heads) {
    require_same_shape(q, k, "block_attention");
    require_same_shape(q, v, "block_attention");
    const Index rows = q.rows();
    const Index width = q.cols();
    if (block <= 0 || rows % block != 0) throw ContractError("block_attention: rows not divisible by block");
    if (heads <= 0 || width % heads != 0) throw ContractError("block_attention: width not divisible by heads");
    const Index nb = rows / block;
    const Index dh = width / heads;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));

    Mat out(rows, width);
    const bool keep_probs = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    std::vector<Mat> probs;
    if (keep_probs) probs.reserve(static_cast<std::size_t>(nb * heads));
    Mat scores(block, block);
    for (Index b = 0; b < nb; ++b) {
        for (Index h = 0; h < heads; ++h) {
            auto qb = q.value().block(b * block, h * dh, block, dh);
            auto kb = k.value().block(b * block, h * dh, block, dh);
            auto vb = v.value().block(b * block, h * dh, block, dh);
            scores.noalias() = qb * kb.transpose();
            scores *= inv_sqrt;
            Vec mx = scores.rowwise().maxCoeff();
            scores = (scores.colwise() - mx).array().exp().matrix();
            Vec denom = scores.rowwise().sum();
            scores = (scores.array().colwise() / denom.array()).matrix();
            out.block(b * block, h * dh, block, dh).noalias() = scores * vb;
            if (keep_probs) probs.push_back(scores);
        }
    }
    return make(std::move(out), {q.ptr(), k.ptr(), v.ptr()},
                [probs = std::move(probs), block, heads, dh, inv_sqrt, nb](Node& n) {
                    Node& qn = in(n, 0);
                    Node& kn = in(n, 1);
                    Node& vn = in(n, 2);
                    Mat dq = Mat::Zero(qn.value.rows(), qn.value.cols());
                    Mat dk = Mat::Zero(dq.rows(), dq.cols());
                    Mat dv = Mat::Zero(dq.rows(), dq.cols());
                    Mat dp(block, block);
                    for (Index b = 0; b < nb; ++b) {
                        for (Index h = 0; h < heads; ++h) {
                            const Mat& p = probs[static_cast<std::size_t>(b * heads + h)];
                            auto go = n.grad.block(b * block, h * dh, block, dh);
                            auto qb = qn.value.block(b * block, h * dh, block, dh);
                            auto kb = kn.value.block(b * block, h * dh, block, dh);
                            auto vb = vn.value.block(b * block, h * dh, block, dh);
                            dv.block(b * block, h * dh, block, dh).noalias() = p.transpose() * go;
                            dp.noalias() = go * vb.transpose();
                            Vec rs = dp.cwiseProduct(p).rowwise().sum();
                            Mat ds = p.cwiseProduct(dp.colwise() - rs) * inv_sqrt;
                            dq.block(b * block, h * dh, block, dh).noalias() = ds * kb;
                            dk.block(b * block, h * dh, block, dh).noalias() = ds.transpose() * qb;
                        }
                    }
                    if (qn.requires_grad) qn.accumulate(dq);
                    if (kn.requires_grad) kn.accumulate(dk);
                    if (vn.requires_grad) vn.accumulate(dv);
                });
}

}  // namespace marval::ad
