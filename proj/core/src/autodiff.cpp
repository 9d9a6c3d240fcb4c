#include "fgd/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>

namespace fgd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap as_mat(const Tensor& t) {
    return CMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MMap as_mat(Tensor& t) {
    return MMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_fail(std::string_view op, std::initializer_list<Shape> shapes, std::string_view what = {}) {
    std::string msg(op);
    msg += ": incompatible shapes";
    for (const auto& s : shapes) msg += " " + to_string(s);
    if (!what.empty()) {
        msg += " (";
        msg += what;
        msg += ")";
    }
    throw ShapeError(msg);
}

double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var Graph::push(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v, std::string_view op) const {
    if (!v.valid() || v.id >= nodes_.size()) {
        throw AutodiffError(std::string(op) + ": variable does not belong to this graph");
    }
    return nodes_[v.id];
}

Tensor& Graph::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

Var Graph::constant(Tensor value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.op = "parameter";
    n.value = p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const { return node(v, "value").value; }

Tensor Graph::grad(Var v) const {
    const Node& n = node(v, "grad");
    if (n.grad.size() == n.value.size()) return n.grad;
    return Tensor(n.value.shape());
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& A = node(a, "matmul").value;
    const Tensor& B = node(b, "matmul").value;
    if (A.ndim() != 2 || B.ndim() != 2 || A.cols() != B.rows()) shape_fail("matmul", {A.shape(), B.shape()});
    Tensor out({A.rows(), B.cols()});
    as_mat(out).noalias() = as_mat(A) * as_mat(B);
    return push("matmul", std::move(out), {a.id, b.id}, [a, b](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        if (g.needs(a.id)) as_mat(g.grad_slot(a.id)).noalias() += as_mat(G) * as_mat(g.nodes_[b.id].value).transpose();
        if (g.needs(b.id)) as_mat(g.grad_slot(b.id)).noalias() += as_mat(g.nodes_[a.id].value).transpose() * as_mat(G);
    });
}

Var Graph::add(Var a, Var b) {
    const Tensor& A = node(a, "add").value;
    const Tensor& B = node(b, "add").value;
    if (A.shape() != B.shape()) shape_fail("add", {A.shape(), B.shape()});
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push("add", std::move(out), {a.id, b.id}, [a, b](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        for (auto id : {a.id, b.id}) {
            if (!g.needs(id)) continue;
            Tensor& d = g.grad_slot(id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& A = node(a, "sub").value;
    const Tensor& B = node(b, "sub").value;
    if (A.shape() != B.shape()) shape_fail("sub", {A.shape(), B.shape()});
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    return push("sub", std::move(out), {a.id, b.id}, [a, b](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        if (g.needs(a.id)) {
            Tensor& d = g.grad_slot(a.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
        }
        if (g.needs(b.id)) {
            Tensor& d = g.grad_slot(b.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= G[i];
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& A = node(a, "mul").value;
    const Tensor& B = node(b, "mul").value;
    if (A.shape() != B.shape()) shape_fail("mul", {A.shape(), B.shape()});
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return push("mul", std::move(out), {a.id, b.id}, [a, b](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        if (g.needs(a.id)) {
            const Tensor& Bv = g.nodes_[b.id].value;
            Tensor& d = g.grad_slot(a.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] * Bv[i];
        }
        if (g.needs(b.id)) {
            const Tensor& Av = g.nodes_[a.id].value;
            Tensor& d = g.grad_slot(b.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] * Av[i];
        }
    });
}

Var Graph::div(Var a, Var b) {
    const Tensor& A = node(a, "div").value;
    const Tensor& B = node(b, "div").value;
    if (B.size() != 1) shape_fail("div", {A.shape(), B.shape()}, "divisor must be a scalar");
    const double d = B[0];
    Tensor out = A;
    for (auto& v : out.values()) v /= d;
    return push("div", std::move(out), {a.id, b.id}, [a, b](Graph& g, std::size_t self) {
        const Node& me = g.nodes_[self];
        const double den = g.nodes_[b.id].value[0];
        if (g.needs(a.id)) {
            Tensor& da = g.grad_slot(a.id);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += me.grad[i] / den;
        }
        if (g.needs(b.id)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < me.value.size(); ++i) acc += me.grad[i] * me.value[i];
            g.grad_slot(b.id)[0] -= acc / den;
        }
    });
}

Var Graph::scale(Var a, double s) {
    Tensor out = node(a, "scale").value;
    for (auto& v : out.values()) v *= s;
    return push("scale", std::move(out), {a.id}, [a, s](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        Tensor& d = g.grad_slot(a.id);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * G[i];
    });
}

Var Graph::add_row(Var a, Var row) {
    const Tensor& A = node(a, "add_row").value;
    const Tensor& R = node(row, "add_row").value;
    if (A.ndim() != 2 || R.size() != A.cols()) shape_fail("add_row", {A.shape(), R.shape()});
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r) {
        double* o = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) o[j] += R[j];
    }
    return push("add_row", std::move(out), {a.id, row.id}, [a, row](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        if (g.needs(a.id)) {
            Tensor& d = g.grad_slot(a.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
        }
        if (g.needs(row.id)) {
            Tensor& d = g.grad_slot(row.id);
            const std::size_t c = d.size();
            const std::size_t rows = G.size() / c;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = G.data() + r * c;
                for (std::size_t j = 0; j < c; ++j) d[j] += gr[j];
            }
        }
    });
}

Var Graph::mul_col(Var a, Var col) {
    const Tensor& A = node(a, "mul_col").value;
    const Tensor& C = node(col, "mul_col").value;
    if (A.ndim() != 2 || C.size() != A.rows()) shape_fail("mul_col", {A.shape(), C.shape()});
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r) {
        double* o = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) o[j] *= C[r];
    }
    return push("mul_col", std::move(out), {a.id, col.id}, [a, col](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        const Tensor& Av = g.nodes_[a.id].value;
        const Tensor& Cv = g.nodes_[col.id].value;
        const std::size_t c = Av.cols();
        if (g.needs(a.id)) {
            Tensor& d = g.grad_slot(a.id);
            for (std::size_t r = 0; r < Av.rows(); ++r)
                for (std::size_t j = 0; j < c; ++j) d[r * c + j] += G[r * c + j] * Cv[r];
        }
        if (g.needs(col.id)) {
            Tensor& d = g.grad_slot(col.id);
            for (std::size_t r = 0; r < Av.rows(); ++r) {
                double acc = 0.0;
                for (std::size_t j = 0; j < c; ++j) acc += G[r * c + j] * Av[r * c + j];
                d[r] += acc;
            }
        }
    });
}

Var Graph::relu(Var a) {
    Tensor out = node(a, "relu").value;
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    return push("relu", std::move(out), {a.id}, [a](Graph& g, std::size_t self) {
        const Node& me = g.nodes_[self];
        Tensor& d = g.grad_slot(a.id);
        for (std::size_t i = 0; i < d.size(); ++i)
            if (me.value[i] > 0.0) d[i] += me.grad[i];
    });
}

Var Graph::sigmoid(Var a) {
    Tensor out = node(a, "sigmoid").value;
    for (auto& v : out.values()) v = sigmoid_scalar(v);
    return push("sigmoid", std::move(out), {a.id}, [a](Graph& g, std::size_t self) {
        const Node& me = g.nodes_[self];
        Tensor& d = g.grad_slot(a.id);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double s = me.value[i];
            d[i] += me.grad[i] * s * (1.0 - s);
        }
    });
}

Var Graph::softmax_rows(Var a) {
    Tensor out = node(a, "softmax_rows").value;
    const std::size_t c = out.ndim() <= 1 ? out.size() : out.shape().back();
    if (c == 0) shape_fail("softmax_rows", {out.shape()}, "empty reduction axis");
    const std::size_t rows = out.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * c;
        const double mx = *std::max_element(p, p + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    }
    return push("softmax_rows", std::move(out), {a.id}, [a, c](Graph& g, std::size_t self) {
        const Node& me = g.nodes_[self];
        Tensor& d = g.grad_slot(a.id);
        const std::size_t rows = me.value.size() / c;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = me.value.data() + r * c;
            const double* gr = me.grad.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * p[j];
            for (std::size_t j = 0; j < c; ++j) d[r * c + j] += p[j] * (gr[j] - dot);
        }
    });
}

Var Graph::sum(Var a) {
    const Tensor& A = node(a, "sum").value;
    double acc = 0.0;
    for (double v : A.values()) acc += v;
    return push("sum", Tensor::scalar(acc), {a.id}, [a](Graph& g, std::size_t self) {
        const double G = g.nodes_[self].grad[0];
        for (auto& v : g.grad_slot(a.id).values()) v += G;
    });
}

Var Graph::mean(Var a) {
    const std::size_t n = node(a, "mean").value.size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Graph::l2norm(Var a) {
    const Tensor& A = node(a, "l2norm").value;
    double ss = 0.0;
    for (double v : A.values()) ss += v * v;
    return push("l2norm", Tensor::scalar(std::sqrt(ss)), {a.id}, [a](Graph& g, std::size_t self) {
        const Node& me = g.nodes_[self];
        const double n = me.value[0];
        if (n == 0.0) return;  // subgradient 0 at the origin
        const Tensor& Av = g.nodes_[a.id].value;
        Tensor& d = g.grad_slot(a.id);
        const double s = me.grad[0] / n;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * Av[i];
    });
}

Var Graph::mean_pool(Var a, std::size_t block) {
    const Tensor& A = node(a, "mean_pool").value;
    if (A.ndim() != 2 || block == 0 || A.rows() % block != 0) {
        shape_fail("mean_pool", {A.shape()}, "rows not divisible by block " + std::to_string(block));
    }
    const std::size_t groups = A.rows() / block;
    const std::size_t c = A.cols();
    Tensor out({groups, c});
    const double inv = 1.0 / static_cast<double>(block);
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t t = 0; t < block; ++t)
            for (std::size_t j = 0; j < c; ++j) out[gi * c + j] += inv * A[(gi * block + t) * c + j];
    return push("mean_pool", std::move(out), {a.id}, [a, block, c](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        Tensor& d = g.grad_slot(a.id);
        const double inv = 1.0 / static_cast<double>(block);
        const std::size_t groups = G.rows();
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t t = 0; t < block; ++t)
                for (std::size_t j = 0; j < c; ++j) d[(gi * block + t) * c + j] += inv * G[gi * c + j];
    });
}

Var Graph::concat(std::span<const Var> parts) {
    std::vector<double> values;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (Var p : parts) {
        const Tensor& t = node(p, "concat").value;
        offsets.push_back(values.size());
        values.insert(values.end(), t.values().begin(), t.values().end());
        ids.push_back(p.id);
    }
    const std::size_t total = values.size();
    return push("concat", Tensor({total}, std::move(values)), ids, [ids, offsets](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs(ids[k])) continue;
            Tensor& d = g.grad_slot(ids[k]);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[offsets[k] + i];
        }
    });
}

Var Graph::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = node(parts[0], "concat_cols").value.rows();
    std::vector<std::size_t> ids;
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor& t = node(p, "concat_cols").value;
        if (t.ndim() != 2 || t.rows() != rows) {
            shape_fail("concat_cols", {node(parts[0], "concat_cols").value.shape(), t.shape()});
        }
        ids.push_back(p.id);
        widths.push_back(t.cols());
        total += t.cols();
    }
    Tensor out({rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const Tensor& t = nodes_[ids[k]].value;
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(t.data() + r * widths[k], widths[k], out.data() + r * total + off);
        off += widths[k];
    }
    return push("concat_cols", std::move(out), ids, [ids, widths, total](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        const std::size_t rows = G.rows();
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (g.needs(ids[k])) {
                Tensor& d = g.grad_slot(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) d[r * widths[k] + j] += G[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Tensor& A = node(a, "slice_rows").value;
    if (A.ndim() < 1 || begin > end || end > A.rows()) {
        shape_fail("slice_rows", {A.shape()}, "rows " + std::to_string(begin) + ".." + std::to_string(end));
    }
    Shape s = A.shape();
    s[0] = end - begin;
    const std::size_t c = A.cols();
    std::vector<double> values(A.data() + begin * c, A.data() + end * c);
    return push("slice_rows", Tensor(std::move(s), std::move(values)), {a.id}, [a, begin, c](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        Tensor& d = g.grad_slot(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) d[begin * c + i] += G[i];
    });
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor& A = node(a, "slice_cols").value;
    if (A.ndim() != 2 || begin > end || end > A.cols()) {
        shape_fail("slice_cols", {A.shape()}, "cols " + std::to_string(begin) + ".." + std::to_string(end));
    }
    const std::size_t rows = A.rows();
    const std::size_t c = A.cols();
    const std::size_t w = end - begin;
    Tensor out({rows, w});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(A.data() + r * c + begin, w, out.data() + r * w);
    return push("slice_cols", std::move(out), {a.id}, [a, begin, c, w](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        Tensor& d = g.grad_slot(a.id);
        const std::size_t rows = G.rows();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) d[r * c + begin + j] += G[r * w + j];
    });
}

Var Graph::reshape(Var a, Shape shape) {
    Tensor out = node(a, "reshape").value.reshaped(std::move(shape));
    return push("reshape", std::move(out), {a.id}, [a](Graph& g, std::size_t self) {
        const Tensor& G = g.nodes_[self].grad;
        Tensor& d = g.grad_slot(a.id);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
    });
}

Var Graph::detach(Var a) { return constant(node(a, "detach").value); }

Var Graph::attention(Var q, Var k, Var v, std::size_t steps, std::size_t heads) {
    const Tensor& Q = node(q, "attention").value;
    const Tensor& K = node(k, "attention").value;
    const Tensor& V = node(v, "attention").value;
    if (Q.shape() != K.shape() || Q.shape() != V.shape() || Q.ndim() != 2) {
        shape_fail("attention", {Q.shape(), K.shape(), V.shape()});
    }
    const std::size_t d = Q.cols();
    if (steps == 0 || heads == 0 || Q.rows() % steps != 0 || d % heads != 0) {
        shape_fail("attention", {Q.shape()},
                   "steps " + std::to_string(steps) + ", heads " + std::to_string(heads));
    }
    const std::size_t samples = Q.rows() / steps;
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<double>>(samples * heads * steps * steps);
    Tensor out({Q.rows(), d});
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs->data() + (s * heads + h) * steps * steps;
            for (std::size_t i = 0; i < steps; ++i) {
                const double* qi = Q.data() + (s * steps + i) * d + h * dh;
                double* pi = P + i * steps;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < steps; ++j) {
                    const double* kj = K.data() + (s * steps + j) * d + h * dh;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    pi[j] = acc * inv_sqrt;
                    mx = std::max(mx, pi[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < steps; ++j) z += (pi[j] = std::exp(pi[j] - mx));
                double* oi = out.data() + (s * steps + i) * d + h * dh;
                for (std::size_t j = 0; j < steps; ++j) {
                    pi[j] /= z;
                    const double* vj = V.data() + (s * steps + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
                }
            }
        }
    }
    return push("attention", std::move(out), {q.id, k.id, v.id},
                [q, k, v, steps, heads, dh, d, inv_sqrt, probs](Graph& g, std::size_t self) {
                    const Tensor& G = g.nodes_[self].grad;
                    const Tensor& Qv = g.nodes_[q.id].value;
                    const Tensor& Kv = g.nodes_[k.id].value;
                    const Tensor& Vv = g.nodes_[v.id].value;
                    Tensor* dQ = g.needs(q.id) ? &g.grad_slot(q.id) : nullptr;
                    Tensor* dK = g.needs(k.id) ? &g.grad_slot(k.id) : nullptr;
                    Tensor* dV = g.needs(v.id) ? &g.grad_slot(v.id) : nullptr;
                    const std::size_t samples = Qv.rows() / steps;
                    std::vector<double> dP(steps);
                    for (std::size_t s = 0; s < samples; ++s) {
                        for (std::size_t h = 0; h < heads; ++h) {
                            const double* P = probs->data() + (s * heads + h) * steps * steps;
                            for (std::size_t i = 0; i < steps; ++i) {
                                const double* gi = G.data() + (s * steps + i) * d + h * dh;
                                const double* pi = P + i * steps;
                                double dot = 0.0;
                                for (std::size_t j = 0; j < steps; ++j) {
                                    const std::size_t rj = (s * steps + j) * d + h * dh;
                                    double acc = 0.0;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                        acc += gi[c] * Vv[rj + c];
                                        if (dV) (*dV)[rj + c] += pi[j] * gi[c];
                                    }
                                    dP[j] = acc;
                                    dot += acc * pi[j];
                                }
                                const std::size_t ri = (s * steps + i) * d + h * dh;
                                for (std::size_t j = 0; j < steps; ++j) {
                                    const double dS = pi[j] * (dP[j] - dot) * inv_sqrt;
                                    if (dS == 0.0) continue;
                                    const std::size_t rj = (s * steps + j) * d + h * dh;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                        if (dQ) (*dQ)[ri + c] += dS * Kv[rj + c];
                                        if (dK) (*dK)[rj + c] += dS * Qv[ri + c];
                                    }
                                }
                            }
                        }
                    }
                });
}

Var Graph::bce(Var prob, const Tensor& targets) {
    const Tensor& P = node(prob, "bce").value;
    if (P.size() != targets.size() || P.size() == 0) shape_fail("bce", {P.shape(), targets.shape()});
    double acc = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double p = P[i];
        const double y = targets[i];
        acc -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
    }
    const double n = static_cast<double>(P.size());
    return push("bce", Tensor::scalar(acc / n), {prob.id}, [prob, targets, n](Graph& g, std::size_t self) {
        const double G = g.nodes_[self].grad[0];
        const Tensor& Pv = g.nodes_[prob.id].value;
        Tensor& d = g.grad_slot(prob.id);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double p = Pv[i];
            const double y = targets[i];
            d[i] += G * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
        }
    });
}

Var Graph::bce_with_logits(Var logits, const Tensor& targets) {
    const Tensor& Z = node(logits, "bce_with_logits").value;
    if (Z.size() != targets.size() || Z.size() == 0) shape_fail("bce_with_logits", {Z.shape(), targets.shape()});
    double acc = 0.0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
        const double z = Z[i];
        acc += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    const double n = static_cast<double>(Z.size());
    return push("bce_with_logits", Tensor::scalar(acc / n), {logits.id},
                [logits, targets, n](Graph& g, std::size_t self) {
                    const double G = g.nodes_[self].grad[0];
                    const Tensor& Zv = g.nodes_[logits.id].value;
                    Tensor& d = g.grad_slot(logits.id);
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += G * (sigmoid_scalar(Zv[i]) - targets[i]) / n;
                });
}

void Graph::backward(Var loss) {
    const Node& root = node(loss, "backward");
    if (root.value.size() != 1) {
        throw AutodiffError("backward: target must be a scalar, got shape " + to_string(root.value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    has_backward_ = true;
    if (!root.requires_grad) return;
    grad_slot(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.size() != n.value.size() || !n.backward) continue;
        n.backward(*this, i);
    }
}

void Graph::accumulate_gradients() const {
    if (!has_backward_) throw AutodiffError("accumulate_gradients: backward() has not been run");
    for (const auto& n : nodes_) {
        if (!n.param || n.grad.size() != n.value.size()) continue;
        Tensor& dst = n.param->grad;
        if (dst.shape() != n.value.shape()) dst = Tensor(n.value.shape());
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
}

double gradcheck(const std::function<Var(Graph&)>& loss_fn, std::span<Parameter* const> params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("gradcheck: eps must be positive");
    auto eval = [&]() {
        Graph g;
        const double v = g.value(loss_fn(g)).item();
        if (!std::isfinite(v)) throw AutodiffError("gradcheck: non-finite loss");
        return v;
    };

    std::vector<Tensor> analytic;
    {
        Graph g;
        const Var loss = loss_fn(g);
        if (!std::isfinite(g.value(loss).item())) throw AutodiffError("gradcheck: non-finite loss");
        for (Parameter* p : params) p->zero_grad();
        g.backward(loss);
        g.accumulate_gradients();
        for (Parameter* p : params) analytic.push_back(p->grad);
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + eps;
            const double up = eval();
            p.value[i] = saved - eps;
            const double down = eval();
            p.value[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
        }
    }
    return worst;
}

}  // namespace fgd
