// SPDX-License-Identifier: Apache-2.0

#include "lkv/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "lkv/errors.hpp"

namespace lkv {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::atomic<int64_t> g_seq{0};
thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw contract_error("negative extent in shape");
        n *= static_cast<size_t>(d);
    }
    return n;
}

void check_finite(const Tensor& t, const char* op) {
    const double* p = t.data();
    const size_t n = t.numel();
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) throw numeric_error(std::string(op) + ": non-finite input");
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw contract_error(std::string(op) + ": shape mismatch");
}

// Rows/cols view of a tensor treated as a matrix over its last dimension.
std::pair<int, int> as_matrix(const Tensor& t, const char* op) {
    if (t.rank() < 1) throw contract_error(std::string(op) + ": rank-0 input");
    const int cols = t.dim(t.rank() - 1);
    if (cols < 1) throw contract_error(std::string(op) + ": empty last dim");
    const int rows = static_cast<int>(t.numel() / static_cast<size_t>(cols));
    return {rows, cols};
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void attach(Tensor& out, std::vector<Tensor> inputs,
            std::function<std::vector<Tensor>(const Tensor&)> vjp) {
    if (!g_grad_enabled || !any_requires_grad(inputs)) return;
    out.set_requires_grad(true);
    auto node = std::make_shared<TapeNode>();
    node->inputs = std::move(inputs);
    node->vjp = std::move(vjp);
    node->output_id = out.id();
    node->output_shape = out.shape();
    node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    out.node = std::move(node);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)),
      requires_grad_(requires_grad) {}

Tensor Tensor::scalar(double v, bool requires_grad) {
    Tensor t({1}, requires_grad);
    t.data()[0] = v;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) throw contract_error("from: shape/data length mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    t.requires_grad_ = requires_grad;
    return t;
}

size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

double Tensor::value() const {
    if (numel() != 1) throw contract_error("value(): tensor is not scalar-shaped");
    return (*data_)[0];
}

Tensor Tensor::detached_clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    t.requires_grad_ = false;
    return t;
}

// ---- GradMap / backward ----------------------------------------------------

Tensor GradMap::grad_for(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor(t.shape());
    return it->second;
}

void GradMap::accumulate(const Tensor& t, const Tensor& g) {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        grads_.emplace(t.id(), g.detached_clone());
        return;
    }
    Tensor& dst = it->second;
    if (dst.shape() != g.shape()) throw contract_error("gradient shape mismatch on accumulate");
    double* d = dst.data();
    const double* s = g.data();
    const size_t n = dst.numel();
    for (size_t i = 0; i < n; ++i) d[i] += s[i];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

GradMap backward(const Tensor& root) {
    if (root.numel() != 1) throw contract_error("backward: root must be scalar-shaped");
    if (!root.node) throw contract_error("backward: root has no tape");

    // Reachable nodes, then reverse creation order = reverse topological order.
    std::vector<TapeNode*> nodes;
    std::unordered_set<TapeNode*> seen;
    std::vector<TapeNode*> stack{root.node.get()};
    seen.insert(root.node.get());
    while (!stack.empty()) {
        TapeNode* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const Tensor& in : n->inputs) {
            if (in.node && seen.insert(in.node.get()).second) stack.push_back(in.node.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TapeNode* a, const TapeNode* b) { return a->seq > b->seq; });

    std::unordered_map<TensorId, Tensor> acc;
    acc.emplace(root.id(), Tensor::scalar(1.0));

    GradMap out;
    for (TapeNode* n : nodes) {
        auto it = acc.find(n->output_id);
        if (it == acc.end()) continue;
        const Tensor upstream = it->second;
        std::vector<Tensor> grads = n->vjp(upstream);
        if (grads.size() != n->inputs.size()) throw contract_error("vjp arity mismatch");
        for (size_t i = 0; i < grads.size(); ++i) {
            if (!grads[i].defined()) continue;
            const Tensor& in = n->inputs[i];
            if (grads[i].shape() != in.shape()) throw contract_error("vjp gradient shape mismatch");
            auto slot = acc.find(in.id());
            if (slot == acc.end()) {
                acc.emplace(in.id(), grads[i].detached_clone());
            } else {
                double* d = slot->second.data();
                const double* s = grads[i].data();
                const size_t cnt = slot->second.numel();
                for (size_t j = 0; j < cnt; ++j) d[j] += s[j];
            }
        }
    }

    // Expose gradients of leaves (and intermediates) that asked for them.
    for (TapeNode* n : nodes) {
        for (const Tensor& in : n->inputs) {
            if (!in.requires_grad()) continue;
            auto slot = acc.find(in.id());
            if (slot != acc.end() && !out.contains(in)) out.accumulate(in, slot->second);
        }
    }
    return out;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    check_finite(a, "add");
    check_finite(b, "add");
    Tensor out(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    attach(out, {a, b}, [](const Tensor& u) {
        return std::vector<Tensor>{u, u};
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    check_finite(a, "mul");
    check_finite(b, "mul");
    Tensor out(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    attach(out, {a, b}, [a, b](const Tensor& u) {
        Tensor ga(a.shape()), gb(b.shape());
        const size_t cnt = u.numel();
        for (size_t i = 0; i < cnt; ++i) {
            ga.data()[i] = u.data()[i] * b.data()[i];
            gb.data()[i] = u.data()[i] * a.data()[i];
        }
        return std::vector<Tensor>{ga, gb};
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    check_finite(a, "scale");
    if (!std::isfinite(c)) throw numeric_error("scale: non-finite factor");
    Tensor out(a.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    attach(out, {a}, [c](const Tensor& u) {
        Tensor g(u.shape());
        for (size_t i = 0; i < u.numel(); ++i) g.data()[i] = u.data()[i] * c;
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    auto [rows, cols] = as_matrix(x, "add_rowvec");
    if (bias.rank() != 1 || bias.dim(0) != cols) throw contract_error("add_rowvec: bias length mismatch");
    check_finite(x, "add_rowvec");
    check_finite(bias, "add_rowvec");
    Tensor out(x.shape());
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out.data()[static_cast<size_t>(r) * cols + c] =
                x.data()[static_cast<size_t>(r) * cols + c] + bias.data()[c];
        }
    }
    attach(out, {x, bias}, [rows, cols, bias](const Tensor& u) {
        Tensor gb(bias.shape());
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) gb.data()[c] += u.data()[static_cast<size_t>(r) * cols + c];
        }
        return std::vector<Tensor>{u, gb};
    });
    return out;
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw contract_error("matmul: rank-2 operands required");
    if (a.dim(1) != b.dim(0)) throw contract_error("matmul: inner extents differ");
    check_finite(a, "matmul");
    check_finite(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    {
        ConstMap A(a.data(), m, k), B(b.data(), k, n);
        MutMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    attach(out, {a, b}, [a, b, m, k, n](const Tensor& u) {
        Tensor ga({m, k}), gb({k, n});
        ConstMap A(a.data(), m, k), B(b.data(), k, n), U(u.data(), m, n);
        MutMap GA(ga.data(), m, k), GB(gb.data(), k, n);
        GA.noalias() = U * B.transpose();
        GB.noalias() = A.transpose() * U;
        return std::vector<Tensor>{ga, gb};
    });
    return out;
}

// ---- shape ops --------------------------------------------------------------

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_lastdim: no inputs");
    const int rank = parts[0].rank();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw contract_error("concat_lastdim: rank mismatch");
        for (int i = 0; i + 1 < rank; ++i) {
            if (p.dim(i) != parts[0].dim(i)) throw contract_error("concat_lastdim: leading shape mismatch");
        }
        check_finite(p, "concat_lastdim");
        total += p.dim(rank - 1);
    }
    std::vector<int> shape = parts[0].shape();
    shape.back() = total;
    Tensor out(shape);
    auto [rows, cols] = as_matrix(out, "concat_lastdim");
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(rank - 1);
        for (int r = 0; r < rows; ++r) {
            std::copy_n(p.data() + static_cast<size_t>(r) * w, w,
                        out.data() + static_cast<size_t>(r) * cols + off);
        }
        off += w;
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.dim(rank - 1));
    attach(out, parts, [widths, rows, cols](const Tensor& u) {
        std::vector<Tensor> grads;
        int off2 = 0;
        for (int w : widths) {
            std::vector<int> gshape = u.shape();
            gshape.back() = w;
            Tensor g(gshape);
            for (int r = 0; r < rows; ++r) {
                std::copy_n(u.data() + static_cast<size_t>(r) * cols + off2, w,
                            g.data() + static_cast<size_t>(r) * w);
            }
            grads.push_back(g);
            off2 += w;
        }
        return grads;
    });
    return out;
}

Tensor slice_lastdim(const Tensor& x, int offset, int length) {
    auto [rows, cols] = as_matrix(x, "slice_lastdim");
    if (offset < 0 || length <= 0 || offset + length > cols) throw contract_error("slice_lastdim: bad range");
    check_finite(x, "slice_lastdim");
    std::vector<int> shape = x.shape();
    shape.back() = length;
    Tensor out(shape);
    for (int r = 0; r < rows; ++r) {
        std::copy_n(x.data() + static_cast<size_t>(r) * cols + offset, length,
                    out.data() + static_cast<size_t>(r) * length);
    }
    attach(out, {x}, [offset, length, rows, cols, xshape = x.shape()](const Tensor& u) {
        Tensor g(xshape);
        for (int r = 0; r < rows; ++r) {
            std::copy_n(u.data() + static_cast<size_t>(r) * length, length,
                        g.data() + static_cast<size_t>(r) * cols + offset);
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

// ---- nonlinearities ----------------------------------------------------------

Tensor silu(const Tensor& x) {
    check_finite(x, "silu");
    Tensor out(x.shape());
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = v / (1.0 + std::exp(-v));
    }
    attach(out, {x}, [x](const Tensor& u) {
        Tensor g(x.shape());
        for (size_t i = 0; i < u.numel(); ++i) {
            const double v = x.data()[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            g.data()[i] = u.data()[i] * s * (1.0 + v * (1.0 - s));
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    auto [rows, cols] = as_matrix(x, "softmax_lastdim");
    check_finite(x, "softmax_lastdim");
    Tensor out(x.shape());
    for (int r = 0; r < rows; ++r) {
        const double* xin = x.data() + static_cast<size_t>(r) * cols;
        double* o = out.data() + static_cast<size_t>(r) * cols;
        double mx = xin[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xin[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            o[c] = std::exp(xin[c] - mx);
            z += o[c];
        }
        for (int c = 0; c < cols; ++c) o[c] /= z;
    }
    attach(out, {x}, [out, rows, cols](const Tensor& u) {
        Tensor g(u.shape());
        for (int r = 0; r < rows; ++r) {
            const double* p = out.data() + static_cast<size_t>(r) * cols;
            const double* uu = u.data() + static_cast<size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += p[c] * uu[c];
            double* gg = g.data() + static_cast<size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) gg[c] = p[c] * (uu[c] - dot);
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor log(const Tensor& x) {
    check_finite(x, "log");
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) {
        const double v = x.data()[i];
        if (v <= 0.0) throw numeric_error("log: non-positive input");
        out.data()[i] = std::log(v);
    }
    attach(out, {x}, [x](const Tensor& u) {
        Tensor g(x.shape());
        for (size_t i = 0; i < u.numel(); ++i) g.data()[i] = u.data()[i] / x.data()[i];
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor exp(const Tensor& x) {
    check_finite(x, "exp");
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = std::exp(x.data()[i]);
    attach(out, {x}, [out](const Tensor& u) {
        Tensor g(u.shape());
        for (size_t i = 0; i < u.numel(); ++i) g.data()[i] = u.data()[i] * out.data()[i];
        return std::vector<Tensor>{g};
    });
    return out;
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
    check_finite(x, "sum");
    double s = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s);
    attach(out, {x}, [shape = x.shape()](const Tensor& u) {
        return std::vector<Tensor>{Tensor::full(shape, u.data()[0])};
    });
    return out;
}

Tensor mean(const Tensor& x) {
    check_finite(x, "mean");
    const size_t n = x.numel();
    if (n == 0) throw contract_error("mean: empty tensor");
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    attach(out, {x}, [shape = x.shape(), n](const Tensor& u) {
        return std::vector<Tensor>{Tensor::full(shape, u.data()[0] / static_cast<double>(n))};
    });
    return out;
}

Tensor sq_error(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sq_error");
    check_finite(a, "sq_error");
    check_finite(b, "sq_error");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        out.data()[i] = d * d;
    }
    attach(out, {a, b}, [a, b](const Tensor& u) {
        Tensor ga(a.shape()), gb(b.shape());
        for (size_t i = 0; i < u.numel(); ++i) {
            const double d = 2.0 * (a.data()[i] - b.data()[i]) * u.data()[i];
            ga.data()[i] = d;
            gb.data()[i] = -d;
        }
        return std::vector<Tensor>{ga, gb};
    });
    return out;
}

namespace {

// Stable log-softmax of one row.
void log_softmax_row(const double* x, int cols, double* out) {
    double mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const double lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) out[c] = x[c] - lz;
}

}  // namespace

Tensor kl_from_logits(const Tensor& teacher_logits, const Tensor& student_logits) {
    check_same_shape(teacher_logits, student_logits, "kl_from_logits");
    auto [rows, cols] = as_matrix(teacher_logits, "kl_from_logits");
    check_finite(teacher_logits, "kl_from_logits");
    check_finite(student_logits, "kl_from_logits");

    std::vector<double> lt(static_cast<size_t>(cols)), ls(static_cast<size_t>(cols));
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        log_softmax_row(teacher_logits.data() + static_cast<size_t>(r) * cols, cols, lt.data());
        log_softmax_row(student_logits.data() + static_cast<size_t>(r) * cols, cols, ls.data());
        for (int c = 0; c < cols; ++c) total += std::exp(lt[c]) * (lt[c] - ls[c]);
    }
    Tensor out = Tensor::scalar(total / rows);

    attach(out, {teacher_logits, student_logits},
           [teacher_logits, student_logits, rows, cols](const Tensor& u) {
               const double w = u.data()[0] / rows;
               Tensor gt(teacher_logits.shape()), gs(student_logits.shape());
               std::vector<double> lt(static_cast<size_t>(cols)), ls(static_cast<size_t>(cols));
               for (int r = 0; r < rows; ++r) {
                   const size_t base = static_cast<size_t>(r) * cols;
                   log_softmax_row(teacher_logits.data() + base, cols, lt.data());
                   log_softmax_row(student_logits.data() + base, cols, ls.data());
                   double row_kl = 0.0;
                   for (int c = 0; c < cols; ++c) row_kl += std::exp(lt[c]) * (lt[c] - ls[c]);
                   for (int c = 0; c < cols; ++c) {
                       const double pt = std::exp(lt[c]);
                       const double ps = std::exp(ls[c]);
                       gs.data()[base + c] = w * (ps - pt);
                       gt.data()[base + c] = w * pt * ((lt[c] - ls[c]) - row_kl);
                   }
               }
               return std::vector<Tensor>{gt, gs};
           });
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    auto [rows, cols] = as_matrix(x, "rmsnorm");
    if (gain.rank() != 1 || gain.dim(0) != cols) throw contract_error("rmsnorm: gain length mismatch");
    check_finite(x, "rmsnorm");
    check_finite(gain, "rmsnorm");
    Tensor out(x.shape());
    std::vector<double> inv_rms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.data() + static_cast<size_t>(r) * cols;
        double ms = 0.0;
        for (int c = 0; c < cols; ++c) ms += xr[c] * xr[c];
        ms = ms / cols + eps;
        const double inv = 1.0 / std::sqrt(ms);
        inv_rms[static_cast<size_t>(r)] = inv;
        double* o = out.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) o[c] = xr[c] * gain.data()[c] * inv;
    }
    attach(out, {x, gain}, [x, gain, rows, cols, inv_rms](const Tensor& u) {
        Tensor gx(x.shape()), gg(gain.shape());
        for (int r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * cols;
            const double* xr = x.data() + base;
            const double* ur = u.data() + base;
            const double inv = inv_rms[static_cast<size_t>(r)];
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += ur[c] * gain.data()[c] * xr[c];
            const double k = dot * inv * inv * inv / cols;
            for (int c = 0; c < cols; ++c) {
                gx.data()[base + c] = ur[c] * gain.data()[c] * inv - k * xr[c];
                gg.data()[c] += ur[c] * xr[c] * inv;
            }
        }
        return std::vector<Tensor>{gx, gg};
    });
    return out;
}

Tensor rope(const Tensor& x, const std::vector<int>& positions, double base) {
    auto [rows, cols] = as_matrix(x, "rope");
    if (cols % 2 != 0) throw contract_error("rope: last dim must be even");
    if (static_cast<int>(positions.size()) != rows) throw contract_error("rope: positions/rows mismatch");
    check_finite(x, "rope");
    Tensor out(x.shape());
    const int half = cols / 2;
    std::vector<double> freq(static_cast<size_t>(half));
    for (int j = 0; j < half; ++j) freq[static_cast<size_t>(j)] = std::pow(base, -2.0 * j / cols);
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.data() + static_cast<size_t>(r) * cols;
        double* o = out.data() + static_cast<size_t>(r) * cols;
        for (int j = 0; j < half; ++j) {
            const double th = positions[static_cast<size_t>(r)] * freq[static_cast<size_t>(j)];
            const double cs = std::cos(th), sn = std::sin(th);
            const double a = xr[2 * j], b = xr[2 * j + 1];
            o[2 * j] = a * cs - b * sn;
            o[2 * j + 1] = a * sn + b * cs;
        }
    }
    attach(out, {x}, [positions, freq, rows, cols, half, xshape = x.shape()](const Tensor& u) {
        // Inverse rotation.
        Tensor g(xshape);
        for (int r = 0; r < rows; ++r) {
            const double* ur = u.data() + static_cast<size_t>(r) * cols;
            double* gr = g.data() + static_cast<size_t>(r) * cols;
            for (int j = 0; j < half; ++j) {
                const double th = positions[static_cast<size_t>(r)] * freq[static_cast<size_t>(j)];
                const double cs = std::cos(th), sn = std::sin(th);
                const double a = ur[2 * j], b = ur[2 * j + 1];
                gr[2 * j] = a * cs + b * sn;
                gr[2 * j + 1] = -a * sn + b * cs;
            }
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw contract_error("embedding_rows: table must be rank-2");
    check_finite(table, "embedding_rows");
    const int vocab = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) throw contract_error("embedding_rows: id out of range");
    }
    const int t = static_cast<int>(ids.size());
    Tensor out({t, d});
    for (int r = 0; r < t; ++r) {
        std::copy_n(table.data() + static_cast<size_t>(ids[static_cast<size_t>(r)]) * d, d,
                    out.data() + static_cast<size_t>(r) * d);
    }
    attach(out, {table}, [ids, t, d, tshape = table.shape()](const Tensor& u) {
        Tensor g(tshape);
        for (int r = 0; r < t; ++r) {
            const double* ur = u.data() + static_cast<size_t>(r) * d;
            double* gr = g.data() + static_cast<size_t>(ids[static_cast<size_t>(r)]) * d;
            for (int c = 0; c < d; ++c) gr[c] += ur[c];
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw contract_error("cross_entropy_logits: logits must be rank-2");
    const int rows = logits.dim(0), cols = logits.dim(1);
    if (static_cast<int>(targets.size()) != rows) throw contract_error("cross_entropy_logits: target count mismatch");
    for (int tgt : targets) {
        if (tgt < 0 || tgt >= cols) throw contract_error("cross_entropy_logits: target out of range");
    }
    check_finite(logits, "cross_entropy_logits");
    std::vector<double> lr(static_cast<size_t>(cols));
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        log_softmax_row(logits.data() + static_cast<size_t>(r) * cols, cols, lr.data());
        total -= lr[static_cast<size_t>(targets[static_cast<size_t>(r)])];
    }
    Tensor out = Tensor::scalar(total / rows);
    attach(out, {logits}, [logits, targets, rows, cols](const Tensor& u) {
        const double w = u.data()[0] / rows;
        Tensor g(logits.shape());
        std::vector<double> lr(static_cast<size_t>(cols));
        for (int r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * cols;
            log_softmax_row(logits.data() + base, cols, lr.data());
            for (int c = 0; c < cols; ++c) g.data()[base + c] = w * std::exp(lr[static_cast<size_t>(c)]);
            g.data()[base + targets[static_cast<size_t>(r)]] -= w;
        }
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) throw contract_error("reshape: element count mismatch");
    Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data(), x.data() + x.numel()));
    attach(out, {x}, [xshape = x.shape()](const Tensor& u) {
        Tensor g = Tensor::from(xshape, std::vector<double>(u.data(), u.data() + u.numel()));
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor make_op_output(std::vector<int> shape, std::vector<double> values,
                      std::vector<Tensor> inputs,
                      std::function<std::vector<Tensor>(const Tensor&)> vjp) {
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    attach(out, std::move(inputs), std::move(vjp));
    return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h) {
    if (h <= 0.0) throw contract_error("finite_difference_gradient: h must be positive");
    NoGradGuard ng;
    Tensor g(x.shape());
    Tensor probe = x.detached_clone();
    for (size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = f(probe);
        probe.data()[i] = orig - h;
        const double fm = f(probe);
        probe.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw numeric_error("finite_difference_gradient: non-finite evaluation");
        }
        g.data()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace lkv
