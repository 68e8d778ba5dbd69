#include "maldikit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace maldikit {

namespace {

std::atomic<int64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

void check(bool ok, const std::string& msg) {
    if (!ok) throw DataError(msg);
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1);
    return n;
}

// Builds an op node. The tape is only extended when gradients are enabled
// and at least one parent needs them; otherwise the result is a plain
// constant and intermediates can be freed eagerly.
DiffArray make_op(Shape shape, std::vector<double> value, std::vector<DiffArray> parents,
                  std::function<void(Node&)> bp) {
    auto n = new_node(std::move(shape), std::move(value));
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.node_->requires_grad) track = true;
    }
    if (track) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node_);
        n->backprop = std::move(bp);
    }
    return DiffArray(n);
}

void check_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
    if (a.shape() != b.shape())
        throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

}  // namespace

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

DiffArray DiffArray::constant(Shape shape, std::vector<double> values) {
    check(numel(shape) == int64_t(values.size()), "constant: shape/data size mismatch");
    return DiffArray(new_node(std::move(shape), std::move(values)));
}

DiffArray DiffArray::zeros(Shape shape) {
    auto n = numel(shape);
    return DiffArray(new_node(std::move(shape), std::vector<double>(size_t(n), 0.0)));
}

DiffArray DiffArray::full(Shape shape, double x) {
    auto n = numel(shape);
    return DiffArray(new_node(std::move(shape), std::vector<double>(size_t(n), x)));
}

DiffArray DiffArray::parameter(Shape shape, std::vector<double> values) {
    auto a = constant(std::move(shape), std::move(values));
    a.node_->requires_grad = true;
    return a;
}

double DiffArray::scalar() const {
    check(size() == 1, "scalar() on non-scalar array " + shape_str(shape()));
    return node_->value[0];
}

void backward(const DiffArray& loss) {
    check(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node_->requires_grad) return;  // nothing on the tape depends on parameters

    // Collect the reachable subgraph, then run closures in reverse creation
    // order (valid topological order: parents are always older).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node_.get()};
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    loss.node_->ensure_grad();
    loss.node_->grad[0] += 1.0;
    for (Node* n : order) {
        if (n->backprop) n->backprop(*n);
    }
}

// ---------------- elementwise ----------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
        auto& ga = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i];
            gb[i] += self.grad[i];
        }
    });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
        auto& ga = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i];
            gb[i] -= self.grad[i];
        }
    });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& self) {
        auto& ga = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        const auto& av = self.parents[0]->value;
        const auto& bv2 = self.parents[1]->value;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i] * bv2[i];
            gb[i] += self.grad[i] * av[i];
        }
    });
}

DiffArray neg(const DiffArray& a) { return mul_scalar(a, -1.0); }

DiffArray add_scalar(const DiffArray& a, double c) {
    std::vector<double> v(a.values());
    for (auto& x : v) x += c;
    return make_op(a.shape(), std::move(v), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

DiffArray mul_scalar(const DiffArray& a, double c) {
    std::vector<double> v(a.values());
    for (auto& x : v) x *= c;
    return make_op(a.shape(), std::move(v), {a}, [c](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    });
}

DiffArray vexp(const DiffArray& a) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = std::exp(x);
    return make_op(a.shape(), std::move(v), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

DiffArray vlog(const DiffArray& a) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = std::log(x);
    return make_op(a.shape(), std::move(v), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& av = self.parents[0]->value;
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / av[i];
    });
}

DiffArray clip(const DiffArray& a, double lo, double hi) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = std::min(hi, std::max(lo, x));
    return make_op(a.shape(), std::move(v), {a}, [lo, hi](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& av = self.parents[0]->value;
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (av[i] > lo && av[i] < hi) g[i] += self.grad[i];
    });
}

DiffArray relu(const DiffArray& a) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = x > 0.0 ? x : 0.0;
    return make_op(a.shape(), std::move(v), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& av = self.parents[0]->value;
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (av[i] > 0.0) g[i] += self.grad[i];
    });
}

DiffArray leaky_relu(const DiffArray& a, double slope) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = x > 0.0 ? x : slope * x;
    return make_op(a.shape(), std::move(v), {a}, [slope](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& av = self.parents[0]->value;
        for (size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * (av[i] > 0.0 ? 1.0 : slope);
    });
}

DiffArray sigmoid(const DiffArray& a) {
    std::vector<double> v(a.values());
    for (auto& x : v) x = 1.0 / (1.0 + std::exp(-x));
    return make_op(a.shape(), std::move(v), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

DiffArray detach(const DiffArray& a) { return DiffArray::constant(a.shape(), a.values()); }

// ---------------- reductions / structure ----------------

DiffArray sum(const DiffArray& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return make_op({1}, {s}, {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        double d = self.grad[0];
        for (auto& x : g) x += d;
    });
}

DiffArray mean(const DiffArray& a) { return mul_scalar(sum(a), 1.0 / double(a.size())); }

DiffArray reshape(const DiffArray& a, Shape shape) {
    check(numel(shape) == a.size(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_op(std::move(shape), a.values(), {a}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

DiffArray concat_cols(const DiffArray& a, const DiffArray& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[0] == b.shape()[0],
          "concat_cols: need [N,A],[N,B] with equal N");
    int n = a.shape()[0], fa = a.shape()[1], fb = b.shape()[1];
    std::vector<double> v(size_t(n) * size_t(fa + fb));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int r = 0; r < n; ++r) {
        std::copy_n(&av[size_t(r) * fa], fa, &v[size_t(r) * (fa + fb)]);
        std::copy_n(&bv[size_t(r) * fb], fb, &v[size_t(r) * (fa + fb) + fa]);
    }
    return make_op({n, fa + fb}, std::move(v), {a, b}, [n, fa, fb](Node& self) {
        auto& ga = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const double* src = &self.grad[size_t(r) * (fa + fb)];
            for (int i = 0; i < fa; ++i) ga[size_t(r) * fa + i] += src[i];
            for (int i = 0; i < fb; ++i) gb[size_t(r) * fb + i] += src[fa + i];
        }
    });
}

DiffArray slice_cols(const DiffArray& a, int lo, int hi) {
    check(a.shape().size() == 2 && lo >= 0 && hi <= a.shape()[1] && lo < hi,
          "slice_cols: bad range");
    int n = a.shape()[0], f = a.shape()[1], w = hi - lo;
    std::vector<double> v(size_t(n) * w);
    const auto& av = a.values();
    for (int r = 0; r < n; ++r) std::copy_n(&av[size_t(r) * f + lo], w, &v[size_t(r) * w]);
    return make_op({n, w}, std::move(v), {a}, [n, f, lo, w](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int i = 0; i < w; ++i) g[size_t(r) * f + lo + i] += self.grad[size_t(r) * w + i];
    });
}

DiffArray concat_channels(const DiffArray& a, const DiffArray& b) {
    check(a.shape().size() == 3 && b.shape().size() == 3 && a.shape()[0] == b.shape()[0] &&
              a.shape()[2] == b.shape()[2],
          "concat_channels: need [N,C1,L],[N,C2,L]");
    int n = a.shape()[0], c1 = a.shape()[1], c2 = b.shape()[1], len = a.shape()[2];
    std::vector<double> v(size_t(n) * (c1 + c2) * len);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int r = 0; r < n; ++r) {
        std::copy_n(&av[size_t(r) * c1 * len], size_t(c1) * len, &v[size_t(r) * (c1 + c2) * len]);
        std::copy_n(&bv[size_t(r) * c2 * len], size_t(c2) * len,
                    &v[size_t(r) * (c1 + c2) * len + size_t(c1) * len]);
    }
    return make_op({n, c1 + c2, len}, std::move(v), {a, b}, [n, c1, c2, len](Node& self) {
        auto& ga = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const double* src = &self.grad[size_t(r) * (c1 + c2) * len];
            for (int64_t i = 0; i < int64_t(c1) * len; ++i) ga[size_t(r) * c1 * len + i] += src[i];
            for (int64_t i = 0; i < int64_t(c2) * len; ++i)
                gb[size_t(r) * c2 * len + i] += src[int64_t(c1) * len + i];
        }
    });
}

// ---------------- linear algebra / layers ----------------

DiffArray matmul(const DiffArray& x, const DiffArray& w) {
    check(x.shape().size() == 2 && w.shape().size() == 2 && x.shape()[1] == w.shape()[0],
          "matmul: incompatible " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    int n = x.shape()[0], a = x.shape()[1], b = w.shape()[1];
    std::vector<double> v(size_t(n) * b, 0.0);
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (int r = 0; r < n; ++r) {
        for (int i = 0; i < a; ++i) {
            double xa = xv[size_t(r) * a + i];
            if (xa == 0.0) continue;
            const double* wr = &wv[size_t(i) * b];
            double* out = &v[size_t(r) * b];
            for (int j = 0; j < b; ++j) out[j] += xa * wr[j];
        }
    }
    return make_op({n, b}, std::move(v), {x, w}, [n, a, b](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        auto& gw = self.parents[1]->ensure_grad();
        const auto& xv2 = self.parents[0]->value;
        const auto& wv2 = self.parents[1]->value;
        for (int r = 0; r < n; ++r) {
            const double* gy = &self.grad[size_t(r) * b];
            for (int i = 0; i < a; ++i) {
                const double* wr = &wv2[size_t(i) * b];
                double acc = 0.0;
                for (int j = 0; j < b; ++j) acc += gy[j] * wr[j];
                gx[size_t(r) * a + i] += acc;
                double xa = xv2[size_t(r) * a + i];
                if (xa != 0.0) {
                    double* gwr = &gw[size_t(i) * b];
                    for (int j = 0; j < b; ++j) gwr[j] += xa * gy[j];
                }
            }
        }
    });
}

DiffArray add_row_bias(const DiffArray& x, const DiffArray& b) {
    check(x.shape().size() == 2 && b.shape().size() == 1 && x.shape()[1] == b.shape()[0],
          "add_row_bias: shapes " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    int n = x.shape()[0], f = x.shape()[1];
    std::vector<double> v(x.values());
    const auto& bv = b.values();
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < f; ++i) v[size_t(r) * f + i] += bv[i];
    return make_op(x.shape(), std::move(v), {x, b}, [n, f](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int i = 0; i < f; ++i) {
                gx[size_t(r) * f + i] += self.grad[size_t(r) * f + i];
                gb[i] += self.grad[size_t(r) * f + i];
            }
    });
}

DiffArray conv1d(const DiffArray& x, const DiffArray& w, const DiffArray& b) {
    check(x.shape().size() == 3 && w.shape().size() == 3 && b.shape().size() == 1,
          "conv1d: need x[N,Ci,L], w[Co,Ci,K], b[Co]");
    int n = x.shape()[0], ci = x.shape()[1], len = x.shape()[2];
    int co = w.shape()[0], k = w.shape()[2];
    check(w.shape()[1] == ci, "conv1d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                  shape_str(w.shape()));
    check(b.shape()[0] == co, "conv1d: bias size mismatch");
    int pad = (k - 1) / 2;  // same-length output at stride 1

    std::vector<double> v(size_t(n) * co * len);
    const auto& xv = x.values();
    const auto& wv = w.values();
    const auto& bv = b.values();
    for (int r = 0; r < n; ++r) {
        for (int o = 0; o < co; ++o) {
            double* out = &v[(size_t(r) * co + o) * len];
            std::fill_n(out, len, bv[o]);
            for (int c = 0; c < ci; ++c) {
                const double* in = &xv[(size_t(r) * ci + c) * len];
                const double* wk = &wv[(size_t(o) * ci + c) * k];
                for (int kk = 0; kk < k; ++kk) {
                    double wkk = wk[kk];
                    int shift = kk - pad;  // input index = l + shift
                    int lo = std::max(0, -shift), hi = std::min(len, len - shift);
                    const double* ip = in + shift;
                    for (int l = lo; l < hi; ++l) out[l] += wkk * ip[l];
                }
            }
        }
    }
    return make_op({n, co, len}, std::move(v), {x, w, b}, [n, ci, co, len, k, pad](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        auto& gw = self.parents[1]->ensure_grad();
        auto& gb = self.parents[2]->ensure_grad();
        const auto& xv2 = self.parents[0]->value;
        const auto& wv2 = self.parents[1]->value;
        for (int r = 0; r < n; ++r) {
            for (int o = 0; o < co; ++o) {
                const double* gy = &self.grad[(size_t(r) * co + o) * len];
                double accb = 0.0;
                for (int l = 0; l < len; ++l) accb += gy[l];
                gb[o] += accb;
                for (int c = 0; c < ci; ++c) {
                    const double* in = &xv2[(size_t(r) * ci + c) * len];
                    const double* wk = &wv2[(size_t(o) * ci + c) * k];
                    double* gin = &gx[(size_t(r) * ci + c) * len];
                    double* gwk = &gw[(size_t(o) * ci + c) * k];
                    for (int kk = 0; kk < k; ++kk) {
                        int shift = kk - pad;
                        int lo = std::max(0, -shift), hi = std::min(len, len - shift);
                        double wkk = wk[kk];
                        double accw = 0.0;
                        const double* ip = in + shift;
                        double* gp = gin + shift;
                        for (int l = lo; l < hi; ++l) {
                            gp[l] += wkk * gy[l];
                            accw += ip[l] * gy[l];
                        }
                        gwk[kk] += accw;
                    }
                }
            }
        }
    });
}

DiffArray maxpool1d(const DiffArray& x) {
    check(x.shape().size() == 3, "maxpool1d: need [N,C,L]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    check(len % 2 == 0, "maxpool1d: length must be even, got " + std::to_string(len));
    int lo = len / 2;
    std::vector<double> v(size_t(n) * c * lo);
    auto arg = std::make_shared<std::vector<int64_t>>(v.size());
    const auto& xv = x.values();
    for (int64_t ch = 0; ch < int64_t(n) * c; ++ch) {
        const double* in = &xv[size_t(ch) * len];
        double* out = &v[size_t(ch) * lo];
        int64_t* ai = &(*arg)[size_t(ch) * lo];
        for (int l = 0; l < lo; ++l) {
            // ties resolve to the left element for determinism
            if (in[2 * l] >= in[2 * l + 1]) {
                out[l] = in[2 * l];
                ai[l] = size_t(ch) * len + 2 * l;
            } else {
                out[l] = in[2 * l + 1];
                ai[l] = size_t(ch) * len + 2 * l + 1;
            }
        }
    }
    return make_op({n, c, lo}, std::move(v), {x}, [arg](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[size_t((*arg)[i])] += self.grad[i];
    });
}

DiffArray upsample2(const DiffArray& x) {
    check(x.shape().size() == 3, "upsample2: need [N,C,L]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    std::vector<double> v(size_t(n) * c * len * 2);
    const auto& xv = x.values();
    for (int64_t ch = 0; ch < int64_t(n) * c; ++ch) {
        const double* in = &xv[size_t(ch) * len];
        double* out = &v[size_t(ch) * len * 2];
        for (int l = 0; l < len; ++l) out[2 * l] = out[2 * l + 1] = in[l];
    }
    return make_op({n, c, 2 * len}, std::move(v), {x}, [n, c, len](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < int64_t(n) * c; ++ch) {
            const double* gy = &self.grad[size_t(ch) * len * 2];
            double* gi = &g[size_t(ch) * len];
            for (int l = 0; l < len; ++l) gi[l] += gy[2 * l] + gy[2 * l + 1];
        }
    });
}

DiffArray groupnorm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta, int groups,
                    double eps) {
    check(x.shape().size() == 3, "groupnorm: need [N,C,L]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    check(groups > 0 && c % groups == 0,
          "groupnorm: channels " + std::to_string(c) + " not divisible by groups " +
              std::to_string(groups));
    check(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "groupnorm: affine size mismatch");
    int cs = c / groups;
    int64_t m = int64_t(cs) * len;  // elements per (sample, group)

    std::vector<double> v(x.values().size());
    auto mean_ = std::make_shared<std::vector<double>>(size_t(n) * groups);
    auto istd_ = std::make_shared<std::vector<double>>(size_t(n) * groups);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int r = 0; r < n; ++r) {
        for (int g = 0; g < groups; ++g) {
            const double* in = &xv[(size_t(r) * c + size_t(g) * cs) * len];
            double mu = 0.0;
            for (int64_t i = 0; i < m; ++i) mu += in[i];
            mu /= double(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                double d = in[i] - mu;
                var += d * d;
            }
            var /= double(m);
            double istd = 1.0 / std::sqrt(var + eps);
            (*mean_)[size_t(r) * groups + g] = mu;
            (*istd_)[size_t(r) * groups + g] = istd;
            double* out = &v[(size_t(r) * c + size_t(g) * cs) * len];
            for (int cc = 0; cc < cs; ++cc) {
                double ga = gv[size_t(g) * cs + cc], be = bv[size_t(g) * cs + cc];
                for (int l = 0; l < len; ++l) {
                    int64_t i = int64_t(cc) * len + l;
                    out[i] = ga * (in[i] - mu) * istd + be;
                }
            }
        }
    }
    return make_op(x.shape(), std::move(v), {x, gamma, beta},
                   [n, c, len, groups, cs, m, mean_, istd_](Node& self) {
                       auto& gx = self.parents[0]->ensure_grad();
                       auto& gg = self.parents[1]->ensure_grad();
                       auto& gb = self.parents[2]->ensure_grad();
                       const auto& xv2 = self.parents[0]->value;
                       const auto& gv2 = self.parents[1]->value;
                       std::vector<double> xhat(static_cast<size_t>(m), 0.0);
                       std::vector<double> dxh(static_cast<size_t>(m), 0.0);
                       for (int r = 0; r < n; ++r) {
                           for (int g = 0; g < groups; ++g) {
                               double mu = (*mean_)[size_t(r) * groups + g];
                               double istd = (*istd_)[size_t(r) * groups + g];
                               const double* in = &xv2[(size_t(r) * c + size_t(g) * cs) * len];
                               const double* gy = &self.grad[(size_t(r) * c + size_t(g) * cs) * len];
                               double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                               for (int cc = 0; cc < cs; ++cc) {
                                   double ga = gv2[size_t(g) * cs + cc];
                                   for (int l = 0; l < len; ++l) {
                                       int64_t i = int64_t(cc) * len + l;
                                       xhat[size_t(i)] = (in[i] - mu) * istd;
                                       dxh[size_t(i)] = gy[i] * ga;
                                       gg[size_t(g) * cs + cc] += gy[i] * xhat[size_t(i)];
                                       gb[size_t(g) * cs + cc] += gy[i];
                                       sum_dxh += dxh[size_t(i)];
                                       sum_dxh_xh += dxh[size_t(i)] * xhat[size_t(i)];
                                   }
                               }
                               double* go = &gx[(size_t(r) * c + size_t(g) * cs) * len];
                               double inv_m = 1.0 / double(m);
                               for (int64_t i = 0; i < m; ++i) {
                                   go[i] += istd * (dxh[size_t(i)] - inv_m * sum_dxh -
                                                    xhat[size_t(i)] * inv_m * sum_dxh_xh);
                               }
                           }
                       }
                   });
}

DiffArray dropout(const DiffArray& x, double p, bool train, RngStream& rng) {
    check(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!train || p == 0.0) return reshape(x, x.shape());  // identity in eval mode
    double keep_scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.values().size());
    std::vector<double> v(x.values());
    for (size_t i = 0; i < v.size(); ++i) {
        double mult = rng.uniform() < p ? 0.0 : keep_scale;
        (*mask)[i] = mult;
        v[i] *= mult;
    }
    return make_op(x.shape(), std::move(v), {x}, [mask](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

DiffArray embedding(const DiffArray& table, const std::vector<int>& idx) {
    check(table.shape().size() == 2, "embedding: table must be [V,E]");
    int vocab = table.shape()[0], e = table.shape()[1];
    int n = int(idx.size());
    std::vector<double> v(size_t(n) * e);
    const auto& tv = table.values();
    for (int r = 0; r < n; ++r) {
        check(idx[size_t(r)] >= 0 && idx[size_t(r)] < vocab,
              "embedding: index " + std::to_string(idx[size_t(r)]) + " out of range");
        std::copy_n(&tv[size_t(idx[size_t(r)]) * e], e, &v[size_t(r) * e]);
    }
    auto ids = std::make_shared<std::vector<int>>(idx);
    return make_op({n, e}, std::move(v), {table}, [ids, e](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t r = 0; r < ids->size(); ++r)
            for (int i = 0; i < e; ++i)
                g[size_t((*ids)[r]) * e + i] += self.grad[r * size_t(e) + i];
    });
}

DiffArray tile_channels(const DiffArray& e, int len) {
    check(e.shape().size() == 2, "tile_channels: need [N,E]");
    int n = e.shape()[0], ch = e.shape()[1];
    std::vector<double> v(size_t(n) * ch * len);
    const auto& ev = e.values();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < ch; ++c)
            std::fill_n(&v[(size_t(r) * ch + c) * len], len, ev[size_t(r) * ch + c]);
    return make_op({n, ch, len}, std::move(v), {e}, [n, ch, len](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < ch; ++c) {
                const double* gy = &self.grad[(size_t(r) * ch + c) * len];
                double acc = 0.0;
                for (int l = 0; l < len; ++l) acc += gy[l];
                g[size_t(r) * ch + c] += acc;
            }
    });
}

DiffArray add_channel_bias(const DiffArray& x, const DiffArray& b) {
    check(x.shape().size() == 3 && b.shape().size() == 2 && x.shape()[0] == b.shape()[0] &&
              x.shape()[1] == b.shape()[1],
          "add_channel_bias: need [N,C,L] + [N,C]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    std::vector<double> v(x.values());
    const auto& bv = b.values();
    for (int r = 0; r < n; ++r)
        for (int cc = 0; cc < c; ++cc) {
            double bb = bv[size_t(r) * c + cc];
            double* out = &v[(size_t(r) * c + cc) * len];
            for (int l = 0; l < len; ++l) out[l] += bb;
        }
    return make_op(x.shape(), std::move(v), {x, b}, [n, c, len](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        auto& gb = self.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int cc = 0; cc < c; ++cc) {
                const double* gy = &self.grad[(size_t(r) * c + cc) * len];
                double* gxp = &gx[(size_t(r) * c + cc) * len];
                double acc = 0.0;
                for (int l = 0; l < len; ++l) {
                    gxp[l] += gy[l];
                    acc += gy[l];
                }
                gb[size_t(r) * c + cc] += acc;
            }
    });
}

DiffArray film(const DiffArray& x, const DiffArray& scale, const DiffArray& shift) {
    check(x.shape().size() == 3 && scale.shape().size() == 2 && shift.shape().size() == 2 &&
              scale.shape() == shift.shape() && x.shape()[0] == scale.shape()[0] &&
              x.shape()[1] == scale.shape()[1],
          "film: need x[N,C,L], scale/shift[N,C]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    std::vector<double> v(x.values());
    const auto& sv = scale.values();
    const auto& tv = shift.values();
    for (int r = 0; r < n; ++r)
        for (int cc = 0; cc < c; ++cc) {
            double s = 1.0 + sv[size_t(r) * c + cc], t = tv[size_t(r) * c + cc];
            double* out = &v[(size_t(r) * c + cc) * len];
            for (int l = 0; l < len; ++l) out[l] = out[l] * s + t;
        }
    return make_op(x.shape(), std::move(v), {x, scale, shift}, [n, c, len](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        auto& gs = self.parents[1]->ensure_grad();
        auto& gt = self.parents[2]->ensure_grad();
        const auto& xv2 = self.parents[0]->value;
        const auto& sv2 = self.parents[1]->value;
        for (int r = 0; r < n; ++r)
            for (int cc = 0; cc < c; ++cc) {
                double s = 1.0 + sv2[size_t(r) * c + cc];
                const double* gy = &self.grad[(size_t(r) * c + cc) * len];
                const double* in = &xv2[(size_t(r) * c + cc) * len];
                double* gxp = &gx[(size_t(r) * c + cc) * len];
                double acc_s = 0.0, acc_t = 0.0;
                for (int l = 0; l < len; ++l) {
                    gxp[l] += gy[l] * s;
                    acc_s += gy[l] * in[l];
                    acc_t += gy[l];
                }
                gs[size_t(r) * c + cc] += acc_s;
                gt[size_t(r) * c + cc] += acc_t;
            }
    });
}

DiffArray softmax_cross_entropy(const DiffArray& logits, const std::vector<int>& labels) {
    check(logits.shape().size() == 2, "softmax_cross_entropy: need [N,C]");
    int n = logits.shape()[0], c = logits.shape()[1];
    check(int(labels.size()) == n, "softmax_cross_entropy: label count mismatch");
    auto probs = std::make_shared<std::vector<double>>(logits.values());
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
        check(labels[size_t(r)] >= 0 && labels[size_t(r)] < c,
              "softmax_cross_entropy: label out of range");
        double* row = &(*probs)[size_t(r) * c];
        double mx = row[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (int i = 0; i < c; ++i) z += std::exp(row[i] - mx);
        double lse = mx + std::log(z);
        loss += lse - row[labels[size_t(r)]];
        for (int i = 0; i < c; ++i) row[i] = std::exp(row[i] - lse);
    }
    loss /= double(n);
    auto ids = std::make_shared<std::vector<int>>(labels);
    return make_op({1}, {loss}, {logits}, [probs, ids, n, c](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        double d = self.grad[0] / double(n);
        for (int r = 0; r < n; ++r) {
            const double* p = &(*probs)[size_t(r) * c];
            double* gr = &g[size_t(r) * c];
            for (int i = 0; i < c; ++i) gr[i] += d * p[i];
            gr[(*ids)[size_t(r)]] -= d;
        }
    });
}

DiffArray pad_right(const DiffArray& x, int target_len, double fill) {
    check(x.shape().size() == 3, "pad_right: need [N,C,L]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    check(target_len >= len, "pad_right: target shorter than input");
    if (target_len == len) return reshape(x, x.shape());
    std::vector<double> v(size_t(n) * c * target_len, fill);
    const auto& xv = x.values();
    for (int64_t ch = 0; ch < int64_t(n) * c; ++ch)
        std::copy_n(&xv[size_t(ch) * len], len, &v[size_t(ch) * target_len]);
    return make_op({n, c, target_len}, std::move(v), {x}, [n, c, len, target_len](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < int64_t(n) * c; ++ch)
            for (int l = 0; l < len; ++l)
                g[size_t(ch) * len + l] += self.grad[size_t(ch) * target_len + l];
    });
}

DiffArray crop_right(const DiffArray& x, int target_len) {
    check(x.shape().size() == 3, "crop_right: need [N,C,L]");
    int n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    check(target_len <= len, "crop_right: target longer than input");
    if (target_len == len) return reshape(x, x.shape());
    std::vector<double> v(size_t(n) * c * target_len);
    const auto& xv = x.values();
    for (int64_t ch = 0; ch < int64_t(n) * c; ++ch)
        std::copy_n(&xv[size_t(ch) * len], target_len, &v[size_t(ch) * target_len]);
    return make_op({n, c, target_len}, std::move(v), {x}, [n, c, len, target_len](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < int64_t(n) * c; ++ch)
            for (int l = 0; l < target_len; ++l)
                g[size_t(ch) * len + l] += self.grad[size_t(ch) * target_len + l];
    });
}

DiffArray sample_gaussian(const Shape& shape, RngStream& rng) {
    std::vector<double> v(size_t(numel(shape)));
    rng.fill_normal(v);
    return DiffArray::constant(shape, std::move(v));
}

// ---------------- optimizer ----------------

void AdamState::init(const std::vector<DiffArray>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.values().size(), 0.0);
        v.emplace_back(p.values().size(), 0.0);
    }
    step = 0;
}

void adam_step(std::vector<DiffArray>& params, AdamState& state) {
    if (state.m.size() != params.size()) state.init(params);
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        auto& theta = params[p].mutable_values();
        auto& g = params[p].grad();
        auto& mm = state.m[p];
        auto& vv = state.v[p];
        for (size_t i = 0; i < theta.size(); ++i) {
            mm[i] = state.beta1 * mm[i] + (1.0 - state.beta1) * g[i];
            vv[i] = state.beta2 * vv[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = mm[i] / bc1;
            double vhat = vv[i] / bc2;
            theta[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---------------- layers ----------------

std::vector<double> init_uniform_fan(int64_t n, int64_t fan_in, int64_t fan_out, bool xavier,
                                     RngStream& rng) {
    double limit = xavier ? std::sqrt(6.0 / double(fan_in + fan_out))
                          : std::sqrt(6.0 / double(fan_in));
    std::vector<double> v(static_cast<size_t>(n), 0.0);
    for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * limit;
    return v;
}

Layer Layer::make(const LayerSpec& spec, RngStream& rng) {
    Layer layer;
    layer.spec = spec;
    switch (spec.kind) {
        case LayerKind::Dense:
            layer.weight = DiffArray::parameter(
                {spec.in, spec.out},
                init_uniform_fan(int64_t(spec.in) * spec.out, spec.in, spec.out,
                                 spec.sigmoid_init, rng));
            layer.bias = DiffArray::parameter({spec.out}, std::vector<double>(size_t(spec.out), 0.0));
            break;
        case LayerKind::Conv1d:
        case LayerKind::UpsampleConv1d:
            layer.weight = DiffArray::parameter(
                {spec.out, spec.in, spec.kernel},
                init_uniform_fan(int64_t(spec.out) * spec.in * spec.kernel,
                                 int64_t(spec.in) * spec.kernel, int64_t(spec.out) * spec.kernel,
                                 spec.sigmoid_init, rng));
            layer.bias = DiffArray::parameter({spec.out}, std::vector<double>(size_t(spec.out), 0.0));
            break;
        case LayerKind::GroupNorm:
            layer.gamma = DiffArray::parameter({spec.in}, std::vector<double>(size_t(spec.in), 1.0));
            layer.beta = DiffArray::parameter({spec.in}, std::vector<double>(size_t(spec.in), 0.0));
            break;
        case LayerKind::Embedding:
            layer.table = DiffArray::parameter(
                {spec.in, spec.out},
                init_uniform_fan(int64_t(spec.in) * spec.out, spec.out, spec.out, true, rng));
            break;
        default:
            break;  // parameter-free kinds
    }
    return layer;
}

std::vector<DiffArray> Layer::params() const {
    std::vector<DiffArray> out;
    if (weight.defined()) out.push_back(weight);
    if (bias.defined()) out.push_back(bias);
    if (gamma.defined()) out.push_back(gamma);
    if (beta.defined()) out.push_back(beta);
    if (table.defined()) out.push_back(table);
    return out;
}

DiffArray forward(Layer& layer, const DiffArray& x, bool train, RngStream* rng,
                  const std::vector<int>* indices) {
    switch (layer.spec.kind) {
        case LayerKind::Dense:
            return add_row_bias(matmul(x, layer.weight), layer.bias);
        case LayerKind::Conv1d:
            return conv1d(x, layer.weight, layer.bias);
        case LayerKind::UpsampleConv1d:
            return conv1d(upsample2(x), layer.weight, layer.bias);
        case LayerKind::MaxPool1d:
            return maxpool1d(x);
        case LayerKind::GroupNorm:
            return groupnorm(x, layer.gamma, layer.beta, layer.spec.groups);
        case LayerKind::Dropout:
            check(!train || rng != nullptr, "dropout forward needs an RNG in train mode");
            return train ? dropout(x, layer.spec.p, true, *rng) : reshape(x, x.shape());
        case LayerKind::Relu:
            return relu(x);
        case LayerKind::LeakyRelu:
            return leaky_relu(x, layer.spec.slope);
        case LayerKind::Sigmoid:
            return sigmoid(x);
        case LayerKind::Embedding:
            check(indices != nullptr, "embedding forward needs indices");
            return embedding(layer.table, *indices);
    }
    throw DataError("forward: unknown layer kind");
}

}  // namespace maldikit
