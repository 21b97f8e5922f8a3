#include "meat/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "meat/error.hpp"

namespace meat {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

void add_into(std::vector<double>* dst, const std::vector<double>& src, double factor = 1.0) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += factor * src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / reduction
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g);
                       add_into(gin[1], g);
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g);
                       add_into(gin[1], g, -1.0);
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b},
                   [an, bn](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                               (*gin[0])[i] += g[i] * bn->data[i];
                       }
                       if (gin[1]) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                               (*gin[1])[i] += g[i] * an->data[i];
                       }
                   });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
    return make_op(a.shape(), std::move(out), {a},
                   [c](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g, c);
                   });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ContractError("scale_by: scale must be a scalar tensor");
    const double c = s.item();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a, s},
                   [an, c](const std::vector<double>& g,
                           const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g, c);
                       if (gin[1]) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * an->data[i];
                           (*gin[1])[0] += acc;
                       }
                   });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_op({1}, {acc}, {a},
                   [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (double& v : *gin[0]) v += g[0];
                       }
                   });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ContractError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_op({1}, {acc * inv}, {a},
                   [inv](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (double& v : *gin[0]) v += g[0] * inv;
                       }
                   });
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != a.numel()) throw ShapeError("reshape: element count mismatch");
    return make_op(std::move(shape), a.data(), {a},
                   [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g);
                   });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    std::vector<double> out(m * p, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = ad[i * k + kk];
            const double* brow = bd + kk * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op({m, p}, std::move(out), {a, b},
                   [an, bn, m, k, p](const std::vector<double>& g,
                                     const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {  // dA = g . B^T
                           double* ga = gin[0]->data();
                           const double* bd = bn->data.data();
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   const double* brow = bd + kk * p;
                                   const double* grow = g.data() + i * p;
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                                   ga[i * k + kk] += acc;
                               }
                           }
                       }
                       if (gin[1]) {  // dB = A^T . g
                           double* gb = gin[1]->data();
                           const double* ad = an->data.data();
                           for (std::size_t kk = 0; kk < k; ++kk) {
                               double* gbrow = gb + kk * p;
                               for (std::size_t i = 0; i < m; ++i) {
                                   const double aik = ad[i * k + kk];
                                   const double* grow = g.data() + i * p;
                                   for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
                               }
                           }
                       }
                   });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.numel() != x.cols()) {
        throw ShapeError("add_rowvec: vector length must equal column count");
    }
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.data());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v.data()[j];
    }
    return make_op(x.shape(), std::move(out), {x, v},
                   [m, n](const std::vector<double>& g,
                          const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g);
                       if (gin[1]) {
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) (*gin[1])[j] += g[i * n + j];
                           }
                       }
                   });
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.ndim() != 2 || c0 >= c1 || c1 > x.cols()) throw ShapeError("slice_cols: bad range");
    const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.data()[i * n + c0 + j];
    }
    return make_op({m, w}, std::move(out), {x},
                   [m, n, w, c0](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < w; ++j)
                                   (*gin[0])[i * n + c0 + j] += g[i * w + j];
                           }
                       }
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
        }
        off += w;
    }
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) widths.push_back(p.cols());
    return make_op({m, total}, std::move(out), parts,
                   [m, total, widths, offsets](const std::vector<double>& g,
                                               const std::vector<std::vector<double>*>& gin) {
                       for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                           if (!gin[pi]) continue;
                           const std::size_t w = widths[pi], off = offsets[pi];
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < w; ++j)
                                   (*gin[pi])[i * w + j] += g[i * total + off + j];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Activations / normalization / losses
// ---------------------------------------------------------------------------

Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a},
                   [an](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           const double x = an->data[i];
                           const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                           const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                           (*gin[0])[i] += g[i] * (cdf + x * pdf);
                       }
                   });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    if (a.ndim() < 1) throw ShapeError("layer_norm: rank >= 1 required");
    const std::size_t d = a.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias length must match last axis");
    }
    constexpr double eps = 1e-6;
    const std::size_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    std::vector<double> xhat(a.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (x[j] - mu) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    auto gn = gain.node();
    return make_op(a.shape(), std::move(out), {a, gain, bias},
                   [gn, xhat, inv_std, rows, d](const std::vector<double>& g,
                                                const std::vector<std::vector<double>*>& gin) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* go = g.data() + r * d;
                           const double* h = xhat.data() + r * d;
                           if (gin[0]) {
                               // dx = inv/d * (d*dh - sum(dh) - h * sum(dh*h))
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dh = go[j] * gn->data[j];
                                   s1 += dh;
                                   s2 += dh * h[j];
                               }
                               const double inv = inv_std[r];
                               const double dn = static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dh = go[j] * gn->data[j];
                                   (*gin[0])[r * d + j] += inv / dn * (dn * dh - s1 - h[j] * s2);
                               }
                           }
                           if (gin[1]) {
                               for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += go[j] * h[j];
                           }
                           if (gin[2]) {
                               for (std::size_t j = 0; j < d; ++j) (*gin[2])[j] += go[j];
                           }
                       }
                   });
}

namespace {

// Shared row kernel for softmax_rows and masked_softmax_rows: with an all-ones
// weight vector the two entry points execute identical arithmetic.
Tensor weighted_softmax(const Tensor& a, const Tensor& weights) {
    const std::size_t k = a.shape().back();
    if (weights.numel() != k) {
        throw ShapeError("masked softmax: weight length must equal last axis");
    }
    const std::vector<double>& w = weights.data();
    bool any_active = false;
    for (double wj : w) {
        if (wj < 0.0 || wj > 1.0) throw NumericError("masked softmax: weight outside [0,1]");
        if (wj > 0.0) any_active = true;
    }
    if (!any_active) throw NumericError("masked softmax: degenerate mask, all weights zero");

    const std::size_t rows = a.numel() / k;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * k;
        double c = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            if (w[j] > 0.0 && x[j] > c) c = x[j];
        }
        double z = 0.0;
        double* o = out.data() + r * k;
        for (std::size_t j = 0; j < k; ++j) {
            if (w[j] > 0.0) {
                o[j] = w[j] * std::exp(x[j] - c);
                z += o[j];
            } else {
                o[j] = 0.0;
            }
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (w[j] > 0.0) o[j] /= z;
        }
    }

    auto an = a.node();
    auto wn = weights.node();
    Tensor result = make_op(
        a.shape(), std::move(out), {a, weights},
        [an, wn, rows, k](const std::vector<double>& g,
                          const std::vector<std::vector<double>*>& gin) {
            std::vector<double> e(k);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* x = an->data.data() + r * k;
                const double* go = g.data() + r * k;
                const std::vector<double>& w = wn->data;
                double c = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < k; ++j) {
                    if (w[j] > 0.0 && x[j] > c) c = x[j];
                }
                double z = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    e[j] = std::exp(x[j] - c);
                    if (w[j] > 0.0) z += w[j] * e[j];
                }
                double s = 0.0;  // sum_j g_j * y_j
                for (std::size_t j = 0; j < k; ++j) {
                    if (w[j] > 0.0) s += go[j] * (w[j] * e[j] / z);
                }
                if (gin[0]) {
                    for (std::size_t j = 0; j < k; ++j) {
                        if (w[j] <= 0.0) continue;
                        const double yj = w[j] * e[j] / z;
                        (*gin[0])[r * k + j] += yj * (go[j] - s);
                    }
                }
                if (gin[1]) {
                    for (std::size_t j = 0; j < k; ++j) {
                        (*gin[1])[j] += (e[j] / z) * (go[j] - s);
                    }
                }
            }
        });
    return result;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
    if (a.ndim() < 1 || a.shape().back() < 1) throw ShapeError("softmax: empty last axis");
    for (double v : a.data()) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    return weighted_softmax(a, Tensor::ones({a.shape().back()}));
}

Tensor masked_softmax_rows(const Tensor& a, const Tensor& weights) {
    if (a.ndim() < 1 || a.shape().back() < 1) throw ShapeError("masked softmax: empty last axis");
    return weighted_softmax(a, weights);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [batch, classes]");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (labels.size() != b) throw ShapeError("cross_entropy: one label per row required");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                                    " outside [0," + std::to_string(c) + ")");
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = logits.data().data() + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
        total += m + std::log(z) - row[static_cast<std::size_t>(labels[i])];
    }
    const double loss = total / static_cast<double>(b);
    auto ln = logits.node();
    return make_op({1}, {loss}, {logits},
                   [ln, labels, b, c](const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& gin) {
                       if (!gin[0]) return;
                       const double scale = g[0] / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i) {
                           const double* row = ln->data.data() + i * c;
                           double m = row[0];
                           for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                           double z = 0.0;
                           for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
                           for (std::size_t j = 0; j < c; ++j) {
                               double p = std::exp(row[j] - m) / z;
                               if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
                               (*gin[0])[i * c + j] += scale * p;
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Sequence-batch helpers
// ---------------------------------------------------------------------------

namespace {

std::size_t block_len(const Tensor& x, std::size_t batch, const char* op) {
    if (x.ndim() != 2 || batch == 0 || x.rows() % batch != 0) {
        throw ShapeError(std::string(op) + ": rows not divisible by batch");
    }
    return x.rows() / batch;
}

}  // namespace

Tensor attn_scores(const Tensor& q, const Tensor& k, std::size_t batch, double scale) {
    require_same_shape(q, k, "attn_scores");
    const std::size_t s = block_len(q, batch, "attn_scores");
    const std::size_t dk = q.cols();
    std::vector<double> out(batch * s * s);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* qb = q.data().data() + b * s * dk;
        const double* kb = k.data().data() + b * s * dk;
        for (std::size_t i = 0; i < s; ++i) {
            double* orow = out.data() + (b * s + i) * s;
            for (std::size_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < dk; ++t) acc += qb[i * dk + t] * kb[j * dk + t];
                orow[j] = scale * acc;
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    return make_op({batch * s, s}, std::move(out), {q, k},
                   [qn, kn, batch, s, dk, scale](const std::vector<double>& g,
                                                 const std::vector<std::vector<double>*>& gin) {
                       for (std::size_t b = 0; b < batch; ++b) {
                           const double* qb = qn->data.data() + b * s * dk;
                           const double* kb = kn->data.data() + b * s * dk;
                           const double* gb = g.data() + b * s * s;
                           if (gin[0]) {
                               double* gq = gin[0]->data() + b * s * dk;
                               for (std::size_t i = 0; i < s; ++i) {
                                   for (std::size_t j = 0; j < s; ++j) {
                                       const double gij = scale * gb[i * s + j];
                                       for (std::size_t t = 0; t < dk; ++t)
                                           gq[i * dk + t] += gij * kb[j * dk + t];
                                   }
                               }
                           }
                           if (gin[1]) {
                               double* gk = gin[1]->data() + b * s * dk;
                               for (std::size_t i = 0; i < s; ++i) {
                                   for (std::size_t j = 0; j < s; ++j) {
                                       const double gij = scale * gb[i * s + j];
                                       for (std::size_t t = 0; t < dk; ++t)
                                           gk[j * dk + t] += gij * qb[i * dk + t];
                                   }
                               }
                           }
                       }
                   });
}

Tensor attn_apply(const Tensor& p, const Tensor& v, std::size_t batch) {
    const std::size_t s = block_len(p, batch, "attn_apply");
    if (p.cols() != s || v.rows() != batch * s) {
        throw ShapeError("attn_apply: probability matrix must be [batch*S, S]");
    }
    const std::size_t dk = v.cols();
    std::vector<double> out(batch * s * dk, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* pb = p.data().data() + b * s * s;
        const double* vb = v.data().data() + b * s * dk;
        for (std::size_t i = 0; i < s; ++i) {
            double* orow = out.data() + (b * s + i) * dk;
            for (std::size_t j = 0; j < s; ++j) {
                const double pij = pb[i * s + j];
                for (std::size_t t = 0; t < dk; ++t) orow[t] += pij * vb[j * dk + t];
            }
        }
    }
    auto pn = p.node();
    auto vn = v.node();
    return make_op({batch * s, dk}, std::move(out), {p, v},
                   [pn, vn, batch, s, dk](const std::vector<double>& g,
                                          const std::vector<std::vector<double>*>& gin) {
                       for (std::size_t b = 0; b < batch; ++b) {
                           const double* pb = pn->data.data() + b * s * s;
                           const double* vb = vn->data.data() + b * s * dk;
                           const double* gb = g.data() + b * s * dk;
                           if (gin[0]) {
                               double* gp = gin[0]->data() + b * s * s;
                               for (std::size_t i = 0; i < s; ++i) {
                                   for (std::size_t j = 0; j < s; ++j) {
                                       double acc = 0.0;
                                       for (std::size_t t = 0; t < dk; ++t)
                                           acc += gb[i * dk + t] * vb[j * dk + t];
                                       gp[i * s + j] += acc;
                                   }
                               }
                           }
                           if (gin[1]) {
                               double* gv = gin[1]->data() + b * s * dk;
                               for (std::size_t i = 0; i < s; ++i) {
                                   for (std::size_t j = 0; j < s; ++j) {
                                       const double pij = pb[i * s + j];
                                       for (std::size_t t = 0; t < dk; ++t)
                                           gv[j * dk + t] += pij * gb[i * dk + t];
                                   }
                               }
                           }
                       }
                   });
}

Tensor prepend_one(const Tensor& v) {
    if (v.ndim() != 1) throw ShapeError("prepend_one: vector required");
    const std::size_t n = v.numel();
    std::vector<double> out(n + 1);
    out[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) out[i + 1] = v.data()[i];
    return make_op({n + 1}, std::move(out), {v},
                   [n](const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i + 1];
                       }
                   });
}

Tensor prepend_row_per_block(const Tensor& x, const Tensor& row, std::size_t batch) {
    const std::size_t n = block_len(x, batch, "prepend_row_per_block");
    const std::size_t d = x.cols();
    if (row.numel() != d) throw ShapeError("prepend_row_per_block: row length mismatch");
    const std::size_t s = n + 1;
    std::vector<double> out(batch * s * d);
    for (std::size_t b = 0; b < batch; ++b) {
        double* ob = out.data() + b * s * d;
        for (std::size_t j = 0; j < d; ++j) ob[j] = row.data()[j];
        const double* xb = x.data().data() + b * n * d;
        for (std::size_t i = 0; i < n * d; ++i) ob[d + i] = xb[i];
    }
    return make_op({batch * s, d}, std::move(out), {x, row},
                   [batch, n, d, s](const std::vector<double>& g,
                                    const std::vector<std::vector<double>*>& gin) {
                       for (std::size_t b = 0; b < batch; ++b) {
                           const double* gb = g.data() + b * s * d;
                           if (gin[1]) {
                               for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += gb[j];
                           }
                           if (gin[0]) {
                               double* gx = gin[0]->data() + b * n * d;
                               for (std::size_t i = 0; i < n * d; ++i) gx[i] += gb[d + i];
                           }
                       }
                   });
}

Tensor add_per_block(const Tensor& x, const Tensor& p, std::size_t batch) {
    const std::size_t s = block_len(x, batch, "add_per_block");
    const std::size_t d = x.cols();
    if (p.ndim() != 2 || p.rows() != s || p.cols() != d) {
        throw ShapeError("add_per_block: block shape mismatch");
    }
    std::vector<double> out(x.data());
    for (std::size_t b = 0; b < batch; ++b) {
        double* ob = out.data() + b * s * d;
        for (std::size_t i = 0; i < s * d; ++i) ob[i] += p.data()[i];
    }
    return make_op(x.shape(), std::move(out), {x, p},
                   [batch, s, d](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& gin) {
                       add_into(gin[0], g);
                       if (gin[1]) {
                           for (std::size_t b = 0; b < batch; ++b) {
                               const double* gb = g.data() + b * s * d;
                               for (std::size_t i = 0; i < s * d; ++i) (*gin[1])[i] += gb[i];
                           }
                       }
                   });
}

Tensor take_block_row0(const Tensor& x, std::size_t batch) {
    const std::size_t s = block_len(x, batch, "take_block_row0");
    const std::size_t d = x.cols();
    std::vector<double> out(batch * d);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] = x.data()[b * s * d + j];
    }
    return make_op({batch, d}, std::move(out), {x},
                   [batch, s, d](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                           for (std::size_t b = 0; b < batch; ++b) {
                               for (std::size_t j = 0; j < d; ++j)
                                   (*gin[0])[b * s * d + j] += g[b * d + j];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Mask relaxation
// ---------------------------------------------------------------------------

Tensor gumbel_relax(const Tensor& logits, const std::vector<double>& noise, double tau) {
    if (tau <= 0.0) throw ConfigError("gumbel_relax: temperature must be positive");
    if (logits.ndim() != 2 || logits.cols() != 2) {
        throw ShapeError("gumbel_relax: logits must be [m, 2]");
    }
    const std::size_t m = logits.rows();
    if (noise.size() != 2 * m) throw ShapeError("gumbel_relax: need 2 noise draws per row");

    const double lo = std::nextafter(0.0, 1.0);
    const double hi = std::nextafter(1.0, 0.0);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double z = ((logits.data()[2 * i] + noise[2 * i]) -
                          (logits.data()[2 * i + 1] + noise[2 * i + 1])) /
                         tau;
        double v;
        if (z >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-z));
        } else {
            const double e = std::exp(z);
            v = e / (1.0 + e);
        }
        out[i] = std::min(std::max(v, lo), hi);
    }
    std::vector<double> vals = out;
    return make_op({m}, std::move(out), {logits},
                   [vals, tau, m](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < m; ++i) {
                           const double dv = g[i] * vals[i] * (1.0 - vals[i]) / tau;
                           (*gin[0])[2 * i] += dv;
                           (*gin[0])[2 * i + 1] -= dv;
                       }
                   });
}

}  // namespace meat
