#include "taskmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "taskmoe/error.hpp"

namespace taskmoe {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

Matrix affine(const Matrix& x, const Matrix& w) {
    if (x.cols() != w.rows()) {
        throw ShapeError("affine: " + shape_str(x) + " · " + shape_str(w));
    }
    const std::size_t n = x.rows();
    const std::size_t inner = x.cols();
    const std::size_t m = w.cols();
    Matrix y(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* out = y.row(i).data();
        const double* in = x.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const double a = in[k];
            const double* wk = w.row(k).data();
            for (std::size_t j = 0; j < m; ++j) {
                out[j] += a * wk[j];
            }
        }
    }
    return y;
}

void affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix* dx, Matrix* dw) {
    if (dy.rows() != x.rows() || dy.cols() != w.cols() || x.cols() != w.rows()) {
        throw ShapeError("affine_backward: shape mismatch");
    }
    const std::size_t n = x.rows();
    const std::size_t inner = x.cols();
    const std::size_t m = w.cols();
    if (dx != nullptr) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* g = dy.row(i).data();
            double* out = dx->row(i).data();
            for (std::size_t k = 0; k < inner; ++k) {
                const double* wk = w.row(k).data();
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    acc += g[j] * wk[j];
                }
                out[k] += acc;
            }
        }
    }
    if (dw != nullptr) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* g = dy.row(i).data();
            const double* in = x.row(i).data();
            for (std::size_t k = 0; k < inner; ++k) {
                const double a = in[k];
                double* out = dw->row(k).data();
                for (std::size_t j = 0; j < m; ++j) {
                    out[j] += a * g[j];
                }
            }
        }
    }
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a) + " · (" + shape_str(b) + ")ᵀ");
    }
    Matrix y(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += ai[k] * bj[k];
            }
            y(i, j) = acc;
        }
    }
    return y;
}

Matrix relu(const Matrix& x) {
    Matrix y = x;
    for (double& v : y.data()) {
        v = v > 0.0 ? v : 0.0;
    }
    return y;
}

Matrix relu_backward(const Matrix& x, const Matrix& dy) {
    if (!x.same_shape(dy)) {
        throw ShapeError("relu_backward: shape mismatch");
    }
    Matrix dx(x.rows(), x.cols());
    auto xs = x.data();
    auto gs = dy.data();
    auto out = dx.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = xs[i] > 0.0 ? gs[i] : 0.0;
    }
    return dx;
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw ShapeError("softmax of empty vector");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto p = softmax(logits.row(r));
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
    if (probs.size() != dprobs.size()) {
        throw ShapeError("softmax_backward: length mismatch");
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        dot += probs[i] * dprobs[i];
    }
    std::vector<double> dz(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        dz[i] = probs[i] * (dprobs[i] - dot);
    }
    return dz;
}

double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets, Matrix* dlogits) {
    if (targets.size() != logits.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
    }
    if (logits.rows() == 0) {
        throw ShapeError("cross_entropy: no positions");
    }
    const auto rows = static_cast<double>(logits.rows());
    if (dlogits != nullptr) {
        *dlogits = Matrix(logits.rows(), logits.cols());
    }
    double total = 0.0;
    for (std::size_t s = 0; s < logits.rows(); ++s) {
        const std::size_t t = targets[s];
        if (t >= logits.cols()) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " >= vocabulary " +
                             std::to_string(logits.cols()));
        }
        auto row = logits.row(s);
        const double peak = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - peak);
        }
        const double log_z = std::log(z) + peak;
        total += log_z - row[t];
        if (dlogits != nullptr) {
            auto g = dlogits->row(s);
            for (std::size_t v = 0; v < row.size(); ++v) {
                g[v] = std::exp(row[v] - log_z) / rows;
            }
            g[t] -= 1.0 / rows;
        }
    }
    return total / rows;
}

Matrix rms_norm(const Matrix& x, double eps) {
    Matrix y(x.rows(), x.cols());
    const auto width = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        double ms = 0.0;
        for (double v : in) {
            ms += v * v;
        }
        const double inv = 1.0 / std::sqrt(ms / width + eps);
        auto out = y.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            out[c] = in[c] * inv;
        }
    }
    return y;
}

void rms_norm_backward(const Matrix& x, const Matrix& y, const Matrix& dy, Matrix& dx, double eps) {
    if (!x.same_shape(dy) || !x.same_shape(dx) || !x.same_shape(y)) {
        throw ShapeError("rms_norm_backward: shape mismatch");
    }
    const auto width = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        auto g = dy.row(r);
        double ms = 0.0;
        double dot = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            ms += in[c] * in[c];
            dot += g[c] * out[c];
        }
        const double inv = 1.0 / std::sqrt(ms / width + eps);
        dot /= width;
        auto d = dx.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            d[c] += (g[c] - out[c] * dot) * inv;
        }
    }
}

} // namespace taskmoe
