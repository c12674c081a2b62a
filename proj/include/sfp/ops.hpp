#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sfp/autograd.hpp"
#include "sfp/rulebook.hpp"
#include "sfp/threads.hpp"

namespace sfp {

namespace detail {

inline void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const unsigned workers = worker_count();
    if (workers <= 1 || n < 4096) {
        fn(0, n);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::size_t> starts;
    for (std::size_t b = 0; b < n; b += chunk) starts.push_back(b);
    parallel_for(starts.size(),
                 [&](std::size_t w) { fn(starts[w], std::min(n, starts[w] + chunk)); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / dense ops

template <class T>
int op_add(Tape<T>& tape, int a, int b) {
    const Matrix<T>& va = tape.value(a);
    const Matrix<T>& vb = tape.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("op_add: shape mismatch");
    Matrix<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    return tape.record(std::move(out), [a, b](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        for (std::size_t i = 0; i < g.size(); ++i) {
            t.grad(a).data[i] += g.data[i];
            t.grad(b).data[i] += g.data[i];
        }
    });
}

template <class T>
int op_mul(Tape<T>& tape, int a, int b) {
    const Matrix<T>& va = tape.value(a);
    const Matrix<T>& vb = tape.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("op_mul: shape mismatch");
    Matrix<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
    return tape.record(std::move(out), [a, b](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& va = t.value(a);
        const Matrix<T>& vb = t.value(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            t.grad(a).data[i] += g.data[i] * vb.data[i];
            t.grad(b).data[i] += g.data[i] * va.data[i];
        }
    });
}

template <class T>
int op_scale(Tape<T>& tape, int x, T c) {
    Matrix<T> out = tape.value(x);
    for (T& v : out.data) v *= c;
    return tape.record(std::move(out), [x, c](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        for (std::size_t i = 0; i < g.size(); ++i) t.grad(x).data[i] += c * g.data[i];
    });
}

template <class T>
int op_sum(Tape<T>& tape, int x) {
    T s = T(0);
    for (T v : tape.value(x).data) s += v;
    return tape.record(Matrix<T>::scalar(s), [x](Tape<T>& t, int o) {
        const T g = t.grad(o)(0, 0);
        for (T& v : t.grad(x).data) v += g;
    });
}

// y = x W + b; b is a 1 x C_out row or -1 for no bias.
template <class T>
int op_linear(Tape<T>& tape, int x, int w, int b = -1) {
    const Matrix<T>& vx = tape.value(x);
    const Matrix<T>& vw = tape.value(w);
    if (vx.cols != vw.rows) throw std::invalid_argument("op_linear: shape mismatch");
    Matrix<T> out(vx.rows, vw.cols);
    gemm_acc(vx.data.data(), vw.data.data(), out.data.data(), vx.rows, vx.cols, vw.cols);
    if (b >= 0) {
        const Matrix<T>& vb = tape.value(b);
        if (vb.rows != 1 || vb.cols != vw.cols)
            throw std::invalid_argument("op_linear: bias shape mismatch");
        for (std::size_t i = 0; i < out.rows; ++i)
            for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += vb(0, j);
    }
    return tape.record(std::move(out), [x, w, b](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& vx = t.value(x);
        const Matrix<T>& vw = t.value(w);
        Matrix<T>& gx = t.grad(x);
        Matrix<T>& gw = t.grad(w);
        // gx += g W^T
        for (std::size_t i = 0; i < vx.rows; ++i)
            for (std::size_t j = 0; j < vw.cols; ++j) {
                const T gij = g(i, j);
                if (gij == T(0)) continue;
                for (std::size_t p = 0; p < vw.rows; ++p) gx(i, p) += gij * vw(p, j);
            }
        // gw += x^T g
        for (std::size_t i = 0; i < vx.rows; ++i)
            for (std::size_t p = 0; p < vx.cols; ++p) {
                const T xip = vx(i, p);
                if (xip == T(0)) continue;
                for (std::size_t j = 0; j < vw.cols; ++j) gw(p, j) += xip * g(i, j);
            }
        if (b >= 0) {
            Matrix<T>& gb = t.grad(b);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gb(0, j) += g(i, j);
        }
    });
}

// Exact GeLU: x * Phi(x) with the Gaussian CDF via erf.
template <class T>
int op_gelu(Tape<T>& tape, int x) {
    const Matrix<T>& vx = tape.value(x);
    Matrix<T> out(vx.rows, vx.cols);
    for (std::size_t i = 0; i < vx.size(); ++i) {
        const double v = static_cast<double>(vx.data[i]);
        out.data[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2)));
    }
    return tape.record(std::move(out), [x](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& vx = t.value(x);
        Matrix<T>& gx = t.grad(x);
        constexpr double kInvSqrt2Pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(vx.data[i]);
            const double phi = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx.data[i] += g.data[i] * static_cast<T>(phi + v * pdf);
        }
    });
}

// Per-row normalization over channels with population variance.
template <class T>
int op_layer_norm(Tape<T>& tape, int x, int gain, int shift, double eps = 1e-5) {
    const Matrix<T>& vx = tape.value(x);
    const Matrix<T>& vg = tape.value(gain);
    const Matrix<T>& vs = tape.value(shift);
    if (vg.cols != vx.cols || vs.cols != vx.cols || vg.rows != 1 || vs.rows != 1)
        throw std::invalid_argument("op_layer_norm: affine shape mismatch");
    const std::size_t c = vx.cols;
    Matrix<T> out(vx.rows, c);
    for (std::size_t i = 0; i < vx.rows; ++i) {
        double mean = 0;
        for (std::size_t j = 0; j < c; ++j) mean += static_cast<double>(vx(i, j));
        mean /= static_cast<double>(c);
        double var = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(vx(i, j)) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j)
            out(i, j) = static_cast<T>((static_cast<double>(vx(i, j)) - mean) * inv) * vg(0, j) +
                        vs(0, j);
    }
    return tape.record(std::move(out), [x, gain, shift, eps](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& vx = t.value(x);
        const Matrix<T>& vg = t.value(gain);
        const std::size_t c = vx.cols;
        Matrix<T>& gx = t.grad(x);
        Matrix<T>& gg = t.grad(gain);
        Matrix<T>& gs = t.grad(shift);
        for (std::size_t i = 0; i < vx.rows; ++i) {
            double mean = 0;
            for (std::size_t j = 0; j < c; ++j) mean += static_cast<double>(vx(i, j));
            mean /= static_cast<double>(c);
            double var = 0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = static_cast<double>(vx(i, j)) - mean;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_a = 0, mean_ax = 0;
            std::vector<double> xh(c), a(c);
            for (std::size_t j = 0; j < c; ++j) {
                xh[j] = (static_cast<double>(vx(i, j)) - mean) * inv;
                a[j] = static_cast<double>(vg(0, j)) * static_cast<double>(g(i, j));
                mean_a += a[j];
                mean_ax += a[j] * xh[j];
                gg(0, j) += static_cast<T>(static_cast<double>(g(i, j)) * xh[j]);
                gs(0, j) += g(i, j);
            }
            mean_a /= static_cast<double>(c);
            mean_ax /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
                gx(i, j) += static_cast<T>((a[j] - mean_a - xh[j] * mean_ax) * inv);
        }
    });
}

// out = x scaled per row by column `col` of gates (N x M).
template <class T>
int op_row_scale(Tape<T>& tape, int x, int gates, std::size_t col) {
    const Matrix<T>& vx = tape.value(x);
    const Matrix<T>& vg = tape.value(gates);
    if (vg.rows != vx.rows || col >= vg.cols)
        throw std::invalid_argument("op_row_scale: gate shape mismatch");
    Matrix<T> out(vx.rows, vx.cols);
    for (std::size_t i = 0; i < vx.rows; ++i) {
        const T s = vg(i, col);
        for (std::size_t j = 0; j < vx.cols; ++j) out(i, j) = vx(i, j) * s;
    }
    return tape.record(std::move(out), [x, gates, col](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& vx = t.value(x);
        const Matrix<T>& vg = t.value(gates);
        Matrix<T>& gx = t.grad(x);
        Matrix<T>& gg = t.grad(gates);
        for (std::size_t i = 0; i < vx.rows; ++i) {
            const T s = vg(i, col);
            T dot = T(0);
            for (std::size_t j = 0; j < vx.cols; ++j) {
                gx(i, j) += g(i, j) * s;
                dot += g(i, j) * vx(i, j);
            }
            gg(i, col) += dot;
        }
    });
}

template <class T>
int op_concat_cols(Tape<T>& tape, int a, int b) {
    const Matrix<T>& va = tape.value(a);
    const Matrix<T>& vb = tape.value(b);
    if (va.rows != vb.rows) throw std::invalid_argument("op_concat_cols: row mismatch");
    Matrix<T> out(va.rows, va.cols + vb.cols);
    for (std::size_t i = 0; i < va.rows; ++i) {
        std::copy(va.row(i), va.row(i) + va.cols, out.row(i));
        std::copy(vb.row(i), vb.row(i) + vb.cols, out.row(i) + va.cols);
    }
    return tape.record(std::move(out), [a, b](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        Matrix<T>& ga = t.grad(a);
        Matrix<T>& gb = t.grad(b);
        for (std::size_t i = 0; i < ga.rows; ++i) {
            for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g(i, j);
            for (std::size_t j = 0; j < gb.cols; ++j) gb(i, j) += g(i, ga.cols + j);
        }
    });
}

// Row gather (devoxelize / upsample scatter transpose). Backward scatter-adds.
template <class T>
int op_gather_rows(Tape<T>& tape, int x, std::vector<std::int32_t> rows) {
    const Matrix<T>& vx = tape.value(x);
    Matrix<T> out(rows.size(), vx.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vx.rows)
            throw std::invalid_argument("op_gather_rows: index out of bounds");
        std::copy(vx.row(rows[i]), vx.row(rows[i]) + vx.cols, out.row(i));
    }
    return tape.record(std::move(out), [x, rows = std::move(rows)](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        Matrix<T>& gx = t.grad(x);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < g.cols; ++j) gx(rows[i], j) += g(i, j);
    });
}

// Per-batch channel mean, broadcast back to every row of the batch so the
// result stays row-aligned with the input.
template <class T>
int op_global_avg_pool(Tape<T>& tape, int x, const std::vector<VoxelCoord>& coords) {
    const Matrix<T>& vx = tape.value(x);
    if (vx.rows == 0 || coords.size() != vx.rows)
        throw std::invalid_argument("op_global_avg_pool: empty or misaligned input");
    // coords are sorted by batch first, so batches form contiguous row spans
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= coords.size(); ++i) {
        if (i == coords.size() || coords[i].batch != coords[begin].batch) {
            spans.emplace_back(begin, i);
            begin = i;
        }
    }
    Matrix<T> out(vx.rows, vx.cols);
    for (const auto& [lo, hi] : spans) {
        std::vector<double> mean(vx.cols, 0.0);
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < vx.cols; ++j) mean[j] += static_cast<double>(vx(i, j));
        for (std::size_t j = 0; j < vx.cols; ++j) mean[j] /= static_cast<double>(hi - lo);
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < vx.cols; ++j) out(i, j) = static_cast<T>(mean[j]);
    }
    return tape.record(std::move(out), [x, spans = std::move(spans)](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        Matrix<T>& gx = t.grad(x);
        for (const auto& [lo, hi] : spans) {
            const double inv = 1.0 / static_cast<double>(hi - lo);
            for (std::size_t j = 0; j < g.cols; ++j) {
                double s = 0;
                for (std::size_t i = lo; i < hi; ++i) s += static_cast<double>(g(i, j));
                const T add = static_cast<T>(s * inv);
                for (std::size_t i = lo; i < hi; ++i) gx(i, j) += add;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Sparse convolution (gather-scatter over a rulebook)
//
// Weights: (k_offsets * C_in) x C_out matrix; the C_in x C_out slice for
// offset d starts at row d * C_in. Within one offset every output row appears
// at most once, so pair chunks may run in parallel without races; offsets are
// processed sequentially in (dz, dy, dx) order for a fixed reduction order.

// gw(ci, co) += x[ci] * g[co]
template <class T>
inline void gemm_acc_outer(const T* x, const T* g, T* gw, std::size_t cin, std::size_t cout) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
        const T xv = x[ci];
        if (xv == T(0)) continue;
        T* row = gw + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) row[co] += xv * g[co];
    }
}

template <class T>
int op_sparse_conv(Tape<T>& tape, int x, int w, int b, const Rulebook* rb, std::size_t n_out) {
    const Matrix<T>& vx = tape.value(x);
    const Matrix<T>& vw = tape.value(w);
    const std::size_t cin = vx.cols;
    const std::size_t n_off = rb->offset_count();
    if (vw.rows != n_off * cin)
        throw std::invalid_argument("op_sparse_conv: rulebook/kernel mismatch");
    const std::size_t cout = vw.cols;

    Matrix<T> out(n_out, cout);
    if (b >= 0) {
        const Matrix<T>& vb = tape.value(b);
        if (vb.rows != 1 || vb.cols != cout)
            throw std::invalid_argument("op_sparse_conv: bias shape mismatch");
        for (std::size_t i = 0; i < n_out; ++i)
            for (std::size_t j = 0; j < cout; ++j) out(i, j) = vb(0, j);
    }
    for (std::size_t d = 0; d < n_off; ++d) {
        const auto& list = rb->pairs[d];
        const T* wd = vw.row(d * cin);
        detail::parallel_chunks(list.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p) {
                const auto [in_row, out_row] = list[p];
                if (static_cast<std::size_t>(in_row) >= vx.rows ||
                    static_cast<std::size_t>(out_row) >= n_out)
                    throw std::invalid_argument("op_sparse_conv: pair index out of range");
                gemm_acc(vx.row(in_row), wd, out.row(out_row), 1, cin, cout);
            }
        });
    }

    return tape.record(std::move(out), [x, w, b, rb](Tape<T>& t, int o) {
        const Matrix<T>& g = t.grad(o);
        const Matrix<T>& vx = t.value(x);
        const Matrix<T>& vw = t.value(w);
        const std::size_t cin = vx.cols;
        const std::size_t cout = vw.cols;
        Matrix<T>& gx = t.grad(x);
        Matrix<T>& gw = t.grad(w);
        // grad_x: within an offset each input row appears once -> race-free
        for (std::size_t d = 0; d < rb->offset_count(); ++d) {
            const auto& list = rb->pairs[d];
            const T* wd = vw.row(d * cin);
            detail::parallel_chunks(list.size(), [&](std::size_t lo, std::size_t hi) {
                for (std::size_t p = lo; p < hi; ++p) {
                    const auto [in_row, out_row] = list[p];
                    const T* go = g.row(out_row);
                    T* gi = gx.row(in_row);
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        T acc = T(0);
                        const T* wrow = wd + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wrow[co];
                        gi[ci] += acc;
                    }
                }
            });
        }
        // grad_w: each offset owns its own weight slice
        parallel_for(rb->offset_count(), [&](std::size_t d) {
            const auto& list = rb->pairs[d];
            T* gwd = gw.row(d * cin);
            for (const auto& [in_row, out_row] : list)
                gemm_acc_outer(vx.row(in_row), g.row(out_row), gwd, cin, cout);
        });
        if (b >= 0) {
            Matrix<T>& gb = t.grad(b);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < cout; ++j) gb(0, j) += g(i, j);
        }
    });
}

// Submanifold convolution: the rulebook must come from the tensor's own
// coords, so outputs stay aligned with inputs.
template <class T>
int op_submconv(Tape<T>& tape, int x, int w, int b, const Rulebook* rb) {
    if (rb->stride != 1) throw std::invalid_argument("op_submconv: rulebook is not submanifold");
    if (rb->out_coords.size() != tape.value(x).rows)
        throw std::invalid_argument("op_submconv: rulebook/tensor mismatch");
    return op_sparse_conv(tape, x, w, b, rb, rb->out_coords.size());
}

// Stride-2 downsample: kernel covers the 2x2x2 children of each parent site.
template <class T>
int op_strided_downsample(Tape<T>& tape, int x, int w, int b, const Rulebook* rb) {
    if (rb->stride < 2) throw std::invalid_argument("op_strided_downsample: not a strided rulebook");
    return op_sparse_conv(tape, x, w, b, rb, rb->out_coords.size());
}

// Decoder inverse of a cached strided downsample: every fine voxel takes its
// parent's feature row, then a bias-free linear mix. Output coords equal the
// pre-downsample coords exactly.
template <class T>
int op_upsample_inverse(Tape<T>& tape, int x_coarse, int w_mix, const Rulebook* cached,
                        std::size_t n_fine) {
    if (cached == nullptr || cached->stride < 2)
        throw std::invalid_argument("op_upsample_inverse: missing cached strided rulebook");
    std::vector<std::int32_t> parent(n_fine, -1);
    for (const auto& list : cached->pairs)
        for (const auto& [fine_row, coarse_row] : list) parent[fine_row] = coarse_row;
    for (std::int32_t p : parent)
        if (p < 0) throw std::invalid_argument("op_upsample_inverse: uncovered fine row");
    const int gathered = op_gather_rows(tape, x_coarse, std::move(parent));
    return op_linear(tape, gathered, w_mix);
}

// ---------------------------------------------------------------------------
// Focal loss (mean over non-ignored rows of -alpha_y (1-p_y)^gamma log p_y)

template <class T>
int op_focal_loss(Tape<T>& tape, int logits, const std::vector<std::int32_t>& labels,
                  double gamma = 2.0, const std::vector<double>* class_weights = nullptr,
                  std::int32_t ignore_index = -1) {
    const Matrix<T>& z = tape.value(logits);
    if (labels.size() != z.rows) throw std::invalid_argument("op_focal_loss: label count mismatch");
    const std::size_t k = z.cols;
    std::size_t valid = 0;
    double loss = 0;
    for (std::size_t i = 0; i < z.rows; ++i) {
        const std::int32_t y = labels[i];
        if (y == ignore_index) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw std::invalid_argument("op_focal_loss: label out of range");
        ++valid;
        double zmax = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) zmax = std::max(zmax, static_cast<double>(z(i, j)));
        double lse = 0;
        for (std::size_t j = 0; j < k; ++j) lse += std::exp(static_cast<double>(z(i, j)) - zmax);
        lse = zmax + std::log(lse);
        const double logp = static_cast<double>(z(i, y)) - lse;
        const double p = std::exp(logp);
        const double alpha = class_weights ? (*class_weights)[y] : 1.0;
        loss += -alpha * std::pow(1.0 - p, gamma) * logp;
    }
    if (valid == 0) throw std::invalid_argument("op_focal_loss: all rows ignored");
    loss /= static_cast<double>(valid);

    std::vector<double> weights;
    if (class_weights) weights = *class_weights;
    return tape.record(
        Matrix<T>::scalar(static_cast<T>(loss)),
        [logits, labels, gamma, weights = std::move(weights), ignore_index,
         valid](Tape<T>& t, int o) {
            const double gup = static_cast<double>(t.grad(o)(0, 0)) / static_cast<double>(valid);
            const Matrix<T>& z = t.value(logits);
            Matrix<T>& gz = t.grad(logits);
            const std::size_t k = z.cols;
            std::vector<double> p(k);
            for (std::size_t i = 0; i < z.rows; ++i) {
                const std::int32_t y = labels[i];
                if (y == ignore_index) continue;
                double zmax = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < k; ++j)
                    zmax = std::max(zmax, static_cast<double>(z(i, j)));
                double sum = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    p[j] = std::exp(static_cast<double>(z(i, j)) - zmax);
                    sum += p[j];
                }
                for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
                const double u = p[y];
                const double s = std::log(std::max(u, 1e-300));
                const double alpha = weights.empty() ? 1.0 : weights[y];
                const double focal = std::pow(1.0 - u, gamma);
                const double dfocal_term =
                    gamma > 0 ? -gamma * std::pow(1.0 - u, gamma - 1.0) * u * s : 0.0;
                const double coeff = -alpha * (dfocal_term + focal);
                for (std::size_t j = 0; j < k; ++j) {
                    const double indicator = (static_cast<std::size_t>(y) == j) ? 1.0 : 0.0;
                    gz(i, j) += static_cast<T>(gup * coeff * (indicator - p[j]));
                }
            }
        });
}

}  // namespace sfp
