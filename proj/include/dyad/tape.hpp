#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "dyad/mask.hpp"
#include "dyad/tensor.hpp"

namespace dyad {

// Reverse-mode tape. One tape per forward pass; node ids are creation
// order, which is already a topological order, so backward is a single
// reverse sweep with a fixed, deterministic accumulation order.
template <typename T>
class TapeT {
public:
    using Id = std::int32_t;

    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        bool touched = false;
        std::function<void(TapeT&)> back;
    };

    Id input(TensorT<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }
    Id constant(TensorT<T> v) { return input(std::move(v), false); }

    const TensorT<T>& val(Id id) const { return nodes_[id].value; }
    const TensorT<T>& grad(Id id) const { return nodes_[id].grad; }
    bool requires_grad(Id id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // ------------------------------------------------------------------
    // elementwise

    Id add(Id a, Id b) {
        check_same_shape(a, b, "add");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
        return make(std::move(out), {a, b}, [a, b](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            t.accum_same(a, g, T(1));
            t.accum_same(b, g, T(1));
        });
    }

    Id sub(Id a, Id b) {
        check_same_shape(a, b, "sub");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
        return make(std::move(out), {a, b}, [a, b](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            t.accum_same(a, g, T(1));
            t.accum_same(b, g, T(-1));
        });
    }

    Id mul(Id a, Id b) {
        check_same_shape(a, b, "mul");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
        return make(std::move(out), {a, b}, [a, b](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            if (t.nodes_[a].requires_grad) {
                auto& da = t.ensure_grad(a);
                const auto& bv = t.nodes_[b].value;
                for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
            }
            if (t.nodes_[b].requires_grad) {
                auto& db = t.ensure_grad(b);
                const auto& av = t.nodes_[a].value;
                for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av.data[i];
            }
        });
    }

    Id scale(Id a, T s) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v *= s;
        return make(std::move(out), {a}, [a, s](TapeT& t) {
            t.accum_same(a, t.nodes_[t.cursor_].grad, s);
        });
    }

    Id add_const(Id a, T c) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v += c;
        return make(std::move(out), {a}, [a](TapeT& t) {
            t.accum_same(a, t.nodes_[t.cursor_].grad, T(1));
        });
    }

    Id abs_act(Id a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = std::abs(v);
        return make(std::move(out), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& x = t.nodes_[a].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const T s = x.data[i] > T(0) ? T(1) : (x.data[i] < T(0) ? T(-1) : T(0));
                da.data[i] += g.data[i] * s;
            }
        });
    }

    Id tanh_act(Id a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = std::tanh(v);
        return make(std::move(out), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& y = t.nodes_[t.cursor_].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                da.data[i] += g.data[i] * (T(1) - y.data[i] * y.data[i]);
            }
        });
    }

    Id silu(Id a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = v * sigmoid_s(v);
        return make(std::move(out), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& x = t.nodes_[a].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const T s = sigmoid_s(x.data[i]);
                da.data[i] += g.data[i] * (s * (T(1) + x.data[i] * (T(1) - s)));
            }
        });
    }

    Id gelu(Id a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) {
            v = T(0.5) * v * (T(1) + T(std::erf(static_cast<double>(v) * kInvSqrt2)));
        }
        return make(std::move(out), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& x = t.nodes_[a].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const double xv = static_cast<double>(x.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
                const double pdf = std::exp(-0.5 * xv * xv) * kInvSqrt2Pi;
                da.data[i] += g.data[i] * T(cdf + xv * pdf);
            }
        });
    }

    // softplus(x) = log(1 + e^x), computed stably; d/dx = sigmoid(x)
    Id softplus(Id a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = softplus_s(v);
        return make(std::move(out), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& x = t.nodes_[a].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                da.data[i] += g.data[i] * sigmoid_s(x.data[i]);
            }
        });
    }

    // ------------------------------------------------------------------
    // shape ops

    Id concat_cols(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
        const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
        TensorT<T> out({r, ca + cb});
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = av.at(i, j);
            for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = bv.at(i, j);
        }
        return make(std::move(out), {a, b}, [a, b, r, ca, cb](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            if (t.nodes_[a].requires_grad) {
                auto& da = t.ensure_grad(a);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < ca; ++j) da.at(i, j) += g.at(i, j);
            }
            if (t.nodes_[b].requires_grad) {
                auto& db = t.ensure_grad(b);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < cb; ++j) db.at(i, j) += g.at(i, ca + j);
            }
        });
    }

    Id slice_cols(Id a, std::size_t c0, std::size_t c1) {
        const auto& av = nodes_[a].value;
        if (c1 > av.cols() || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
        const std::size_t r = av.rows(), w = c1 - c0;
        TensorT<T> out({r, w});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, c0 + j);
        return make(std::move(out), {a}, [a, r, w, c0](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) da.at(i, c0 + j) += g.at(i, j);
        });
    }

    Id concat_rows(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.cols() != bv.cols()) throw std::invalid_argument("concat_rows: col mismatch");
        const std::size_t ra = av.rows(), rb = bv.rows(), c = av.cols();
        TensorT<T> out({ra + rb, c});
        std::copy(av.data.begin(), av.data.end(), out.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(ra * c));
        return make(std::move(out), {a, b}, [a, b, ra, rb, c](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            if (t.nodes_[a].requires_grad) {
                auto& da = t.ensure_grad(a);
                for (std::size_t i = 0; i < ra * c; ++i) da.data[i] += g.data[i];
            }
            if (t.nodes_[b].requires_grad) {
                auto& db = t.ensure_grad(b);
                for (std::size_t i = 0; i < rb * c; ++i) db.data[i] += g.data[ra * c + i];
            }
        });
    }

    Id slice_rows(Id a, std::size_t r0, std::size_t r1) {
        const auto& av = nodes_[a].value;
        if (r1 > av.rows() || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
        const std::size_t c = av.cols(), h = r1 - r0;
        TensorT<T> out({h, c});
        std::copy(av.data.begin() + static_cast<std::ptrdiff_t>(r0 * c),
                  av.data.begin() + static_cast<std::ptrdiff_t>(r1 * c), out.data.begin());
        return make(std::move(out), {a}, [a, r0, h, c](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < h * c; ++i) da.data[r0 * c + i] += g.data[i];
        });
    }

    // row vector (rank-1 or 1xC) replicated over n rows
    Id broadcast_rows(Id row, std::size_t n) {
        const auto& rv = nodes_[row].value;
        const std::size_t c = rv.numel();
        TensorT<T> out({n, c});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) out.at(i, j) = rv.data[j];
        return make(std::move(out), {row}, [row, n, c](TapeT& t) {
            if (!t.nodes_[row].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            auto& dr = t.ensure_grad(row);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) dr.data[j] += g.at(i, j);
        });
    }

    // ------------------------------------------------------------------
    // linear algebra

    Id matmul(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.cols() != bv.rows()) {
            throw std::invalid_argument("matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
        }
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        TensorT<T> out({m, n});
        matmul_kernel(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
        return make(std::move(out), {a, b}, [a, b, m, k, n](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            if (t.nodes_[a].requires_grad) {
                // dA = g . B^T
                auto& da = t.ensure_grad(a);
                const auto& bv = t.nodes_[b].value;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += g.data[i * n + j] * bv.data[p * n + j];
                        }
                        da.data[i * k + p] += acc;
                    }
                }
            }
            if (t.nodes_[b].requires_grad) {
                // dB = A^T . g
                auto& db = t.ensure_grad(b);
                const auto& av = t.nodes_[a].value;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const T aip = av.data[i * k + p];
                        if (aip == T(0)) continue;
                        for (std::size_t j = 0; j < n; ++j) {
                            db.data[p * n + j] += aip * g.data[i * n + j];
                        }
                    }
                }
            }
        });
    }

    Id add_row(Id a, Id row) {
        const auto& av = nodes_[a].value;
        const auto& rv = nodes_[row].value;
        if (rv.numel() != av.cols()) throw std::invalid_argument("add_row: width mismatch");
        const std::size_t m = av.rows(), n = av.cols();
        TensorT<T> out = av;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += rv.data[j];
        return make(std::move(out), {a, row}, [a, row, m, n](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            t.accum_same(a, g, T(1));
            if (t.nodes_[row].requires_grad) {
                auto& dr = t.ensure_grad(row);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dr.data[j] += g.data[i * n + j];
            }
        });
    }

    Id linear(Id x, Id w, Id b) { return add_row(matmul(x, w), b); }

    Id transpose(Id a) {
        const auto& av = nodes_[a].value;
        const std::size_t m = av.rows(), n = av.cols();
        TensorT<T> out({n, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
        return make(std::move(out), {a}, [a, m, n](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) da.at(i, j) += g.at(j, i);
        });
    }

    // Row-wise normalization without learnable affine; modulation is
    // applied externally by the caller.
    Id layer_norm(Id a, T eps = T(1e-5)) {
        const auto& av = nodes_[a].value;
        const std::size_t m = av.rows(), n = av.cols();
        TensorT<T> out({m, n});
        std::vector<T> inv_sigma(m);
        for (std::size_t i = 0; i < m; ++i) {
            T mean = T(0);
            for (std::size_t j = 0; j < n; ++j) mean += av.at(i, j);
            mean /= T(n);
            T var = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                const T d = av.at(i, j) - mean;
                var += d * d;
            }
            var /= T(n);
            const T s = T(1) / std::sqrt(var + eps);
            inv_sigma[i] = s;
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (av.at(i, j) - mean) * s;
        }
        return make(std::move(out), {a}, [a, m, n, inv_sigma](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& y = t.nodes_[t.cursor_].value;
            auto& da = t.ensure_grad(a);
            for (std::size_t i = 0; i < m; ++i) {
                T g_mean = T(0), gy_mean = T(0);
                for (std::size_t j = 0; j < n; ++j) {
                    g_mean += g.at(i, j);
                    gy_mean += g.at(i, j) * y.at(i, j);
                }
                g_mean /= T(n);
                gy_mean /= T(n);
                for (std::size_t j = 0; j < n; ++j) {
                    da.at(i, j) += inv_sigma[i] * (g.at(i, j) - g_mean - y.at(i, j) * gy_mean);
                }
            }
        });
    }

    // ------------------------------------------------------------------
    // reductions

    Id sum_all(Id a) {
        T s = T(0);
        for (T v : nodes_[a].value.data) s += v;
        return make(TensorT<T>::scalar(s), {a}, [a](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const T g = t.nodes_[t.cursor_].grad.data[0];
            auto& da = t.ensure_grad(a);
            for (auto& v : da.data) v += g;
        });
    }

    Id mean_all(Id a) {
        const std::size_t n = nodes_[a].value.numel();
        T s = T(0);
        for (T v : nodes_[a].value.data) s += v;
        s /= T(n);
        return make(TensorT<T>::scalar(s), {a}, [a, n](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            const T g = t.nodes_[t.cursor_].grad.data[0] / T(n);
            auto& da = t.ensure_grad(a);
            for (auto& v : da.data) v += g;
        });
    }

    // ------------------------------------------------------------------
    // rotary position embedding: adjacent channel pairs within each head
    // rotated by theta = pos * base^(-2p/head_dim), pos = pos0 + row.

    Id rope(Id a, std::size_t heads, std::size_t pos0, double base = 10000.0) {
        const auto& av = nodes_[a].value;
        const std::size_t h = av.cols();
        if (h % heads != 0) throw std::invalid_argument("rope: width not divisible by heads");
        const std::size_t hd = h / heads;
        if (hd % 2 != 0) throw std::invalid_argument("rope: head dim must be even");
        TensorT<T> out = av;
        rope_apply(out, heads, pos0, base, false);
        return make(std::move(out), {a}, [a, heads, pos0, base](TapeT& t) {
            if (!t.nodes_[a].requires_grad) return;
            TensorT<T> g = t.nodes_[t.cursor_].grad;
            rope_apply(g, heads, pos0, base, true);  // inverse rotation
            t.accum_same(a, g, T(1));
        });
    }

    // ------------------------------------------------------------------
    // multi-head scaled dot-product attention with an additive -inf mask,
    // realized by excluding masked keys from every max/sum.

    Id masked_attention(Id q, Id k, Id v, mask::MaskPtr m, std::size_t heads) {
        const auto& qv = nodes_[q].value;
        const auto& kv = nodes_[k].value;
        const auto& vv = nodes_[v].value;
        const std::size_t nq = qv.rows(), nk = kv.rows(), h = qv.cols();
        if (kv.cols() != h || vv.cols() != h || vv.rows() != nk) {
            throw std::invalid_argument("masked_attention: q/k/v width mismatch");
        }
        if (h % heads != 0) throw std::invalid_argument("masked_attention: width not divisible by heads");
        if (m->rows != nq || m->cols != nk) {
            throw std::invalid_argument("masked_attention: mask dims mismatch");
        }
        for (std::size_t i = 0; i < nq; ++i) {
            if (m->row_count_admitted(i) == 0) {
                throw std::invalid_argument("masked_attention: fully-masked query row " + std::to_string(i));
            }
        }
        const std::size_t hd = h / heads;
        const T scale = T(1.0 / std::sqrt(static_cast<double>(hd)));

        // softmax weights per head, kept for backward; zero at masked keys
        std::vector<TensorT<T>> weights(heads, TensorT<T>({nq, nk}));
        TensorT<T> out({nq, h});
        for (std::size_t g0 = 0; g0 < heads; ++g0) {
            const std::size_t c0 = g0 * hd;
            auto& A = weights[g0];
            for (std::size_t i = 0; i < nq; ++i) {
                const std::uint8_t* mrow = m->admit.data() + i * nk;
                // scores over admitted keys
                T smax = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!mrow[j]) continue;
                    T s = T(0);
                    for (std::size_t c = 0; c < hd; ++c) s += qv.at(i, c0 + c) * kv.at(j, c0 + c);
                    s *= scale;
                    A.at(i, j) = s;
                    if (s > smax) smax = s;
                }
                T z = T(0);
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!mrow[j]) continue;
                    const T e = std::exp(A.at(i, j) - smax);
                    A.at(i, j) = e;
                    z += e;
                }
                const T inv_z = T(1) / z;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!mrow[j]) {
                        A.at(i, j) = T(0);
                        continue;
                    }
                    A.at(i, j) *= inv_z;
                    const T w = A.at(i, j);
                    for (std::size_t c = 0; c < hd; ++c) out.at(i, c0 + c) += w * vv.at(j, c0 + c);
                }
            }
        }

        const bool rg = nodes_[q].requires_grad || nodes_[k].requires_grad || nodes_[v].requires_grad;
        if (!rg) {
            return make(std::move(out), {}, nullptr);
        }
        return make(std::move(out), {q, k, v},
                    [q, k, v, m, heads, nq, nk, hd, scale, weights](TapeT& t) {
            const auto& g = t.nodes_[t.cursor_].grad;
            const auto& qv = t.nodes_[q].value;
            const auto& kv = t.nodes_[k].value;
            const auto& vv = t.nodes_[v].value;
            const bool need_q = t.nodes_[q].requires_grad;
            const bool need_k = t.nodes_[k].requires_grad;
            const bool need_v = t.nodes_[v].requires_grad;
            TensorT<T>* dq = need_q ? &t.ensure_grad(q) : nullptr;
            TensorT<T>* dk = need_k ? &t.ensure_grad(k) : nullptr;
            TensorT<T>* dv = need_v ? &t.ensure_grad(v) : nullptr;
            std::vector<T> dA(nk);
            for (std::size_t g0 = 0; g0 < heads; ++g0) {
                const std::size_t c0 = g0 * hd;
                const auto& A = weights[g0];
                for (std::size_t i = 0; i < nq; ++i) {
                    const std::uint8_t* mrow = m->admit.data() + i * nk;
                    T row_dot = T(0);
                    for (std::size_t j = 0; j < nk; ++j) {
                        if (!mrow[j]) continue;
                        T d = T(0);
                        for (std::size_t c = 0; c < hd; ++c) d += g.at(i, c0 + c) * vv.at(j, c0 + c);
                        dA[j] = d;
                        row_dot += A.at(i, j) * d;
                        if (need_v) {
                            const T w = A.at(i, j);
                            for (std::size_t c = 0; c < hd; ++c) dv->at(j, c0 + c) += w * g.at(i, c0 + c);
                        }
                    }
                    for (std::size_t j = 0; j < nk; ++j) {
                        if (!mrow[j]) continue;
                        const T ds = A.at(i, j) * (dA[j] - row_dot) * scale;
                        if (ds == T(0)) continue;
                        if (need_q) {
                            for (std::size_t c = 0; c < hd; ++c) dq->at(i, c0 + c) += ds * kv.at(j, c0 + c);
                        }
                        if (need_k) {
                            for (std::size_t c = 0; c < hd; ++c) dk->at(j, c0 + c) += ds * qv.at(i, c0 + c);
                        }
                    }
                }
            }
        });
    }

    // ------------------------------------------------------------------
    // backward

    void backward(Id loss) {
        if (nodes_[loss].value.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " + nodes_[loss].value.shape_str());
        }
        if (!nodes_[loss].requires_grad) {
            throw std::invalid_argument("backward: loss does not depend on any trainable input");
        }
        ensure_grad(loss).data[0] = T(1);
        for (Id id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.touched || !n.back) continue;
            cursor_ = id;
            n.back(*this);
        }
    }

    // Gradient for a node; zero tensor if it was never reached.
    TensorT<T> grad_or_zero(Id id) const {
        if (nodes_[id].touched) return nodes_[id].grad;
        return TensorT<T>::zeros(nodes_[id].value.shape);
    }

    static void rope_apply(TensorT<T>& x, std::size_t heads, std::size_t pos0, double base, bool inverse) {
        const std::size_t n = x.rows(), h = x.cols();
        const std::size_t hd = h / heads;
        const std::size_t half = hd / 2;
        for (std::size_t i = 0; i < n; ++i) {
            const double pos = static_cast<double>(pos0 + i);
            for (std::size_t g0 = 0; g0 < heads; ++g0) {
                const std::size_t c0 = g0 * hd;
                for (std::size_t p = 0; p < half; ++p) {
                    const double theta = pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
                    const T c = T(std::cos(theta));
                    const T s = inverse ? T(-std::sin(theta)) : T(std::sin(theta));
                    const T xa = x.at(i, c0 + 2 * p);
                    const T xb = x.at(i, c0 + 2 * p + 1);
                    x.at(i, c0 + 2 * p) = xa * c - xb * s;
                    x.at(i, c0 + 2 * p + 1) = xa * s + xb * c;
                }
            }
        }
    }

private:
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

    static T sigmoid_s(T x) {
        if (x >= T(0)) {
            const T e = std::exp(-x);
            return T(1) / (T(1) + e);
        }
        const T e = std::exp(x);
        return e / (T(1) + e);
    }
    static T softplus_s(T x) {
        if (x > T(30)) return x;
        if (x < T(-30)) return std::exp(x);
        return std::log1p(std::exp(x));
    }

    static void matmul_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T aip = a[i * k + p];
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
    }

    void check_same_shape(Id a, Id b, const char* op) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value)) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + nodes_[a].value.shape_str() +
                                        " vs " + nodes_[b].value.shape_str());
        }
    }

    Id make(TensorT<T> value, std::initializer_list<Id> parents, std::function<void(TapeT&)> back) {
        Node n;
        n.value = std::move(value);
        for (Id p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
        if (n.requires_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    TensorT<T>& ensure_grad(Id id) {
        Node& n = nodes_[id];
        if (!n.touched) {
            n.grad = TensorT<T>::zeros(n.value.shape);
            n.touched = true;
        }
        return n.grad;
    }

    void accum_same(Id id, const TensorT<T>& g, T s) {
        if (!nodes_[id].requires_grad) return;
        auto& d = ensure_grad(id);
        for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += s * g.data[i];
    }

    std::vector<Node> nodes_;
    Id cursor_ = 0;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace dyad
