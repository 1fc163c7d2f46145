#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "poet/common.hpp"
#include "poet/tensor.hpp"

namespace poet {

// Reverse-mode tape over Tensor<Real>. A Graph is built per sample, backward()
// is run once on a scalar root, and gradients of bound parameters accumulate
// into Param::grad. Nodes whose subtree contains no trainable parameter skip
// gradient allocation and their backward pass entirely, so frozen branches
// (e.g. the query feature extractor) cost only a forward pass.
template <typename Real>
class Graph {
public:
    using Id = int;

    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;
        std::function<void(Graph&)> back;
        Param<Real>* bound = nullptr;
        bool needs = false;
    };

    const Tensor<Real>& val(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor<Real>& grad(Id id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool needs_grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs; }
    std::size_t size() const { return nodes_.size(); }

    Id constant(Tensor<Real> t) {
        Node n;
        n.value = std::move(t);
        n.needs = false;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    Id param(Param<Real>& p) {
        Node n;
        n.value = p.value;
        n.needs = !p.frozen;
        if (n.needs) {
            n.grad = Tensor<Real>(p.value.shape);
            n.bound = &p;
        }
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    // ---- elementwise / shape ops ----------------------------------------

    Id add(Id a, Id b) {
        check(val(a).same_shape(val(b)), "add: shape mismatch " + val(a).shape_str() +
                                             " vs " + val(b).shape_str());
        Tensor<Real> out = val(a);
        const auto& bv = val(b).v;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const auto& go = g.grad(g.cur_);
            if (g.needs_grad(a)) axpy(g.grad(a).v, go.v, Real(1));
            if (g.needs_grad(b)) axpy(g.grad(b).v, go.v, Real(1));
        });
    }

    // x: T x J x C, frame: J x C, broadcast over T.
    Id add_frame(Id x, Id frame) {
        const auto& xv = val(x);
        const auto& fv = val(frame);
        check(xv.rank() == 3 && fv.rank() == 2 && xv.dim(1) == fv.dim(0) &&
                  xv.dim(2) == fv.dim(1),
              "add_frame: incompatible shapes");
        Tensor<Real> out = xv;
        const int T = xv.dim(0);
        const long fn = fv.numel();
        for (int t = 0; t < T; ++t)
            for (long i = 0; i < fn; ++i) out.v[static_cast<std::size_t>(t * fn + i)] += fv[i];
        return make(std::move(out), {x, frame}, [x, frame, T, fn](Graph& g) {
            const auto& go = g.grad(g.cur_);
            if (g.needs_grad(x)) axpy(g.grad(x).v, go.v, Real(1));
            if (g.needs_grad(frame)) {
                auto& gf = g.grad(frame);
                for (int t = 0; t < T; ++t)
                    for (long i = 0; i < fn; ++i)
                        gf[i] += go.v[static_cast<std::size_t>(t * fn + i)];
            }
        });
    }

    Id reshape(Id a, std::vector<int> shape) {
        check(Tensor<Real>::numel_of(shape) == val(a).numel(), "reshape: element count mismatch");
        Tensor<Real> out = val(a);
        out.shape = std::move(shape);
        return make(std::move(out), {a}, [a](Graph& g) {
            if (g.needs_grad(a)) axpy(g.grad(a).v, g.grad(g.cur_).v, Real(1));
        });
    }

    Id scale(Id a, Real s) {
        Tensor<Real> out = val(a);
        for (auto& x : out.v) x *= s;
        return make(std::move(out), {a}, [a, s](Graph& g) {
            if (g.needs_grad(a)) axpy(g.grad(a).v, g.grad(g.cur_).v, s);
        });
    }

    // out = a * s where s is a scalar node (e.g. a learnable scale).
    Id scale_by(Id a, Id s) {
        check(val(s).numel() == 1, "scale_by: scale must be scalar");
        const Real sv = val(s)[0];
        Tensor<Real> out = val(a);
        for (auto& x : out.v) x *= sv;
        return make(std::move(out), {a, s}, [a, s, sv](Graph& g) {
            const auto& go = g.grad(g.cur_);
            if (g.needs_grad(a)) axpy(g.grad(a).v, go.v, sv);
            if (g.needs_grad(s)) {
                Real acc = 0;
                const auto& av = g.val(a).v;
                for (std::size_t i = 0; i < av.size(); ++i) acc += go.v[i] * av[i];
                g.grad(s)[0] += acc;
            }
        });
    }

    Id relu(Id a) {
        Tensor<Real> out = val(a);
        for (auto& x : out.v)
            if (x < Real(0)) x = Real(0);
        return make(std::move(out), {a}, [a](Graph& g) {
            if (!g.needs_grad(a)) return;
            const auto& go = g.grad(g.cur_);
            const auto& av = g.val(a).v;
            auto& ga = g.grad(a);
            for (std::size_t i = 0; i < av.size(); ++i)
                if (av[i] > Real(0)) ga[i] += go.v[i];
        });
    }

    // Inverted dropout with a fixed 0/1 mask (drawn by the caller).
    Id dropout(Id a, const std::vector<char>& mask, Real keep) {
        check(static_cast<long>(mask.size()) == val(a).numel(), "dropout: mask size mismatch");
        check(keep > Real(0), "dropout: keep probability must be positive");
        Tensor<Real> out = val(a);
        const Real inv = Real(1) / keep;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = mask[i] ? out.v[i] * inv : Real(0);
        return make(std::move(out), {a}, [a, mask, inv](Graph& g) {
            if (!g.needs_grad(a)) return;
            const auto& go = g.grad(g.cur_);
            auto& ga = g.grad(a);
            for (std::size_t i = 0; i < mask.size(); ++i)
                if (mask[i]) ga[i] += go.v[i] * inv;
        });
    }

    // ---- linear algebra ---------------------------------------------------

    // x: [...xD], w: OxD, b: O (ignored if < 0). Applies to the last axis.
    Id linear(Id x, Id w, Id b) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        check(xv.rank() >= 1 && wv.rank() == 2, "linear: rank mismatch");
        const int D = xv.dim(xv.rank() - 1);
        const int O = wv.dim(0);
        check(wv.dim(1) == D, "linear: weight expects input width " +
                                  std::to_string(wv.dim(1)) + ", got " + std::to_string(D));
        const long N = xv.numel() / D;
        std::vector<int> out_shape(xv.shape.begin(), xv.shape.end() - 1);
        out_shape.push_back(O);
        Tensor<Real> out(out_shape);
        const bool has_b = b >= 0;
        if (has_b) check(val(b).numel() == O, "linear: bias size mismatch");
        for (long n = 0; n < N; ++n) {
            const Real* xr = xv.v.data() + n * D;
            Real* yr = out.v.data() + n * O;
            for (int o = 0; o < O; ++o) {
                const Real* wr = wv.v.data() + static_cast<long>(o) * D;
                Real acc = has_b ? val(b)[o] : Real(0);
                for (int d = 0; d < D; ++d) acc += xr[d] * wr[d];
                yr[o] = acc;
            }
        }
        std::vector<Id> parents = {x, w};
        if (has_b) parents.push_back(b);
        return make(std::move(out), parents, [x, w, b, N, D, O, has_b](Graph& g) {
            const auto& go = g.grad(g.cur_);
            const auto& xv2 = g.val(x);
            const auto& wv2 = g.val(w);
            for (long n = 0; n < N; ++n) {
                const Real* gr = go.v.data() + n * O;
                const Real* xr = xv2.v.data() + n * D;
                if (g.needs_grad(x)) {
                    Real* gx = g.grad(x).v.data() + n * D;
                    for (int o = 0; o < O; ++o) {
                        const Real* wr = wv2.v.data() + static_cast<long>(o) * D;
                        const Real gv = gr[o];
                        for (int d = 0; d < D; ++d) gx[d] += gv * wr[d];
                    }
                }
                if (g.needs_grad(w)) {
                    Real* gw = g.grad(w).v.data();
                    for (int o = 0; o < O; ++o) {
                        const Real gv = gr[o];
                        Real* wrow = gw + static_cast<long>(o) * D;
                        for (int d = 0; d < D; ++d) wrow[d] += gv * xr[d];
                    }
                }
                if (has_b && g.needs_grad(b)) {
                    auto& gb = g.grad(b);
                    for (int o = 0; o < O; ++o) gb[o] += gr[o];
                }
            }
        });
    }

    // x: TxJxC, adj: JxJ constant. out[t,i,c] = sum_j adj[i,j] x[t,j,c].
    Id spatial_aggregate(Id x, const Tensor<Real>& adj) {
        const auto& xv = val(x);
        const int T = xv.dim(0), J = xv.dim(1), C = xv.dim(2);
        check(adj.rank() == 2 && adj.dim(0) == J && adj.dim(1) == J,
              "spatial_aggregate: adjacency must be JxJ");
        Tensor<Real> out(xv.shape);
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < J; ++i) {
                Real* yr = &out.at(t, i, 0);
                for (int j = 0; j < J; ++j) {
                    const Real a = adj.at(i, j);
                    if (a == Real(0)) continue;
                    const Real* xr = &xv.at(t, j, 0);
                    for (int c = 0; c < C; ++c) yr[c] += a * xr[c];
                }
            }
        return make(std::move(out), {x}, [x, adj, T, J, C](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& go = g.grad(g.cur_);
            auto& gx = g.grad(x);
            for (int t = 0; t < T; ++t)
                for (int i = 0; i < J; ++i) {
                    const Real* gr = &go.at(t, i, 0);
                    for (int j = 0; j < J; ++j) {
                        const Real a = adj.at(i, j);
                        if (a == Real(0)) continue;
                        Real* gxr = &gx.at(t, j, 0);
                        for (int c = 0; c < C; ++c) gxr[c] += a * gr[c];
                    }
                }
        });
    }

    // Temporal convolution, kernel 3, zero padded.
    // x: TxJxCi, w: CoxCix3, b: Co. out[t,j,o] = b[o] + sum_{k,i} w[o,i,k] x[t+k-1,j,i].
    Id temporal_conv3(Id x, Id w, Id b) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const int T = xv.dim(0), J = xv.dim(1), Ci = xv.dim(2);
        check(wv.rank() == 3 && wv.dim(1) == Ci && wv.dim(2) == 3,
              "temporal_conv3: weight must be CoxCix3 with Ci=" + std::to_string(Ci));
        const int Co = wv.dim(0);
        check(val(b).numel() == Co, "temporal_conv3: bias size mismatch");
        Tensor<Real> out({T, J, Co});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < J; ++j) {
                Real* yr = &out.at(t, j, 0);
                for (int o = 0; o < Co; ++o) yr[o] = val(b)[o];
                for (int k = 0; k < 3; ++k) {
                    const int ts = t + k - 1;
                    if (ts < 0 || ts >= T) continue;
                    const Real* xr = &xv.at(ts, j, 0);
                    for (int o = 0; o < Co; ++o) {
                        const Real* wr = &wv.at(o, 0, 0);
                        Real acc = 0;
                        for (int i = 0; i < Ci; ++i) acc += wr[i * 3 + k] * xr[i];
                        yr[o] += acc;
                    }
                }
            }
        return make(std::move(out), {x, w, b}, [x, w, b, T, J, Ci, Co](Graph& g) {
            const auto& go = g.grad(g.cur_);
            const auto& xv2 = g.val(x);
            const auto& wv2 = g.val(w);
            const bool nx = g.needs_grad(x), nw = g.needs_grad(w), nb = g.needs_grad(b);
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < J; ++j) {
                    const Real* gr = &go.at(t, j, 0);
                    if (nb) {
                        auto& gb = g.grad(b);
                        for (int o = 0; o < Co; ++o) gb[o] += gr[o];
                    }
                    for (int k = 0; k < 3; ++k) {
                        const int ts = t + k - 1;
                        if (ts < 0 || ts >= T) continue;
                        const Real* xr = &xv2.at(ts, j, 0);
                        if (nw) {
                            auto& gw = g.grad(w);
                            for (int o = 0; o < Co; ++o) {
                                const Real gv = gr[o];
                                Real* gwr = &gw.at(o, 0, 0);
                                for (int i = 0; i < Ci; ++i) gwr[i * 3 + k] += gv * xr[i];
                            }
                        }
                        if (nx) {
                            Real* gxr = &g.grad(x).at(ts, j, 0);
                            for (int o = 0; o < Co; ++o) {
                                const Real gv = gr[o];
                                const Real* wr = &wv2.at(o, 0, 0);
                                for (int i = 0; i < Ci; ++i) gxr[i] += gv * wr[i * 3 + k];
                            }
                        }
                    }
                }
        });
    }

    // TxJxC -> C, global mean over time and joints.
    Id mean_pool(Id x) {
        const auto& xv = val(x);
        check(xv.rank() == 3, "mean_pool: expects rank-3 input");
        const int T = xv.dim(0), J = xv.dim(1), C = xv.dim(2);
        const Real inv = Real(1) / static_cast<Real>(static_cast<long>(T) * J);
        Tensor<Real> out({C});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < J; ++j) {
                const Real* xr = &xv.at(t, j, 0);
                for (int c = 0; c < C; ++c) out[c] += xr[c];
            }
        for (int c = 0; c < C; ++c) out[c] *= inv;
        return make(std::move(out), {x}, [x, T, J, C, inv](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& go = g.grad(g.cur_);
            auto& gx = g.grad(x);
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < J; ++j) {
                    Real* gxr = &gx.at(t, j, 0);
                    for (int c = 0; c < C; ++c) gxr[c] += go[c] * inv;
                }
        });
    }

    // ---- similarity and losses ---------------------------------------------

    // q: C, keys: MxC -> M cosine similarities. Zero-norm inputs are a
    // numeric degeneracy, reported as such rather than silently clamped.
    Id cosine_rows(Id q, Id keys) {
        const auto& qv = val(q);
        const auto& kv = val(keys);
        check(qv.rank() == 1 && kv.rank() == 2 && kv.dim(1) == qv.dim(0),
              "cosine_rows: shape mismatch");
        const int C = qv.dim(0), M = kv.dim(0);
        double qn2 = 0;
        for (int c = 0; c < C; ++c) qn2 += static_cast<double>(qv[c]) * qv[c];
        const double qn = std::sqrt(qn2);
        if (!(qn >= std::numeric_limits<double>::min()))
            throw NumericError("cosine_rows: zero-norm query");
        Tensor<Real> out({M});
        std::vector<double> knorm(static_cast<std::size_t>(M));
        for (int m = 0; m < M; ++m) {
            double dot = 0, kn2 = 0;
            const Real* kr = &kv.at(m, 0);
            for (int c = 0; c < C; ++c) {
                dot += static_cast<double>(kr[c]) * qv[c];
                kn2 += static_cast<double>(kr[c]) * kr[c];
            }
            const double kn = std::sqrt(kn2);
            if (!(kn >= std::numeric_limits<double>::min()))
                throw NumericError("cosine_rows: zero-norm key at index " + std::to_string(m));
            knorm[static_cast<std::size_t>(m)] = kn;
            out[m] = static_cast<Real>(dot / (qn * kn));
        }
        return make(std::move(out), {q, keys}, [q, keys, C, M, qn, knorm](Graph& g) {
            const auto& go = g.grad(g.cur_);
            const auto& qv2 = g.val(q);
            const auto& kv2 = g.val(keys);
            const auto& gamma = g.val(g.cur_);
            const bool nq = g.needs_grad(q), nk = g.needs_grad(keys);
            for (int m = 0; m < M; ++m) {
                const Real gm = go[m];
                if (gm == Real(0)) continue;
                const double kn = knorm[static_cast<std::size_t>(m)];
                const Real* kr = &kv2.at(m, 0);
                const double cm = static_cast<double>(gamma[m]);
                if (nq) {
                    auto& gq = g.grad(q);
                    for (int c = 0; c < C; ++c)
                        gq[c] += gm * static_cast<Real>(kr[c] / (qn * kn) -
                                                        cm * qv2[c] / (qn * qn));
                }
                if (nk) {
                    Real* gk = &g.grad(keys).at(m, 0);
                    for (int c = 0; c < C; ++c)
                        gk[c] += gm * static_cast<Real>(qv2[c] / (qn * kn) -
                                                        cm * kr[c] / (kn * kn));
                }
            }
        });
    }

    // Stable softmax cross-entropy against an integer label. Scalar output.
    Id cross_entropy(Id logits, int label) {
        const auto& lv = val(logits);
        check(lv.rank() == 1, "cross_entropy: logits must be a vector");
        const int K = lv.dim(0);
        check(label >= 0 && label < K, "cross_entropy: label out of range");
        Real mx = lv[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, lv[k]);
        double sum = 0;
        for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(lv[k] - mx));
        const double lse = std::log(sum);
        Tensor<Real> out = Tensor<Real>::scalar(
            static_cast<Real>(lse - static_cast<double>(lv[label] - mx)));
        std::vector<Real> probs(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k)
            probs[static_cast<std::size_t>(k)] =
                static_cast<Real>(std::exp(static_cast<double>(lv[k] - mx)) / sum);
        return make(std::move(out), {logits}, [logits, label, K, probs](Graph& g) {
            if (!g.needs_grad(logits)) return;
            const Real go = g.grad(g.cur_)[0];
            auto& gl = g.grad(logits);
            for (int k = 0; k < K; ++k) {
                Real d = probs[static_cast<std::size_t>(k)];
                if (k == label) d -= Real(1);
                gl[k] += go * d;
            }
        });
    }

    // Sum of gamma over a fixed index subset -> scalar.
    Id sum_subset(Id gamma, const std::vector<int>& idx) {
        const auto& gv = val(gamma);
        Real acc = 0;
        for (int i : idx) {
            check(i >= 0 && i < gv.numel(), "sum_subset: index out of range");
            acc += gv[i];
        }
        return make(Tensor<Real>::scalar(acc), {gamma}, [gamma, idx](Graph& g) {
            if (!g.needs_grad(gamma)) return;
            const Real go = g.grad(g.cur_)[0];
            auto& gg = g.grad(gamma);
            for (int i : idx) gg[i] += go;
        });
    }

    // ---- prompt-specific ops -------------------------------------------------

    // Read pool rows in `order`. Forward values are the raw prompts: the
    // straight-through factor (gamma - stopgrad(gamma) + 1) is identically 1,
    // so only the backward pass carries the extra gamma term. With
    // `coupled` false the gamma path is cut and only prompts receive
    // cross-entropy gradient.
    Id gather_prompts(Id pool, const std::vector<int>& order, Id gamma, bool coupled) {
        const auto& pv = val(pool);
        check(pv.rank() == 3, "gather_prompts: pool must be MxJxC");
        const int M = pv.dim(0), J = pv.dim(1), C = pv.dim(2);
        const long slot = static_cast<long>(J) * C;
        const int Tsel = static_cast<int>(order.size());
        for (int i : order)
            check(i >= 0 && i < M, "gather_prompts: index " + std::to_string(i) + " out of range");
        Tensor<Real> out({Tsel, J, C});
        for (int p = 0; p < Tsel; ++p)
            std::copy_n(pv.v.data() + order[static_cast<std::size_t>(p)] * slot, slot,
                        out.v.data() + p * slot);
        std::vector<Id> parents = {pool};
        if (coupled) parents.push_back(gamma);
        return make(std::move(out), parents,
                    [pool, gamma, order, coupled, slot, Tsel](Graph& g) {
                        const auto& go = g.grad(g.cur_);
                        const auto& pv2 = g.val(pool);
                        for (int p = 0; p < Tsel; ++p) {
                            const int src = order[static_cast<std::size_t>(p)];
                            const Real* gr = go.v.data() + p * slot;
                            if (g.needs_grad(pool)) {
                                Real* gp = g.grad(pool).v.data() + src * slot;
                                for (long i = 0; i < slot; ++i) gp[i] += gr[i];
                            }
                            if (coupled && g.needs_grad(gamma)) {
                                const Real* pr = pv2.v.data() + src * slot;
                                Real acc = 0;
                                for (long i = 0; i < slot; ++i) acc += gr[i] * pr[i];
                                g.grad(gamma)[src] += acc;
                            }
                        }
                    });
    }

    // ---- concatenation / remap (attachment variants) -----------------------

    Id concat_time(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        check(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) &&
                  av.dim(2) == bv.dim(2),
              "concat_time: incompatible shapes");
        Tensor<Real> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
        std::copy(av.v.begin(), av.v.end(), out.v.begin());
        std::copy(bv.v.begin(), bv.v.end(), out.v.begin() + av.numel());
        const long na = av.numel();
        return make(std::move(out), {a, b}, [a, b, na](Graph& g) {
            const auto& go = g.grad(g.cur_);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (long i = 0; i < na; ++i) ga[i] += go[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                const long nb = gb.numel();
                for (long i = 0; i < nb; ++i) gb[i] += go[na + i];
            }
        });
    }

    Id concat_feature(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        check(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                  av.dim(1) == bv.dim(1),
              "concat_feature: incompatible shapes");
        const int T = av.dim(0), J = av.dim(1), Ca = av.dim(2), Cb = bv.dim(2);
        Tensor<Real> out({T, J, Ca + Cb});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < J; ++j) {
                Real* yr = &out.at(t, j, 0);
                std::copy_n(&av.at(t, j, 0), Ca, yr);
                std::copy_n(&bv.at(t, j, 0), Cb, yr + Ca);
            }
        return make(std::move(out), {a, b}, [a, b, T, J, Ca, Cb](Graph& g) {
            const auto& go = g.grad(g.cur_);
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < J; ++j) {
                    const Real* gr = &go.at(t, j, 0);
                    if (g.needs_grad(a)) {
                        Real* ga = &g.grad(a).at(t, j, 0);
                        for (int c = 0; c < Ca; ++c) ga[c] += gr[c];
                    }
                    if (g.needs_grad(b)) {
                        Real* gb = &g.grad(b).at(t, j, 0);
                        for (int c = 0; c < Cb; ++c) gb[c] += gr[Ca + c];
                    }
                }
        });
    }

    // x: UxJxC, w: TxU. out[t] = sum_u w[t,u] x[u].
    Id temporal_remap(Id x, Id w) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        check(xv.rank() == 3 && wv.rank() == 2 && wv.dim(1) == xv.dim(0),
              "temporal_remap: weight must be TxU with U=" + std::to_string(xv.dim(0)));
        const int U = xv.dim(0), J = xv.dim(1), C = xv.dim(2), T = wv.dim(0);
        const long slot = static_cast<long>(J) * C;
        Tensor<Real> out({T, J, C});
        for (int t = 0; t < T; ++t) {
            Real* yr = out.v.data() + t * slot;
            for (int u = 0; u < U; ++u) {
                const Real a = wv.at(t, u);
                if (a == Real(0)) continue;
                const Real* xr = xv.v.data() + u * slot;
                for (long i = 0; i < slot; ++i) yr[i] += a * xr[i];
            }
        }
        return make(std::move(out), {x, w}, [x, w, U, T, slot](Graph& g) {
            const auto& go = g.grad(g.cur_);
            const auto& xv2 = g.val(x);
            const auto& wv2 = g.val(w);
            for (int t = 0; t < T; ++t) {
                const Real* gr = go.v.data() + t * slot;
                for (int u = 0; u < U; ++u) {
                    if (g.needs_grad(x)) {
                        const Real a = wv2.at(t, u);
                        if (a != Real(0)) {
                            Real* gx = g.grad(x).v.data() + u * slot;
                            for (long i = 0; i < slot; ++i) gx[i] += a * gr[i];
                        }
                    }
                    if (g.needs_grad(w)) {
                        const Real* xr = xv2.v.data() + u * slot;
                        Real acc = 0;
                        for (long i = 0; i < slot; ++i) acc += gr[i] * xr[i];
                        g.grad(w).at(t, u) += acc;
                    }
                }
            }
        });
    }

    // Parameter-free single-head cross-attention, residual form. Queries are
    // flattened frames of x, keys/values are flattened prompt slots.
    // out[t] = x[t] + sum_u softmax_u(<x[t], p[u]>/sqrt(JC)) p[u].
    Id cross_attend_add(Id x, Id p) {
        const auto& xv = val(x);
        const auto& pv = val(p);
        check(xv.rank() == 3 && pv.rank() == 3 && xv.dim(1) == pv.dim(1) &&
                  xv.dim(2) == pv.dim(2),
              "cross_attend_add: incompatible shapes");
        const int T = xv.dim(0), U = pv.dim(0);
        const long d = static_cast<long>(xv.dim(1)) * xv.dim(2);
        const Real sc = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
        Tensor<Real> attn({T, U});
        Tensor<Real> out = xv;
        for (int t = 0; t < T; ++t) {
            const Real* xr = xv.v.data() + t * d;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int u = 0; u < U; ++u) {
                const Real* pr = pv.v.data() + u * d;
                Real s = 0;
                for (long i = 0; i < d; ++i) s += xr[i] * pr[i];
                attn.at(t, u) = s * sc;
                mx = std::max(mx, attn.at(t, u));
            }
            Real sum = 0;
            for (int u = 0; u < U; ++u) {
                attn.at(t, u) = std::exp(attn.at(t, u) - mx);
                sum += attn.at(t, u);
            }
            for (int u = 0; u < U; ++u) attn.at(t, u) /= sum;
            Real* yr = out.v.data() + t * d;
            for (int u = 0; u < U; ++u) {
                const Real a = attn.at(t, u);
                const Real* pr = pv.v.data() + u * d;
                for (long i = 0; i < d; ++i) yr[i] += a * pr[i];
            }
        }
        return make(std::move(out), {x, p}, [x, p, T, U, d, sc, attn](Graph& g) {
            const auto& go = g.grad(g.cur_);
            const auto& xv2 = g.val(x);
            const auto& pv2 = g.val(p);
            const bool nx = g.needs_grad(x), np = g.needs_grad(p);
            std::vector<Real> dattn(static_cast<std::size_t>(U));
            std::vector<Real> dscore(static_cast<std::size_t>(U));
            for (int t = 0; t < T; ++t) {
                const Real* gr = go.v.data() + t * d;
                if (nx) {
                    Real* gx = g.grad(x).v.data() + t * d;
                    for (long i = 0; i < d; ++i) gx[i] += gr[i];  // residual
                }
                Real dot = 0;
                for (int u = 0; u < U; ++u) {
                    const Real* pr = pv2.v.data() + u * d;
                    Real acc = 0;
                    for (long i = 0; i < d; ++i) acc += gr[i] * pr[i];
                    dattn[static_cast<std::size_t>(u)] = acc;
                    dot += attn.at(t, u) * acc;
                }
                for (int u = 0; u < U; ++u)
                    dscore[static_cast<std::size_t>(u)] =
                        attn.at(t, u) * (dattn[static_cast<std::size_t>(u)] - dot);
                const Real* xr = xv2.v.data() + t * d;
                for (int u = 0; u < U; ++u) {
                    const Real a = attn.at(t, u);
                    const Real ds = dscore[static_cast<std::size_t>(u)] * sc;
                    const Real* pr = pv2.v.data() + u * d;
                    if (np) {
                        Real* gp = g.grad(p).v.data() + u * d;
                        for (long i = 0; i < d; ++i) gp[i] += a * gr[i] + ds * xr[i];
                    }
                    if (nx && ds != Real(0)) {
                        Real* gx = g.grad(x).v.data() + t * d;
                        for (long i = 0; i < d; ++i) gx[i] += ds * pr[i];
                    }
                }
            }
        });
    }

    // Single-head self-attention applied group-wise on a TxJxC grid.
    // axis 0: tokens are joints within each frame; axis 1: tokens are the
    // frames of each joint. wq/wk/wv are CxC.
    Id self_attention(Id x, Id wq, Id wk, Id wv, int axis) {
        const auto& xv = val(x);
        check(xv.rank() == 3, "self_attention: expects TxJxC");
        check(axis == 0 || axis == 1, "self_attention: axis must be 0 or 1");
        const int T = xv.dim(0), J = xv.dim(1), C = xv.dim(2);
        for (Id wid : {wq, wk, wv})
            check(val(wid).rank() == 2 && val(wid).dim(0) == C && val(wid).dim(1) == C,
                  "self_attention: projection must be CxC");
        const int groups = axis == 0 ? T : J;
        const int N = axis == 0 ? J : T;
        const Real sc = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(C)));

        auto token = [&](const Tensor<Real>& t, int gidx, int n) -> const Real* {
            return axis == 0 ? &t.at(gidx, n, 0) : &t.at(n, gidx, 0);
        };
        // Per-group Q, K, V and attention probabilities, kept for backward.
        Tensor<Real> Q({groups, N, C}), K({groups, N, C}), V({groups, N, C});
        Tensor<Real> A({groups, N, N});
        Tensor<Real> out(xv.shape);
        const auto& wqv = val(wq);
        const auto& wkv = val(wk);
        const auto& wvv = val(wv);
        auto project = [&](const Tensor<Real>& w, Tensor<Real>& dst) {
            for (int gi = 0; gi < groups; ++gi)
                for (int n = 0; n < N; ++n) {
                    const Real* xr = token(xv, gi, n);
                    Real* dr = &dst.at(gi, n, 0);
                    for (int a = 0; a < C; ++a) {
                        const Real* wr = &w.at(a, 0);
                        Real acc = 0;
                        for (int c = 0; c < C; ++c) acc += xr[c] * wr[c];
                        dr[a] = acc;
                    }
                }
        };
        project(wqv, Q);
        project(wkv, K);
        project(wvv, V);
        for (int gi = 0; gi < groups; ++gi) {
            for (int n = 0; n < N; ++n) {
                Real mx = -std::numeric_limits<Real>::infinity();
                Real* ar = &A.at(gi, n, 0);
                const Real* qr = &Q.at(gi, n, 0);
                for (int m = 0; m < N; ++m) {
                    const Real* kr = &K.at(gi, m, 0);
                    Real s = 0;
                    for (int c = 0; c < C; ++c) s += qr[c] * kr[c];
                    ar[m] = s * sc;
                    mx = std::max(mx, ar[m]);
                }
                Real sum = 0;
                for (int m = 0; m < N; ++m) {
                    ar[m] = std::exp(ar[m] - mx);
                    sum += ar[m];
                }
                Real* yr = const_cast<Real*>(token(out, gi, n));
                for (int c = 0; c < C; ++c) yr[c] = 0;
                for (int m = 0; m < N; ++m) {
                    ar[m] /= sum;
                    const Real* vr = &V.at(gi, m, 0);
                    for (int c = 0; c < C; ++c) yr[c] += ar[m] * vr[c];
                }
            }
        }
        return make(std::move(out), {x, wq, wk, wv},
                    [x, wq, wk, wv, axis, C, groups, N, sc, Q, K, V, A](Graph& g) {
                        const auto& go = g.grad(g.cur_);
                        const auto& xv2 = g.val(x);
                        const auto& wqv2 = g.val(wq);
                        const auto& wkv2 = g.val(wk);
                        const auto& wvv2 = g.val(wv);
                        auto tok = [&](const Tensor<Real>& t, int gi, int n) -> const Real* {
                            return axis == 0 ? &t.at(gi, n, 0) : &t.at(n, gi, 0);
                        };
                        Tensor<Real> dQ({N, C}), dK({N, C}), dV({N, C});
                        std::vector<Real> dA(static_cast<std::size_t>(N));
                        std::vector<Real> dS(static_cast<std::size_t>(N));
                        for (int gi = 0; gi < groups; ++gi) {
                            dQ.zero();
                            dK.zero();
                            dV.zero();
                            for (int n = 0; n < N; ++n) {
                                const Real* gr = tok(go, gi, n);
                                const Real* ar = &A.at(gi, n, 0);
                                Real dot = 0;
                                for (int m = 0; m < N; ++m) {
                                    const Real* vr = &V.at(gi, m, 0);
                                    Real acc = 0;
                                    for (int c = 0; c < C; ++c) acc += gr[c] * vr[c];
                                    dA[static_cast<std::size_t>(m)] = acc;
                                    dot += ar[m] * acc;
                                    Real* dvr = &dV.at(m, 0);
                                    for (int c = 0; c < C; ++c) dvr[c] += ar[m] * gr[c];
                                }
                                for (int m = 0; m < N; ++m)
                                    dS[static_cast<std::size_t>(m)] =
                                        ar[m] * (dA[static_cast<std::size_t>(m)] - dot) * sc;
                                Real* dqr = &dQ.at(n, 0);
                                const Real* qr = &Q.at(gi, n, 0);
                                for (int m = 0; m < N; ++m) {
                                    const Real ds = dS[static_cast<std::size_t>(m)];
                                    if (ds == Real(0)) continue;
                                    const Real* kr = &K.at(gi, m, 0);
                                    Real* dkr = &dK.at(m, 0);
                                    for (int c = 0; c < C; ++c) {
                                        dqr[c] += ds * kr[c];
                                        dkr[c] += ds * qr[c];
                                    }
                                }
                            }
                            // Push dQ/dK/dV through the projections.
                            for (int n = 0; n < N; ++n) {
                                const Real* xr = tok(xv2, gi, n);
                                Real* gx = g.needs_grad(x)
                                               ? const_cast<Real*>(tok(g.grad(x), gi, n))
                                               : nullptr;
                                struct Proj {
                                    const Tensor<Real>* w;
                                    Tensor<Real>* d;
                                    Id wid;
                                };
                                const Proj projs[3] = {{&wqv2, &dQ, wq},
                                                       {&wkv2, &dK, wk},
                                                       {&wvv2, &dV, wv}};
                                for (const auto& pr : projs) {
                                    const Real* dr = &pr.d->at(n, 0);
                                    if (g.needs_grad(pr.wid)) {
                                        auto& gw = g.grad(pr.wid);
                                        for (int a = 0; a < C; ++a) {
                                            const Real dv = dr[a];
                                            if (dv == Real(0)) continue;
                                            Real* gwr = &gw.at(a, 0);
                                            for (int c = 0; c < C; ++c) gwr[c] += dv * xr[c];
                                        }
                                    }
                                    if (gx) {
                                        for (int a = 0; a < C; ++a) {
                                            const Real dv = dr[a];
                                            if (dv == Real(0)) continue;
                                            const Real* wr = &pr.w->at(a, 0);
                                            for (int c = 0; c < C; ++c) gx[c] += dv * wr[c];
                                        }
                                    }
                                }
                            }
                        }
                    });
    }

    // ---- backward ---------------------------------------------------------

    void backward(Id root) {
        check(val(root).numel() == 1, "backward: root must be scalar");
        auto& rn = nodes_[static_cast<std::size_t>(root)];
        if (!rn.needs) return;  // nothing trainable below the root
        rn.grad = Tensor<Real>::scalar(Real(1));
        for (Id i = root; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs || !n.back) continue;
            cur_ = i;
            n.back(*this);
        }
        for (auto& n : nodes_) {
            if (!n.bound || n.bound->frozen) continue;
            auto& g = n.bound->grad;
            for (long i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    }

private:
    static void axpy(std::vector<Real>& y, const std::vector<Real>& x, Real a) {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
    }

    Id make(Tensor<Real> value, const std::vector<Id>& parents,
            std::function<void(Graph&)> back) {
        Node n;
        n.value = std::move(value);
        for (Id p : parents)
            if (nodes_[static_cast<std::size_t>(p)].needs) n.needs = true;
        if (n.needs) {
            n.grad = Tensor<Real>(n.value.shape);
            n.back = std::move(back);
        }
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    Id cur_ = -1;
};

}  // namespace poet
