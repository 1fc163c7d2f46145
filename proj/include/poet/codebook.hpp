#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "poet/autodiff.hpp"
#include "poet/backbone.hpp"
#include "poet/common.hpp"
#include "poet/tensor.hpp"

namespace poet {

// Result of matching one query against the key set.
struct OrderedSelection {
    std::vector<int> order;     // 0-based prompt indices, one per selected slot
    std::vector<double> gamma;  // cosine similarity per key, all M of them
};

// Index selection shared by training and evaluation. Descending similarity,
// ties broken by ascending index; with `sorted_order` false the chosen set
// keeps its default ascending-index sequence.
inline std::vector<int> select_order(const std::vector<double>& gamma, int count,
                                     bool sorted_order) {
    const int M = static_cast<int>(gamma.size());
    check(count >= 1 && count <= M, "select_order: count must be in [1, M]");
    std::vector<int> idx(static_cast<std::size_t>(M));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return gamma[static_cast<std::size_t>(a)] > gamma[static_cast<std::size_t>(b)];
    });
    idx.resize(static_cast<std::size_t>(count));
    if (!sorted_order) std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::string order_to_string(const std::vector<int>& order) {
    std::string s;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(order[i] + 1);  // exported indices are 1-based
    }
    return s;
}

enum class AttachMode { Add, ConcatTemporal, ConcatFeature, CrossAttention, AddSingle };

inline AttachMode attach_mode_from(const std::string& s) {
    if (s == "add") return AttachMode::Add;
    if (s == "concat-temporal") return AttachMode::ConcatTemporal;
    if (s == "concat-feature") return AttachMode::ConcatFeature;
    if (s == "cross-attention") return AttachMode::CrossAttention;
    if (s == "add-single") return AttachMode::AddSingle;
    throw ConfigError("unknown attachment mode '" + s + "'");
}

inline std::string to_string(AttachMode m) {
    switch (m) {
        case AttachMode::Add: return "add";
        case AttachMode::ConcatTemporal: return "concat-temporal";
        case AttachMode::ConcatFeature: return "concat-feature";
        case AttachMode::CrossAttention: return "cross-attention";
        case AttachMode::AddSingle: return "add-single";
    }
    return "?";
}

// Attachment operator f_p. The concat variants own a learned remap back to
// the embedding shape; those weights train with the prompt parameters.
template <typename Real>
struct AttachOperator {
    AttachMode mode = AttachMode::Add;
    Param<Real> remap_w;  // concat-temporal: Tx2T, concat-feature: Cx2C

    void init(AttachMode m, int frames, int embed_dim, Rng& rng) {
        mode = m;
        if (mode == AttachMode::ConcatTemporal) {
            remap_w = Param<Real>("attach.remap_w", {frames, 2 * frames});
            remap_w.init_fan_in(rng, 2 * frames);
        } else if (mode == AttachMode::ConcatFeature) {
            remap_w = Param<Real>("attach.remap_w", {embed_dim, 2 * embed_dim});
            remap_w.init_fan_in(rng, 2 * embed_dim);
        }
    }

    // Number of prompt slots this operator consumes for a T-frame input.
    int slots(int frames) const { return mode == AttachMode::AddSingle ? 1 : frames; }

    typename Graph<Real>::Id apply(Graph<Real>& g, typename Graph<Real>::Id x_e,
                                   typename Graph<Real>::Id prompts) {
        const auto& xs = g.val(x_e);
        const auto& ps = g.val(prompts);
        check(xs.rank() == 3 && ps.rank() == 3 && xs.dim(1) == ps.dim(1) &&
                  xs.dim(2) == ps.dim(2),
              "attach: embedding " + xs.shape_str() + " and prompts " + ps.shape_str() +
                  " are incompatible");
        switch (mode) {
            case AttachMode::Add:
                check(ps.dim(0) == xs.dim(0), "attach: add needs one prompt per frame");
                return g.add(x_e, prompts);
            case AttachMode::AddSingle: {
                check(ps.dim(0) == 1, "attach: add-single expects one prompt frame");
                // same prompt frame added to every input embedding frame
                auto frame_id = g.reshape(prompts, {ps.dim(1), ps.dim(2)});
                return g.add_frame(x_e, frame_id);
            }
            case AttachMode::ConcatTemporal: {
                check(ps.dim(0) == xs.dim(0), "attach: concat-temporal needs T prompts");
                auto cat = g.concat_time(x_e, prompts);
                return g.temporal_remap(cat, g.param(remap_w));
            }
            case AttachMode::ConcatFeature: {
                check(ps.dim(0) == xs.dim(0), "attach: concat-feature needs T prompts");
                auto cat = g.concat_feature(x_e, prompts);
                return g.linear(cat, g.param(remap_w), -1);
            }
            case AttachMode::CrossAttention:
                return g.cross_attend_add(x_e, prompts);
        }
        throw ContractError("attach: unreachable");
    }

    std::vector<Param<Real>*> params() {
        if (mode == AttachMode::ConcatTemporal || mode == AttachMode::ConcatFeature)
            return {&remap_w};
        return {};
    }
};

// The prompt codebook: pool P (M prompts of J x C_e), bijectively paired keys
// K (M x C_e), and the query function f_QA o f_g' o f_e' whose feature layers
// stay frozen after construction.
template <typename Real>
struct PromptCodebook {
    Param<Real> pool;  // M x J x C_e
    Param<Real> keys;  // M x C_e
    Param<Real> qa_w;  // C_e x D_query
    Param<Real> qa_b;  // C_e
    Backbone<Real> query_backbone;  // frozen copy of the base backbone
    int frozen_prompts = 0;   // pool rows [0, frozen_prompts) are immutable
    int new_block_start = 0;  // start of the newest expansion block; == size() if none

    int size() const { return pool.value.dim(0); }
    int joint_count() const { return pool.value.dim(1); }
    int embed_dim() const { return pool.value.dim(2); }
    bool has_new_block() const { return new_block_start < size(); }

    // Prompts and keys start from U(0,1); the adaptor is fan-in initialized.
    void init(const Backbone<Real>& base_model, int prompt_count, Rng& rng) {
        const int J = base_model.topology.joint_count;
        const int ce = base_model.config.embed_dim();
        const int dq = base_model.config.feature_dim();
        pool = Param<Real>("codebook.pool", {prompt_count, J, ce});
        keys = Param<Real>("codebook.keys", {prompt_count, ce});
        pool.init_uniform(rng, 0.0, 1.0);
        keys.init_uniform(rng, 0.0, 1.0);
        qa_w = Param<Real>("codebook.qa_w", {ce, dq});
        qa_b = Param<Real>("codebook.qa_b", {ce});
        qa_w.init_fan_in(rng, dq);
        frozen_prompts = 0;
        new_block_start = prompt_count;

        query_backbone = base_model;
        query_backbone.set_feature_frozen(true);
        // The classifier of the copy is never used; drop its gradients' role.
        for (auto* p : query_backbone.head.params()) p->frozen = true;
    }

    // q = f_QA(pool(f_g'(f_e'(x)))), a single C_e vector.
    typename Graph<Real>::Id query(Graph<Real>& g, const SkeletonSequence& x) {
        auto h = query_backbone.embed(g, x);
        auto feat = query_backbone.extract(g, h);
        check(g.val(feat).dim(0) == qa_w.value.dim(1),
              "query: adaptor expects width " + std::to_string(qa_w.value.dim(1)) +
                  ", feature has " + std::to_string(g.val(feat).dim(0)));
        return g.linear(feat, g.param(qa_w), g.param(qa_b));
    }

    Tensor<Real> query_value(const SkeletonSequence& x) {
        Graph<Real> g;
        return g.val(query(g, x));
    }

    // Ordered top-`count` selection against the full key set. When an
    // expansion block is pending, the leading count-R slots are the ordered
    // top of the pre-expansion keys and the R new indices occupy the final
    // positions, matching the order-preserving expansion rule.
    OrderedSelection select(const std::vector<double>& gamma, int count,
                            bool sorted_order) const {
        check(static_cast<int>(gamma.size()) == size(), "select: gamma size mismatch");
        OrderedSelection sel;
        sel.gamma = gamma;
        if (has_new_block()) {
            const int fresh = size() - new_block_start;
            check(count > fresh, "select: selection shorter than the expansion block");
            std::vector<double> old_gamma(gamma.begin(), gamma.begin() + new_block_start);
            sel.order = select_order(old_gamma, count - fresh, sorted_order);
            for (int i = new_block_start; i < size(); ++i) sel.order.push_back(i);
        } else {
            sel.order = select_order(gamma, count, sorted_order);
        }
        return sel;
    }

    OrderedSelection ordered_select(const SkeletonSequence& x, int count,
                                    bool sorted_order = true) {
        Graph<Real> g;
        auto q = query(g, x);
        auto gid = g.cosine_rows(q, g.param(keys));
        std::vector<double> gamma(g.val(gid).v.begin(), g.val(gid).v.end());
        return select(gamma, count, sorted_order);
    }

    // Append R prompts drawn from U(0,1); new keys start at the mean of the
    // existing keys; everything already in the pool freezes.
    void expand(int extra, Rng& rng) {
        if (extra < 1) throw ContractError("expand_pool: need at least one new prompt");
        const int M = size(), J = joint_count(), ce = embed_dim();
        Tensor<Real> p({M + extra, J, ce});
        std::copy(pool.value.v.begin(), pool.value.v.end(), p.v.begin());
        for (long i = pool.value.numel(); i < p.numel(); ++i)
            p[i] = static_cast<Real>(rng.uniform(0.0, 1.0));
        pool.value = std::move(p);
        pool.grad = Tensor<Real>(pool.value.shape);

        Tensor<Real> k({M + extra, ce});
        std::copy(keys.value.v.begin(), keys.value.v.end(), k.v.begin());
        std::vector<Real> mean(static_cast<std::size_t>(ce), Real(0));
        for (int m = 0; m < M; ++m)
            for (int c = 0; c < ce; ++c) mean[static_cast<std::size_t>(c)] += keys.value.at(m, c);
        for (auto& x : mean) x /= static_cast<Real>(M);
        for (int e = 0; e < extra; ++e)
            for (int c = 0; c < ce; ++c) k.at(M + e, c) = mean[static_cast<std::size_t>(c)];
        keys.value = std::move(k);
        keys.grad = Tensor<Real>(keys.value.shape);

        frozen_prompts = M;
        new_block_start = M;
    }

    // Zero gradients of frozen pool rows before an update.
    void mask_frozen_prompt_grads() {
        if (frozen_prompts <= 0) return;
        const long slot = static_cast<long>(joint_count()) * embed_dim();
        std::fill(pool.grad.v.begin(), pool.grad.v.begin() + frozen_prompts * slot, Real(0));
    }

    std::vector<Param<Real>*> prompt_params() { return {&pool}; }
    std::vector<Param<Real>*> key_params() { return {&keys}; }
    std::vector<Param<Real>*> adaptor_params() { return {&qa_w, &qa_b}; }
};

// -lambda * sum of the selected similarities; minimizing it moves the query
// toward its aligned keys. Gradients reach keys and adaptor only, by
// construction of the similarity graph.
template <typename Real>
typename Graph<Real>::Id clustering_loss(Graph<Real>& g, typename Graph<Real>::Id gamma,
                                         const std::vector<int>& order, double lambda) {
    check(lambda >= 0, "clustering_loss: lambda must be >= 0");
    return g.scale(g.sum_subset(gamma, order), static_cast<Real>(-lambda));
}

// ---- selection diagnostics -------------------------------------------------

struct CollapseReport {
    int pool_size = 0;
    int slots = 0;
    Tensor<long> order_matrix;        // [index][position] counts (0-based)
    std::vector<long> usage;          // total count per index
    std::vector<int> unused;          // indices never selected (0-based)
    std::vector<double> entropy;      // per-index entropy over positions (nats)
    double mean_entropy = 0;
};

inline CollapseReport collapse_diagnostics(const std::vector<OrderedSelection>& log) {
    check(!log.empty(), "collapse_diagnostics: empty selection log");
    int M = 0, T = 0;
    for (const auto& s : log) {
        M = std::max(M, static_cast<int>(s.gamma.size()));
        T = std::max(T, static_cast<int>(s.order.size()));
    }
    CollapseReport r;
    r.pool_size = M;
    r.slots = T;
    r.order_matrix = Tensor<long>({M, T});
    r.usage.assign(static_cast<std::size_t>(M), 0);
    for (const auto& s : log)
        for (std::size_t pos = 0; pos < s.order.size(); ++pos) {
            const int idx = s.order[pos];
            ++r.order_matrix.at(idx, static_cast<int>(pos));
            ++r.usage[static_cast<std::size_t>(idx)];
        }
    double esum = 0;
    int eused = 0;
    for (int m = 0; m < M; ++m) {
        if (r.usage[static_cast<std::size_t>(m)] == 0) {
            r.unused.push_back(m);
            r.entropy.push_back(0);
            continue;
        }
        double h = 0;
        const double tot = static_cast<double>(r.usage[static_cast<std::size_t>(m)]);
        for (int p = 0; p < T; ++p) {
            const long c = r.order_matrix.at(m, p);
            if (c == 0) continue;
            const double q = static_cast<double>(c) / tot;
            h -= q * std::log(q);
        }
        r.entropy.push_back(h);
        esum += h;
        ++eused;
    }
    r.mean_entropy = eused ? esum / eused : 0;
    return r;
}

}  // namespace poet
