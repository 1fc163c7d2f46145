#pragma once

#include <memory>
#include <string>
#include <vector>

#include "poet/autodiff.hpp"
#include "poet/common.hpp"
#include "poet/data.hpp"
#include "poet/tensor.hpp"
#include "poet/topology.hpp"

namespace poet {

enum class BackboneKind { Gcn, GraphTransformer };
enum class HeadKind { Linear, LinearFrozenOld, Cosine };

inline BackboneKind backbone_kind_from(const std::string& s) {
    if (s == "gcn") return BackboneKind::Gcn;
    if (s == "graph-transformer") return BackboneKind::GraphTransformer;
    throw ConfigError("unknown backbone kind '" + s + "'");
}

inline HeadKind head_kind_from(const std::string& s) {
    if (s == "linear") return HeadKind::Linear;
    if (s == "linear-frozen-old") return HeadKind::LinearFrozenOld;
    if (s == "cosine") return HeadKind::Cosine;
    throw ConfigError("unknown classifier head kind '" + s + "'");
}

struct BackboneConfig {
    BackboneKind kind = BackboneKind::Gcn;
    std::vector<int> layer_channels = {64, 64, 128, 256};
    int attach_after_layer = 1;  // f_e = layers 1..attach_after_layer
    double dropout = 0.0;

    int layers() const { return static_cast<int>(layer_channels.size()); }

    int embed_dim() const {  // C_e: channel width at the split point
        return layer_channels[static_cast<std::size_t>(attach_after_layer - 1)];
    }

    int feature_dim() const { return layer_channels.back(); }

    void validate() const {
        if (layer_channels.size() < 2)
            throw ConfigError("backbone: need at least 2 layers (split point must be interior)");
        for (int c : layer_channels)
            if (c < 1) throw ConfigError("backbone: layer channels must be >= 1");
        if (attach_after_layer < 1 || attach_after_layer >= layers())
            throw ConfigError("backbone: attach_after_layer must be in [1, layers)");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("backbone: dropout must be in [0, 1)");
        if (kind == BackboneKind::GraphTransformer) {
            for (int c : layer_channels)
                if (c != layer_channels[0])
                    throw ConfigError(
                        "backbone: graph-transformer uses a constant feature width");
        }
    }
};

// Forward-time context: null rng or zero rate means evaluation behaviour.
struct ForwardOptions {
    Rng* dropout_rng = nullptr;
    double dropout = 0.0;
};

namespace detail {

template <typename Real>
typename Graph<Real>::Id maybe_dropout(Graph<Real>& g, typename Graph<Real>::Id x,
                                       const ForwardOptions& opt) {
    if (!opt.dropout_rng || opt.dropout <= 0.0) return x;
    std::vector<char> mask(static_cast<std::size_t>(g.val(x).numel()));
    for (auto& m : mask) m = opt.dropout_rng->uniform() >= opt.dropout;
    return g.dropout(x, mask, static_cast<Real>(1.0 - opt.dropout));
}

}  // namespace detail

// Aggregate over the normalized adjacency, temporal conv (kernel 3), relu.
template <typename Real>
struct GcnBlock {
    Param<Real> conv_w;  // Co x Ci x 3
    Param<Real> conv_b;  // Co

    void init(const std::string& name, int in_ch, int out_ch, Rng& rng) {
        conv_w = Param<Real>(name + ".conv_w", {out_ch, in_ch, 3});
        conv_b = Param<Real>(name + ".conv_b", {out_ch});
        conv_w.init_fan_in(rng, in_ch * 3);
    }

    typename Graph<Real>::Id forward(Graph<Real>& g, typename Graph<Real>::Id x,
                                     const Tensor<Real>& adj, const ForwardOptions& opt) {
        auto h = g.spatial_aggregate(x, adj);
        h = g.temporal_conv3(h, g.param(conv_w), g.param(conv_b));
        h = g.relu(h);
        return detail::maybe_dropout(g, h, opt);
    }

    std::vector<Param<Real>*> params() { return {&conv_w, &conv_b}; }
};

// Per-frame spatial self-attention then per-joint temporal self-attention,
// both residual, relu on the way out. Width stays constant.
template <typename Real>
struct GtBlock {
    Param<Real> sq, sk, sv;  // spatial projections, CxC
    Param<Real> tq, tk, tv;  // temporal projections, CxC

    void init(const std::string& name, int ch, Rng& rng) {
        for (auto [p, tag] : {std::pair<Param<Real>*, const char*>{&sq, ".sq"},
                              {&sk, ".sk"},
                              {&sv, ".sv"},
                              {&tq, ".tq"},
                              {&tk, ".tk"},
                              {&tv, ".tv"}}) {
            *p = Param<Real>(name + tag, {ch, ch});
            p->init_fan_in(rng, ch);
        }
    }

    typename Graph<Real>::Id forward(Graph<Real>& g, typename Graph<Real>::Id x,
                                     const ForwardOptions& opt) {
        auto s = g.self_attention(x, g.param(sq), g.param(sk), g.param(sv), 0);
        s = detail::maybe_dropout(g, s, opt);
        auto h = g.add(x, s);
        auto t = g.self_attention(h, g.param(tq), g.param(tk), g.param(tv), 1);
        t = detail::maybe_dropout(g, t, opt);
        return g.relu(g.add(h, t));
    }

    std::vector<Param<Real>*> params() {
        return {&sq, &sk, &sv, &tq, &tk, &tv};
    }
};

// Classifier over the pooled feature. Rows grow as sessions add classes.
template <typename Real>
struct ClassifierHead {
    HeadKind kind = HeadKind::Linear;
    Param<Real> weight;  // K x D
    Param<Real> bias;    // K (linear kinds only)
    Param<Real> eta;     // scalar scale (cosine only)
    int frozen_rows = 0;  // rows whose gradients are zeroed before updates

    void init(HeadKind k, int classes, int feat_dim, Rng& rng) {
        kind = k;
        frozen_rows = 0;
        weight = Param<Real>("head.weight", {classes, feat_dim});
        weight.init_fan_in(rng, feat_dim);
        if (kind == HeadKind::Cosine) {
            eta = Param<Real>("head.eta", {1});
            eta.value[0] = Real(10);
        } else {
            bias = Param<Real>("head.bias", {classes});
        }
    }

    int class_count() const { return weight.value.dim(0); }
    int feature_dim() const { return weight.value.dim(1); }

    typename Graph<Real>::Id logits(Graph<Real>& g, typename Graph<Real>::Id feature) {
        check(g.val(feature).rank() == 1 && g.val(feature).dim(0) == feature_dim(),
              "classifier: feature width " + g.val(feature).shape_str() + " does not match " +
                  std::to_string(feature_dim()));
        if (kind == HeadKind::Cosine)
            return g.scale_by(g.cosine_rows(feature, g.param(weight)), g.param(eta));
        return g.linear(feature, g.param(weight), g.param(bias));
    }

    // Copy old rows verbatim, init each new row to the mean of the old ones.
    void expand(int new_classes) {
        if (new_classes < 1) throw ContractError("expand_classifier: need at least one class");
        const int K = class_count(), D = feature_dim();
        Tensor<Real> w({K + new_classes, D});
        std::copy(weight.value.v.begin(), weight.value.v.end(), w.v.begin());
        std::vector<Real> mean_row(static_cast<std::size_t>(D), Real(0));
        for (int k = 0; k < K; ++k)
            for (int d = 0; d < D; ++d)
                mean_row[static_cast<std::size_t>(d)] += weight.value.at(k, d);
        for (auto& m : mean_row) m /= static_cast<Real>(K);
        for (int n = 0; n < new_classes; ++n)
            for (int d = 0; d < D; ++d)
                w.at(K + n, d) = mean_row[static_cast<std::size_t>(d)];
        weight.value = std::move(w);
        weight.grad = Tensor<Real>(weight.value.shape);
        if (kind != HeadKind::Cosine) {
            Tensor<Real> b({K + new_classes});
            std::copy(bias.value.v.begin(), bias.value.v.end(), b.v.begin());
            Real mean_b = 0;
            for (int k = 0; k < K; ++k) mean_b += bias.value[k];
            mean_b /= static_cast<Real>(K);
            for (int n = 0; n < new_classes; ++n) b[K + n] = mean_b;
            bias.value = std::move(b);
            bias.grad = Tensor<Real>(bias.value.shape);
        }
    }

    // For the frozen-old policy: zero gradient contributions to pre-existing
    // rows before every optimizer step.
    void mask_frozen_row_grads() {
        if (frozen_rows <= 0) return;
        const int D = feature_dim();
        for (int k = 0; k < frozen_rows && k < class_count(); ++k)
            for (int d = 0; d < D; ++d) weight.grad.at(k, d) = Real(0);
        if (kind != HeadKind::Cosine)
            for (int k = 0; k < frozen_rows && k < class_count(); ++k)
                bias.grad[k] = Real(0);
    }

    std::vector<Param<Real>*> params() {
        std::vector<Param<Real>*> ps = {&weight};
        if (kind == HeadKind::Cosine)
            ps.push_back(&eta);
        else
            ps.push_back(&bias);
        return ps;
    }
};

// f_c o f_g o f_e with a configurable split point: embed() runs layers up to
// and including attach_after_layer, extract() the rest plus global mean
// pooling.
template <typename Real>
struct Backbone {
    BackboneConfig config;
    SkeletonTopology topology;
    Tensor<Real> adj;  // normalized adjacency (gcn)
    Param<Real> embed_w, embed_b;  // graph-transformer input embedding
    std::vector<GcnBlock<Real>> gcn_blocks;
    std::vector<GtBlock<Real>> gt_blocks;
    ClassifierHead<Real> head;

    void init(const BackboneConfig& cfg, const SkeletonTopology& topo, HeadKind head_kind,
              int classes, Rng& rng) {
        cfg.validate();
        topo.validate();
        config = cfg;
        topology = topo;
        if (cfg.kind == BackboneKind::Gcn) {
            adj = topo.normalized_adjacency<Real>();
            gcn_blocks.resize(static_cast<std::size_t>(cfg.layers()));
            int in_ch = 3;
            for (int l = 0; l < cfg.layers(); ++l) {
                const int out_ch = cfg.layer_channels[static_cast<std::size_t>(l)];
                gcn_blocks[static_cast<std::size_t>(l)].init(
                    "backbone.block" + std::to_string(l), in_ch, out_ch, rng);
                in_ch = out_ch;
            }
        } else {
            const int ch = cfg.layer_channels[0];
            embed_w = Param<Real>("backbone.embed_w", {ch, 3});
            embed_b = Param<Real>("backbone.embed_b", {ch});
            embed_w.init_fan_in(rng, 3);
            // layer 1 is the input embedding; remaining layers are attention blocks
            gt_blocks.resize(static_cast<std::size_t>(cfg.layers() - 1));
            for (std::size_t l = 0; l < gt_blocks.size(); ++l)
                gt_blocks[l].init("backbone.block" + std::to_string(l + 1), ch, rng);
        }
        head.init(head_kind, classes, cfg.feature_dim(), rng);
    }

    typename Graph<Real>::Id input_node(Graph<Real>& g, const SkeletonSequence& x) const {
        check(x.joint_count() == topology.joint_count,
              "backbone: sequence has " + std::to_string(x.joint_count()) +
                  " joints, topology expects " + std::to_string(topology.joint_count));
        return g.constant(x.frames.template cast<Real>());
    }

    // Layers [from, to) counted in 1-based "layer" units.
    typename Graph<Real>::Id run_layers(Graph<Real>& g, typename Graph<Real>::Id h, int from,
                                        int to, const ForwardOptions& opt) {
        if (config.kind == BackboneKind::Gcn) {
            for (int l = from; l < to; ++l)
                h = gcn_blocks[static_cast<std::size_t>(l)].forward(g, h, adj, opt);
        } else {
            for (int l = from; l < to; ++l) {
                if (l == 0) {
                    h = g.relu(g.linear(h, g.param(embed_w), g.param(embed_b)));
                    h = detail::maybe_dropout(g, h, opt);
                } else {
                    h = gt_blocks[static_cast<std::size_t>(l - 1)].forward(g, h, opt);
                }
            }
        }
        return h;
    }

    // f_e: T x J x 3 -> T x J x C_e
    typename Graph<Real>::Id embed(Graph<Real>& g, const SkeletonSequence& x,
                                   const ForwardOptions& opt = {}) {
        return run_layers(g, input_node(g, x), 0, config.attach_after_layer, opt);
    }

    // f_g + pooling: T x J x C_e -> feature vector
    typename Graph<Real>::Id extract(Graph<Real>& g, typename Graph<Real>::Id x_e,
                                     const ForwardOptions& opt = {}) {
        check(g.val(x_e).rank() == 3 && g.val(x_e).dim(2) == config.embed_dim(),
              "extract: embedding width mismatch");
        check(g.val(x_e).all_finite(), "extract: embedding must be finite");
        auto h = run_layers(g, x_e, config.attach_after_layer, config.layers(), opt);
        return g.mean_pool(h);
    }

    typename Graph<Real>::Id extract_and_classify(Graph<Real>& g,
                                                  typename Graph<Real>::Id x_e,
                                                  const ForwardOptions& opt = {}) {
        return head.logits(g, extract(g, x_e, opt));
    }

    // Convenience value-level embedding (no gradients).
    Tensor<Real> embed_value(const SkeletonSequence& x) {
        Graph<Real> g;
        return g.val(embed(g, x));
    }

    std::vector<Param<Real>*> feature_params() {
        std::vector<Param<Real>*> ps;
        if (config.kind == BackboneKind::GraphTransformer) {
            ps.push_back(&embed_w);
            ps.push_back(&embed_b);
        }
        for (auto& b : gcn_blocks)
            for (auto* p : b.params()) ps.push_back(p);
        for (auto& b : gt_blocks)
            for (auto* p : b.params()) ps.push_back(p);
        return ps;
    }

    std::vector<Param<Real>*> params() {
        auto ps = feature_params();
        for (auto* p : head.params()) ps.push_back(p);
        return ps;
    }

    void set_feature_frozen(bool frozen) {
        for (auto* p : feature_params()) p->frozen = frozen;
    }
};

// Session-time freeze rules: the feature extractor is frozen, the cosine
// scale stops adapting, and the frozen-old head zeroes old-row gradients.
// Call before expanding the classifier so that only pre-existing rows freeze.
template <typename Real>
inline void apply_freeze_policy(Backbone<Real>& model, int session_index) {
    check(session_index >= 1, "apply_freeze_policy: session index must be >= 1");
    model.set_feature_frozen(true);
    if (model.head.kind == HeadKind::Cosine) model.head.eta.frozen = true;
    if (model.head.kind == HeadKind::LinearFrozenOld)
        model.head.frozen_rows = model.head.class_count();
}

}  // namespace poet
