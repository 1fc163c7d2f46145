#include <catch2/catch_amalgamated.hpp>

#include "poet/backbone.hpp"
#include "test_util.hpp"

using namespace poet;
using Catch::Approx;

namespace {

SkeletonSequence make_sequence(int T, int J, Rng& rng, double lo = -1.0, double hi = 1.0) {
    SkeletonSequence s;
    s.frames = Tensor<double>({T, J, 3});
    for (auto& v : s.frames.v) v = rng.uniform(lo, hi);
    return s;
}

template <typename Real>
Backbone<Real> small_gcn(HeadKind head, int classes, Rng& rng,
                         std::vector<int> channels = {4, 6}) {
    BackboneConfig cfg;
    cfg.kind = BackboneKind::Gcn;
    cfg.layer_channels = std::move(channels);
    cfg.attach_after_layer = 1;
    Backbone<Real> model;
    model.init(cfg, SkeletonTopology::chain(3), head, classes, rng);
    return model;
}

}  // namespace

TEST_CASE("embedding has the benchmark shape at activity scale") {
    Rng rng(1);
    BackboneConfig cfg;
    cfg.kind = BackboneKind::Gcn;
    cfg.layer_channels = {64, 64, 128, 256};
    cfg.attach_after_layer = 1;
    Backbone<float> model;
    model.init(cfg, SkeletonTopology::chain(25), HeadKind::Cosine, 4, rng);
    CHECK(cfg.embed_dim() == 64);
    auto x = make_sequence(64, 25, rng);
    const auto emb = model.embed_value(x);
    CHECK(emb.shape == std::vector<int>{64, 25, 64});
    CHECK(emb.all_finite());
}

TEST_CASE("zero input with zero biases embeds to zero") {
    Rng rng(2);
    auto model = small_gcn<double>(HeadKind::Linear, 2, rng);
    SkeletonSequence x;
    x.frames = Tensor<double>({5, 3, 3});
    const auto emb = model.embed_value(x);
    for (double v : emb.v) CHECK(v == 0.0);
}

TEST_CASE("embedding is pure: identical inputs give identical outputs") {
    Rng rng(3);
    auto model = small_gcn<float>(HeadKind::Linear, 2, rng);
    auto x = make_sequence(6, 3, rng);
    CHECK(model.embed_value(x).v == model.embed_value(x).v);

    BackboneConfig gt_cfg;
    gt_cfg.kind = BackboneKind::GraphTransformer;
    gt_cfg.layer_channels = {4, 4};
    gt_cfg.attach_after_layer = 1;
    Backbone<float> gt;
    gt.init(gt_cfg, SkeletonTopology::chain(3), HeadKind::Linear, 2, rng);
    const auto e1 = gt.embed_value(x);
    CHECK(e1.shape == std::vector<int>{6, 3, 4});
    CHECK(e1.v == gt.embed_value(x).v);
}

TEST_CASE("embedding rejects a topology mismatch") {
    Rng rng(4);
    auto model = small_gcn<float>(HeadKind::Linear, 2, rng);
    auto x = make_sequence(6, 5, rng);
    Graph<float> g;
    CHECK_THROWS_AS(model.embed(g, x), ContractError);
}

TEST_CASE("cosine head: aligned feature yields logit eta") {
    Rng rng(5);
    auto model = small_gcn<double>(HeadKind::Cosine, 3, rng);
    const int D = model.head.feature_dim();
    Tensor<double> feat({D});
    for (int d = 0; d < D; ++d) feat[d] = 2.5 * model.head.weight.value.at(1, d);
    Graph<double> g;
    auto logits = model.head.logits(g, g.constant(feat));
    CHECK(g.val(logits)[1] == Approx(model.head.eta.value[0]).epsilon(1e-9));
}

TEST_CASE("cosine logits are invariant to positive rescaling") {
    Rng rng(6);
    auto model = small_gcn<double>(HeadKind::Cosine, 4, rng);
    const int D = model.head.feature_dim();
    for (int rep = 0; rep < 50; ++rep) {
        Tensor<double> feat({D});
        for (auto& v : feat.v) v = rng.uniform(-1.0, 1.0);
        const double scale = rng.uniform(0.01, 50.0);
        Tensor<double> scaled = feat;
        for (auto& v : scaled.v) v *= scale;
        Graph<double> g;
        const auto l1 = g.val(model.head.logits(g, g.constant(feat)));
        const auto l2 = g.val(model.head.logits(g, g.constant(scaled)));
        int a1 = 0, a2 = 0;
        for (int k = 0; k < 4; ++k) {
            CHECK(l1[k] == Approx(l2[k]).margin(1e-6));
            if (l1[k] > l1[a1]) a1 = k;
            if (l2[k] > l2[a2]) a2 = k;
        }
        CHECK(a1 == a2);
        // rescaling a weight row leaves its cosine logit unchanged too
        Graph<double> g2;
        auto wcopy = model.head.weight;
        for (int d = 0; d < D; ++d) wcopy.value.at(2, d) *= 7.0;
        auto logits = g2.cosine_rows(g2.constant(feat), g2.constant(wcopy.value));
        Graph<double> g3;
        auto base = g3.cosine_rows(g3.constant(feat), g3.constant(model.head.weight.value));
        CHECK(g2.val(logits)[2] == Approx(g3.val(base)[2]).margin(1e-9));
    }
}

TEST_CASE("cosine classifier gradients match finite differences") {
    Rng rng(7);
    // <= 8 parameters: 2 classes x 3 features + eta
    Param<double> w("w", {2, 3});
    w.init_uniform(rng, 0.2, 1.0);
    Param<double> eta("eta", {1});
    eta.value[0] = 4.0;
    Tensor<double> feat({3});
    testutil::fill_uniform(feat, rng, 0.2, 1.0);
    auto loss = [&](bool with_grad) {
        Graph<double> g;
        auto logits = g.scale_by(g.cosine_rows(g.constant(feat), g.param(w)), g.param(eta));
        auto root = g.cross_entropy(logits, 1);
        if (with_grad) g.backward(root);
        return static_cast<double>(g.val(root)[0]);
    };
    CHECK(testutil::max_rel_grad_error({&w, &eta}, loss) < 1e-4);
}

TEST_CASE("linear head on a 1x1 embedding is w*f + b") {
    Rng rng(8);
    BackboneConfig cfg;
    cfg.layer_channels = {4, 4};
    cfg.attach_after_layer = 1;
    Backbone<double> model;
    model.init(cfg, SkeletonTopology::chain(1), HeadKind::Linear, 3, rng);
    Tensor<double> feat({4});
    testutil::fill_uniform(feat, rng, -1.0, 1.0);
    Graph<double> g;
    const auto logits = g.val(model.head.logits(g, g.constant(feat)));
    for (int k = 0; k < 3; ++k) {
        double expect = model.head.bias.value[k];
        for (int d = 0; d < 4; ++d) expect += model.head.weight.value.at(k, d) * feat[d];
        CHECK(logits[k] == Approx(expect));
    }
}

TEST_CASE("one gcn block matches finite differences") {
    Rng rng(9);
    // 8 parameters: 2x1x3 conv weights + 2 biases
    const auto topo = SkeletonTopology::chain(2);
    const auto adj = topo.normalized_adjacency<double>();
    Param<double> w("w", {2, 1, 3});
    w.init_uniform(rng, -0.8, 0.8);
    Param<double> b("b", {2});
    b.init_uniform(rng, -0.2, 0.2);
    Tensor<double> x({3, 2, 1});
    testutil::fill_uniform(x, rng, 0.1, 1.0);
    auto loss = [&](bool with_grad) {
        Graph<double> g;
        auto h = g.relu(g.temporal_conv3(g.spatial_aggregate(g.constant(x), adj), g.param(w),
                                         g.param(b)));
        auto root = g.cross_entropy(g.reshape(h, {12}), 3);
        if (with_grad) g.backward(root);
        return static_cast<double>(g.val(root)[0]);
    };
    CHECK(testutil::max_rel_grad_error({&w, &b}, loss) < 1e-4);
}

TEST_CASE("classifier expansion: mean-initialized rows, verbatim old rows") {
    Rng rng(10);
    SECTION("two unit rows give the half-half mean") {
        auto model = small_gcn<double>(HeadKind::Linear, 2, rng, {2, 2});
        model.head.weight.value.at(0, 0) = 1.0;
        model.head.weight.value.at(0, 1) = 0.0;
        model.head.weight.value.at(1, 0) = 0.0;
        model.head.weight.value.at(1, 1) = 1.0;
        model.head.expand(1);
        CHECK(model.head.class_count() == 3);
        CHECK(model.head.weight.value.at(2, 0) == Approx(0.5));
        CHECK(model.head.weight.value.at(2, 1) == Approx(0.5));
    }
    SECTION("40 classes plus 5 keeps the first 40 bit-identical") {
        auto model = small_gcn<float>(HeadKind::Cosine, 40, rng);
        const auto before = model.head.weight.value;
        model.head.expand(5);
        CHECK(model.head.class_count() == 45);
        for (int k = 0; k < 40; ++k)
            for (int d = 0; d < model.head.feature_dim(); ++d)
                CHECK(model.head.weight.value.at(k, d) == before.at(k, d));
    }
    SECTION("two new rows on an 8-class head are both the old mean") {
        auto model = small_gcn<double>(HeadKind::Linear, 8, rng);
        const int D = model.head.feature_dim();
        std::vector<double> mean(static_cast<std::size_t>(D), 0.0);
        for (int k = 0; k < 8; ++k)
            for (int d = 0; d < D; ++d)
                mean[static_cast<std::size_t>(d)] += model.head.weight.value.at(k, d) / 8.0;
        model.head.expand(2);
        for (int n = 8; n < 10; ++n)
            for (int d = 0; d < D; ++d)
                CHECK(model.head.weight.value.at(n, d) ==
                      Approx(mean[static_cast<std::size_t>(d)]));
    }
    SECTION("zero new classes is a contract violation") {
        auto model = small_gcn<double>(HeadKind::Linear, 2, rng, {2, 2});
        CHECK_THROWS_AS(model.head.expand(0), ContractError);
    }
}

TEST_CASE("freeze policy pins features, eta, and old rows") {
    Rng rng(11);
    auto model = small_gcn<double>(HeadKind::LinearFrozenOld, 3, rng);
    auto x = make_sequence(5, 3, rng);
    apply_freeze_policy(model, 1);
    model.head.expand(2);

    const auto feature_snapshot = model.gcn_blocks[1].conv_w.value;
    const auto old_rows_snapshot = model.head.weight.value;

    for (int step = 0; step < 30; ++step) {
        Graph<double> g;
        auto x_e = model.embed(g, x);
        auto logits = model.extract_and_classify(g, x_e);
        auto root = g.cross_entropy(logits, 4);
        g.backward(root);
        model.head.mask_frozen_row_grads();
        for (auto* p : model.params()) {
            if (p->frozen) continue;
            for (long i = 0; i < p->value.numel(); ++i) p->value[i] -= 0.05 * p->grad[i];
            p->zero_grad();
        }
    }
    // f_g parameters bit-identical
    CHECK(model.gcn_blocks[1].conv_w.value.v == feature_snapshot.v);
    // frozen-old rows bit-identical, new rows moved
    for (int k = 0; k < 3; ++k)
        for (int d = 0; d < model.head.feature_dim(); ++d)
            CHECK(model.head.weight.value.at(k, d) == old_rows_snapshot.at(k, d));
    bool new_moved = false;
    for (int k = 3; k < 5; ++k)
        for (int d = 0; d < model.head.feature_dim(); ++d)
            new_moved = new_moved ||
                        model.head.weight.value.at(k, d) != old_rows_snapshot.at(k, d);
    CHECK(new_moved);
}

TEST_CASE("graph transformer block gradients") {
    Rng rng(12);
    BackboneConfig cfg;
    cfg.kind = BackboneKind::GraphTransformer;
    cfg.layer_channels = {3, 3};
    cfg.attach_after_layer = 1;
    Backbone<double> model;
    model.init(cfg, SkeletonTopology::chain(2), HeadKind::Linear, 2, rng);
    Rng data_rng(13);
    auto x = make_sequence(3, 2, data_rng);
    auto loss = [&](bool with_grad) {
        Graph<double> g;
        auto x_e = model.embed(g, x);
        auto root = g.cross_entropy(model.extract_and_classify(g, x_e), 1);
        if (with_grad) g.backward(root);
        return static_cast<double>(g.val(root)[0]);
    };
    std::vector<Param<double>*> params = model.params();
    for (auto* p : params) p->zero_grad();
    CHECK(testutil::max_rel_grad_error(params, loss) < 1e-4);
}

TEST_CASE("backbone config validation") {
    BackboneConfig cfg;
    cfg.layer_channels = {8};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.layer_channels = {8, 8};
    cfg.attach_after_layer = 2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.attach_after_layer = 1;
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.dropout = 0.0;
    cfg.kind = BackboneKind::GraphTransformer;
    cfg.layer_channels = {8, 16};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
