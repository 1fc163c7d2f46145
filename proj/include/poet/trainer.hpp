#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "poet/backbone.hpp"
#include "poet/codebook.hpp"
#include "poet/common.hpp"
#include "poet/data.hpp"
#include "poet/metrics.hpp"

namespace poet {

enum class TrainMethod { Poet, Ft, Fe, FeFrozen };
enum class PoolMode { Fixed, Expand };

inline TrainMethod train_method_from(const std::string& s) {
    if (s == "poet") return TrainMethod::Poet;
    if (s == "ft") return TrainMethod::Ft;
    if (s == "fe") return TrainMethod::Fe;
    if (s == "fe-frozen") return TrainMethod::FeFrozen;
    throw ConfigError("unknown training method '" + s + "'");
}

inline std::string to_string(TrainMethod m) {
    switch (m) {
        case TrainMethod::Poet: return "poet";
        case TrainMethod::Ft: return "ft";
        case TrainMethod::Fe: return "fe";
        case TrainMethod::FeFrozen: return "fe-frozen";
    }
    return "?";
}

struct TrainConfig {
    TrainMethod method = TrainMethod::Poet;
    HeadKind head = HeadKind::Cosine;
    PoolMode pool_mode = PoolMode::Fixed;
    int expand_prompts = 0;  // R, expand mode only
    AttachMode attachment = AttachMode::Add;
    bool sorting = true;
    bool coupled = true;
    bool clustering = true;
    bool qa_update = true;
    double lambda = 0.1;
    // Base session: backbone-only pretraining, then joint prompted training.
    // Promptless methods spend both budgets on plain training.
    int pretrain_epochs = 20;
    double pretrain_lr = 0.0;  // 0: use base_lr
    int base_epochs = 15;
    double base_lr = 0.05;
    int base_batch = 32;
    int session_epochs = 30;
    double session_lr = 0.01;
    int session_batch = 0;  // 0: whole session in one batch (ways * shots)
    double adaptor_lr = 0.01;
    std::uint64_t seed = 1;

    void validate(int frames) const {
        if (lambda < 0) throw ConfigError("train.lambda must be >= 0");
        if (pretrain_epochs < 0 || base_epochs < 0 || session_epochs < 0)
            throw ConfigError("train: epoch counts must be >= 0");
        if (base_lr <= 0 || session_lr <= 0 || adaptor_lr <= 0 || pretrain_lr < 0)
            throw ConfigError("train: learning rates must be positive");
        if (base_batch < 1) throw ConfigError("train.base_batch must be >= 1");
        if (session_batch < 0) throw ConfigError("train.session_batch must be >= 0");
        if (pool_mode == PoolMode::Expand) {
            if (expand_prompts < 1)
                throw ConfigError("train.expand_prompts must be >= 1 in expand mode");
            if (attachment == AttachMode::AddSingle)
                throw ConfigError("train: expand mode needs a selection longer than R");
            if (expand_prompts >= frames)
                throw ConfigError("train.expand_prompts must be smaller than the frame count");
        }
    }
};

// One logged training-time selection.
struct SelectionRecord {
    int session = 0;
    int step = 0;
    int sample_index = 0;
    std::vector<int> order;  // 0-based
};

using TraceSink = std::function<void(const std::string&)>;

template <typename Real>
struct ContinualState {
    BackboneConfig model_config;
    TrainConfig train;
    SkeletonTopology topology;
    int frames = 0;

    Backbone<Real> model;
    std::optional<PromptCodebook<Real>> codebook;
    AttachOperator<Real> attach;

    ContinualProtocol protocol;
    std::vector<int> row_classes;  // classifier row -> class id
    int completed_session = -1;
    AccuracyHistory history;

    bool has_prompts() const { return codebook.has_value(); }

    int row_of(int class_id) const {
        for (std::size_t i = 0; i < row_classes.size(); ++i)
            if (row_classes[i] == class_id) return static_cast<int>(i);
        throw ContractError("unknown class id " + std::to_string(class_id));
    }

    // Every trainable tensor in a stable order (checkpoint layout).
    std::vector<Param<Real>*> all_params() {
        auto ps = model.params();
        if (codebook) {
            ps.push_back(&codebook->pool);
            ps.push_back(&codebook->keys);
            ps.push_back(&codebook->qa_w);
            ps.push_back(&codebook->qa_b);
            for (auto* p : codebook->query_backbone.params()) ps.push_back(p);
        }
        for (auto* p : attach.params()) ps.push_back(p);
        return ps;
    }

    // Group-prefixed unique names (the main model and the query backbone copy
    // share parameter names).
    std::vector<std::pair<std::string, Param<Real>*>> named_params() {
        std::vector<std::pair<std::string, Param<Real>*>> out;
        for (auto* p : model.params()) out.emplace_back("main." + p->name, p);
        if (codebook) {
            out.emplace_back("main." + codebook->pool.name, &codebook->pool);
            out.emplace_back("main." + codebook->keys.name, &codebook->keys);
            out.emplace_back("main." + codebook->qa_w.name, &codebook->qa_w);
            out.emplace_back("main." + codebook->qa_b.name, &codebook->qa_b);
            for (auto* p : codebook->query_backbone.params())
                out.emplace_back("query." + p->name, p);
        }
        for (auto* p : attach.params()) out.emplace_back("main." + p->name, p);
        return out;
    }

    void zero_all_grads() {
        for (auto* p : all_params()) p->zero_grad();
    }
};

namespace detail {

template <typename Real>
void sgd_step(const std::vector<std::pair<Param<Real>*, double>>& groups, int batch,
              double lr_scale = 1.0) {
    for (const auto& [p, lr] : groups) {
        if (p->frozen) continue;
        const Real s = static_cast<Real>(lr * lr_scale / batch);
        for (long i = 0; i < p->value.numel(); ++i) p->value[i] -= s * p->grad[i];
    }
}

inline std::vector<std::vector<int>> make_batches(int n, int batch, Rng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx);
    std::vector<std::vector<int>> out;
    for (int s = 0; s < n; s += batch)
        out.emplace_back(idx.begin() + s, idx.begin() + std::min(n, s + batch));
    return out;
}

inline void trace(TraceSink* sink, const char* event) {
    if (sink) (*sink)(event);
}

}  // namespace detail

// Prompted forward pass shared by training and evaluation:
// query -> sorted selection -> ordered pool read -> attach -> classify.
template <typename Real>
struct PoetForward {
    typename Graph<Real>::Id logits;
    typename Graph<Real>::Id gamma;
    OrderedSelection sel;
};

template <typename Real>
PoetForward<Real> poet_forward(Graph<Real>& g, ContinualState<Real>& st,
                               const SkeletonSequence& x, const ForwardOptions& opt = {},
                               TraceSink* sink = nullptr) {
    auto& cb = *st.codebook;
    auto q = cb.query(g, x);
    detail::trace(sink, "query");
    auto gamma = g.cosine_rows(q, g.param(cb.keys));
    const auto& gv = g.val(gamma);
    std::vector<double> gvals(gv.v.begin(), gv.v.end());
    const int slots = st.attach.slots(x.frame_count());
    PoetForward<Real> out;
    out.sel = cb.select(gvals, slots, st.train.sorting);
    detail::trace(sink, "sort");
    auto prompts = g.gather_prompts(g.param(cb.pool), out.sel.order, gamma, st.train.coupled);
    detail::trace(sink, "gather");
    auto x_e = st.model.embed(g, x, opt);
    auto prompted = st.attach.apply(g, x_e, prompts);
    detail::trace(sink, "attach");
    out.logits = st.model.extract_and_classify(g, prompted, opt);
    out.gamma = gamma;
    return out;
}

template <typename Real>
typename Graph<Real>::Id plain_forward(Graph<Real>& g, ContinualState<Real>& st,
                                       const SkeletonSequence& x,
                                       const ForwardOptions& opt = {}) {
    auto x_e = st.model.embed(g, x, opt);
    return st.model.extract_and_classify(g, x_e, opt);
}

namespace detail {

// One optimization pass over `data`; shared by the base joint phase and the
// incremental sessions. The base phases drop the configured initial rate by
// 10x for the final 40% of their epochs; incremental sessions never decay.
template <typename Real>
void run_epochs(ContinualState<Real>& st, const std::vector<SkeletonSequence>& data,
                int epochs, int batch_size,
                const std::vector<std::pair<Param<Real>*, double>>& groups,
                bool with_prompts, int session, Rng& rng,
                std::vector<SelectionRecord>* selection_log, TraceSink* sink,
                bool base_decay = false) {
    const int n = static_cast<int>(data.size());
    check(n > 0, "training: empty dataset");
    ForwardOptions opt;
    Rng dropout_rng(derive_seed(st.train.seed, 0xd70u ^ static_cast<std::uint64_t>(session)));
    if (st.model_config.dropout > 0) {
        opt.dropout = st.model_config.dropout;
        opt.dropout_rng = &dropout_rng;
    }
    int step = 0;
    for (int e = 0; e < epochs; ++e) {
        const double lr_scale = base_decay && e >= (epochs * 6) / 10 ? 0.1 : 1.0;
        for (const auto& batch : make_batches(n, batch_size, rng)) {
            st.zero_all_grads();
            double batch_loss = 0;
            for (int si : batch) {
                const auto& x = data[static_cast<std::size_t>(si)];
                const int label_row = st.row_of(x.class_id);
                Graph<Real> g;
                typename Graph<Real>::Id total;
                if (with_prompts) {
                    auto fwd = poet_forward(g, st, x, opt, sink);
                    if (st.codebook->size() == static_cast<int>(fwd.sel.order.size())) {
                        std::set<int> distinct(fwd.sel.order.begin(), fwd.sel.order.end());
                        check(static_cast<int>(distinct.size()) == st.codebook->size(),
                              "selection must be a permutation when M = T");
                    }
                    auto ce = g.cross_entropy(fwd.logits, label_row);
                    trace(sink, "loss_ce");
                    total = ce;
                    if (st.train.clustering) {
                        auto cl = clustering_loss(g, fwd.gamma, fwd.sel.order,
                                                  st.train.lambda);
                        trace(sink, "loss_cluster");
                        total = g.add(ce, cl);
                    }
                    if (selection_log)
                        selection_log->push_back({session, step, si, fwd.sel.order});
                } else {
                    auto logits = plain_forward(g, st, x, opt);
                    total = g.cross_entropy(logits, label_row);
                    trace(sink, "loss_ce");
                }
                batch_loss += static_cast<double>(g.val(total)[0]);
                g.backward(total);
            }
            if (!std::isfinite(batch_loss))
                throw TrainingError("non-finite training loss at step " +
                                    std::to_string(step) + " of session " +
                                    std::to_string(session));
            st.model.head.mask_frozen_row_grads();
            if (st.codebook) st.codebook->mask_frozen_prompt_grads();
            sgd_step(groups, static_cast<int>(batch.size()), lr_scale);
            trace(sink, "update");
            ++step;
        }
    }
}

}  // namespace detail

// Base session: pretrain the backbone on the base data, then (for poet)
// instantiate the codebook from the pretrained model and train prompts, keys,
// adaptor and all main-model parameters jointly. The query feature layers are
// frozen from the moment they are copied; f_e and f_g freeze on completion.
template <typename Real>
ContinualState<Real> train_base(const BackboneConfig& model_cfg, const TrainConfig& train_cfg,
                                const SkeletonTopology& topology, int frames,
                                const ProtocolData& pd,
                                std::vector<SelectionRecord>* selection_log = nullptr,
                                TraceSink* sink = nullptr) {
    check(!pd.session_train.empty() && !pd.session_train[0].empty(),
          "train_base: base session is empty");
    model_cfg.validate();
    train_cfg.validate(frames);

    ContinualState<Real> st;
    st.model_config = model_cfg;
    st.train = train_cfg;
    st.topology = topology;
    st.frames = frames;
    st.protocol = pd.protocol;
    st.row_classes = pd.protocol.base_classes;

    Rng init_rng(derive_seed(train_cfg.seed, 0x10de1));
    st.model.init(model_cfg, topology, train_cfg.head,
                  static_cast<int>(st.row_classes.size()), init_rng);

    const auto& base_data = pd.session_train[0];
    const bool poet = train_cfg.method == TrainMethod::Poet;

    // Phase A: backbone-only training. Promptless methods also absorb the
    // joint-phase budget here so every method sees the same number of passes.
    {
        const double lr = train_cfg.pretrain_lr > 0 ? train_cfg.pretrain_lr : train_cfg.base_lr;
        std::vector<std::pair<Param<Real>*, double>> groups;
        for (auto* p : st.model.params()) groups.emplace_back(p, lr);
        Rng rng(derive_seed(train_cfg.seed, 0xba5e0));
        const int epochs =
            poet ? train_cfg.pretrain_epochs : train_cfg.pretrain_epochs + train_cfg.base_epochs;
        detail::run_epochs(st, base_data, epochs, train_cfg.base_batch, groups, false, 0, rng,
                           nullptr, sink, true);
    }

    if (poet) {
        Rng cb_rng(derive_seed(train_cfg.seed, 0xc0de));
        st.codebook.emplace();
        st.codebook->init(st.model, frames, cb_rng);
        st.attach.init(train_cfg.attachment, frames, model_cfg.embed_dim(), cb_rng);

        std::vector<std::pair<Param<Real>*, double>> groups;
        for (auto* p : st.model.params()) groups.emplace_back(p, train_cfg.base_lr);
        groups.emplace_back(&st.codebook->pool, train_cfg.base_lr);
        groups.emplace_back(&st.codebook->keys, train_cfg.base_lr);
        groups.emplace_back(&st.codebook->qa_w, train_cfg.base_lr);
        groups.emplace_back(&st.codebook->qa_b, train_cfg.base_lr);
        for (auto* p : st.attach.params()) groups.emplace_back(p, train_cfg.base_lr);
        Rng rng(derive_seed(train_cfg.seed, 0xba5e1));
        detail::run_epochs(st, base_data, train_cfg.base_epochs, train_cfg.base_batch, groups,
                           true, 0, rng, selection_log, sink, true);
    }

    st.model.set_feature_frozen(true);
    st.completed_session = 0;
    return st;
}

// Incremental session t >= 1. Expands the classifier with mean-initialized
// rows, applies the freeze policy, optionally expands the pool, and runs the
// per-batch query/sort/gather/attach/loss schedule.
template <typename Real>
void train_session(ContinualState<Real>& st, const std::vector<SkeletonSequence>& data,
                   int t, std::vector<SelectionRecord>* selection_log = nullptr,
                   TraceSink* sink = nullptr) {
    check(t >= 1, "train_session: t must be >= 1");
    if (t != st.completed_session + 1)
        throw ProtocolError("train_session: expected session " +
                            std::to_string(st.completed_session + 1) + ", got " +
                            std::to_string(t));
    if (t > st.protocol.session_count())
        throw ProtocolError("train_session: protocol declares only " +
                            std::to_string(st.protocol.session_count()) + " sessions");
    const auto& session_classes = st.protocol.classes_of(t);
    for (int c : session_classes)
        for (int seen : st.row_classes)
            if (c == seen)
                throw ProtocolError("train_session: class " + std::to_string(c) +
                                    " was already trained");
    check(!data.empty(), "train_session: empty session data");
    for (const auto& s : data) {
        bool ok = false;
        for (int c : session_classes) ok = ok || c == s.class_id;
        if (!ok)
            throw ProtocolError("train_session: sample of class " +
                                std::to_string(s.class_id) + " outside session " +
                                std::to_string(t));
    }

    const auto method = st.train.method;
    // Freeze before expanding so only pre-existing rows are pinned. Plain
    // fine-tuning keeps everything trainable instead.
    if (method == TrainMethod::Ft) {
        st.model.set_feature_frozen(false);
    } else {
        apply_freeze_policy(st.model, t);
        if (method == TrainMethod::FeFrozen)
            st.model.head.frozen_rows = st.model.head.class_count();
    }
    st.model.head.expand(static_cast<int>(session_classes.size()));
    for (int c : session_classes) st.row_classes.push_back(c);

    if (st.has_prompts()) {
        if (st.train.pool_mode == PoolMode::Expand) {
            Rng er(derive_seed(st.train.seed, 0xe87a0d + static_cast<std::uint64_t>(t)));
            st.codebook->expand(st.train.expand_prompts, er);
        }
        st.codebook->qa_w.frozen = !st.train.qa_update;
        st.codebook->qa_b.frozen = !st.train.qa_update;
    }

    std::vector<std::pair<Param<Real>*, double>> groups;
    const double lr = st.train.session_lr;
    switch (method) {
        case TrainMethod::Ft:
            for (auto* p : st.model.params()) groups.emplace_back(p, lr);
            break;
        case TrainMethod::Fe:
        case TrainMethod::FeFrozen:
            for (auto* p : st.model.head.params()) groups.emplace_back(p, lr);
            break;
        case TrainMethod::Poet: {
            for (auto* p : st.model.head.params()) groups.emplace_back(p, lr);
            groups.emplace_back(&st.codebook->pool, lr);
            groups.emplace_back(&st.codebook->keys, lr);
            for (auto* p : st.attach.params()) groups.emplace_back(p, lr);
            if (st.train.qa_update) {
                groups.emplace_back(&st.codebook->qa_w, st.train.adaptor_lr);
                groups.emplace_back(&st.codebook->qa_b, st.train.adaptor_lr);
            }
            break;
        }
    }

    const int batch = st.train.session_batch > 0 ? st.train.session_batch
                                                 : static_cast<int>(data.size());
    Rng rng(derive_seed(st.train.seed, 0x5e550 + static_cast<std::uint64_t>(t)));
    detail::run_epochs(st, data, st.train.session_epochs, batch, groups,
                       st.has_prompts(), t, rng, selection_log, sink);
    st.completed_session = t;
}

// Argmax predictions on a list of sequences (no dropout, no logging).
template <typename Real>
std::vector<int> predict(ContinualState<Real>& st, const std::vector<SkeletonSequence>& xs) {
    std::vector<int> preds;
    preds.reserve(xs.size());
    for (const auto& x : xs) {
        Graph<Real> g;
        const auto logits =
            st.has_prompts() ? poet_forward(g, st, x).logits : plain_forward(g, st, x);
        const auto& lv = g.val(logits);
        int best = 0;
        for (int k = 1; k < lv.dim(0); ++k)
            if (lv[k] > lv[best]) best = k;
        preds.push_back(st.row_classes[static_cast<std::size_t>(best)]);
    }
    return preds;
}

// Evaluate on the cumulative test set after session t and extend the
// accuracy history (exactly once per session).
template <typename Real>
SessionReport evaluate_session(ContinualState<Real>& st, const SplitDataset& dataset, int t) {
    check(t == st.completed_session, "evaluate_session: session not trained yet");
    const auto test = cumulative_test_set(dataset, st.protocol, t);
    check(!test.empty(), "evaluate_session: empty test set");
    std::vector<int> labels;
    labels.reserve(test.size());
    for (const auto& s : test) labels.push_back(s.class_id);
    const auto preds = predict(st, test);

    SessionReport rep;
    rep.session = t;
    const auto breakdown =
        compute_accuracies(preds, labels, st.protocol.class_sessions(), t);
    rep.avg = breakdown.avg;
    rep.old_acc = breakdown.old_acc;
    rep.new_acc = breakdown.new_acc;
    rep.per_class = breakdown.per_class;
    if (rep.old_acc && rep.new_acc) rep.a_hm = harmonic_mean(*rep.old_acc, *rep.new_acc);
    rep.confusion = confusion_matrix(preds, labels, st.row_classes);

    // Task-wise accuracies for the forgetting history; task j+1 = session j.
    std::vector<double> row;
    for (int j = 0; j <= t; ++j) {
        long n = 0, ok = 0;
        const auto& cls = st.protocol.classes_of(j);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            for (int c : cls)
                if (labels[i] == c) {
                    ++n;
                    ok += preds[i] == labels[i];
                    break;
                }
        }
        check(n > 0, "evaluate_session: no test samples for session " + std::to_string(j));
        row.push_back(100.0 * static_cast<double>(ok) / static_cast<double>(n));
    }
    st.history.push_row(std::move(row));
    if (t >= 1) rep.bwf_value = bwf(st.history, t + 1);
    return rep;
}

// Hooks the experiment layer uses to persist artifacts per session.
template <typename Real>
struct RunHooks {
    std::function<void(const ContinualState<Real>&, const SessionReport&,
                       const std::vector<SelectionRecord>&)>
        on_session = nullptr;
};

// Train base then every incremental session, evaluating on all classes seen
// so far after each. No sample of a finished session is retained in state.
template <typename Real>
std::vector<SessionReport> run_protocol(const BackboneConfig& model_cfg,
                                        const TrainConfig& train_cfg,
                                        const SkeletonTopology& topology, int frames,
                                        const ProtocolData& pd, const SplitDataset& dataset,
                                        const RunHooks<Real>& hooks = {},
                                        TraceSink* sink = nullptr) {
    std::vector<SessionReport> reports;
    std::vector<SelectionRecord> selections;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    double last = 0;
    ContinualState<Real> st =
        train_base<Real>(model_cfg, train_cfg, topology, frames, pd, &selections, sink);
    auto rep = evaluate_session(st, dataset, 0);
    rep.wall_seconds = elapsed() - last;
    last = elapsed();
    if (hooks.on_session) hooks.on_session(st, rep, selections);
    reports.push_back(std::move(rep));

    for (int t = 1; t <= pd.protocol.session_count(); ++t) {
        selections.clear();
        train_session(st, pd.session_train[static_cast<std::size_t>(t)], t, &selections, sink);
        auto r = evaluate_session(st, dataset, t);
        r.wall_seconds = elapsed() - last;
        last = elapsed();
        if (hooks.on_session) hooks.on_session(st, r, selections);
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace poet
