#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "poet/common.hpp"
#include "poet/tensor.hpp"
#include "poet/topology.hpp"

namespace poet {

// One action clip: T frames x J joints x 3 coordinates.
struct SkeletonSequence {
    Tensor<double> frames;  // T x J x 3
    int class_id = 0;
    std::optional<int> subject_id;

    int frame_count() const { return frames.dim(0); }
    int joint_count() const { return frames.dim(1); }
};

// Per-class train/test pools sharing one (T, J).
struct SplitDataset {
    int class_count = 0;
    int frames_per_clip = 0;
    int joints = 0;
    std::vector<std::vector<SkeletonSequence>> train;  // per class
    std::vector<std::vector<SkeletonSequence>> test;   // per class
};

// Base session plus ordered N-way F-shot incremental sessions, class sets
// pairwise disjoint.
struct ContinualProtocol {
    std::vector<int> base_classes;           // Y^0
    std::vector<std::vector<int>> sessions;  // Y^t, t >= 1
    int shots = 0;
    std::uint64_t seed = 0;

    int session_count() const { return static_cast<int>(sessions.size()); }

    const std::vector<int>& classes_of(int t) const {
        return t == 0 ? base_classes : sessions[static_cast<std::size_t>(t - 1)];
    }

    // class id -> session index that introduces it
    std::map<int, int> class_sessions() const {
        std::map<int, int> m;
        for (int c : base_classes) m[c] = 0;
        for (int t = 0; t < session_count(); ++t)
            for (int c : sessions[static_cast<std::size_t>(t)]) m[c] = t + 1;
        return m;
    }

    void validate() const {
        std::set<int> seen;
        for (int c : base_classes)
            if (!seen.insert(c).second)
                throw ProtocolError("protocol: duplicate class " + std::to_string(c));
        for (const auto& s : sessions)
            for (int c : s)
                if (!seen.insert(c).second)
                    throw ProtocolError("protocol: class " + std::to_string(c) +
                                        " appears in more than one session");
    }
};

// Train subsets per session: [0] is the base session with all of its samples,
// [t>=1] holds exactly ways*shots few-shot samples.
struct ProtocolData {
    ContinualProtocol protocol;
    std::vector<std::vector<SkeletonSequence>> session_train;
};

// Deterministic synthetic action benchmark. Class c moves every joint around
// a static chain pose with its own frequency, amplitude and per-joint phases,
// which keeps classes separable without being one-hot trivial.
inline SplitDataset synth_generate(const SkeletonTopology& topology, int class_count,
                                   int per_class_train, int per_class_test, int T,
                                   double noise_sigma, std::uint64_t seed) {
    if (class_count < 2) throw ConfigError("synth_generate: class_count must be >= 2");
    if (per_class_train < 1 || per_class_test < 1)
        throw ConfigError("synth_generate: per-class sample counts must be >= 1");
    if (T < 2) throw ConfigError("synth_generate: T must be >= 2");
    if (noise_sigma < 0) throw ConfigError("synth_generate: noise_sigma must be >= 0");
    topology.validate();

    const int J = topology.joint_count;
    SplitDataset ds;
    ds.class_count = class_count;
    ds.frames_per_clip = T;
    ds.joints = J;
    ds.train.resize(static_cast<std::size_t>(class_count));
    ds.test.resize(static_cast<std::size_t>(class_count));

    // Static base pose along the chain, centered so coordinates stay on the
    // scale of the motion amplitudes.
    std::vector<double> pose(static_cast<std::size_t>(J) * 3, 0.0);
    for (int j = 0; j < J; ++j)
        pose[static_cast<std::size_t>(j) * 3] = 0.05 * (j - 0.5 * (J - 1));

    // The leading classes are independent motion primitives. The tail
    // 2*floor(K/4) classes come in variant pairs: both members of pair p
    // replay leading class p with a class-specific temporal delay plus a
    // small per-joint phase nudge. Time-averaged features barely see a
    // delay, so few-shot sessions carved from the tail stay non-trivial for
    // a frozen feature extractor while remaining separable frame-by-frame.
    constexpr double kTau = 2.0 * 3.14159265358979323846;
    constexpr double kVariantNudge = 0.15;      // per-joint phase jitter
    constexpr double kVariantDelayMin = 0.6;    // frames
    constexpr double kVariantDelayMax = 2.4;    // frames
    Rng class_rng(derive_seed(seed, 0xc1a55));
    struct MotionPrimitive {
        double omega;
        double amplitude;
        std::vector<double> phase;  // per joint per coordinate
    };
    std::vector<MotionPrimitive> motions;
    motions.reserve(static_cast<std::size_t>(class_count));
    const int variant_count = 2 * (class_count / 4);
    const int variant_start = class_count - variant_count;
    for (int c = 0; c < class_count; ++c) {
        MotionPrimitive m;
        if (c >= variant_start) {
            const auto& parent = motions[static_cast<std::size_t>((c - variant_start) / 2)];
            m.omega = parent.omega;
            m.amplitude = parent.amplitude;
            m.phase = parent.phase;
            const double delay =
                class_rng.uniform(kVariantDelayMin, kVariantDelayMax) * ((c % 2) ? -1.0 : 1.0);
            for (auto& p : m.phase)
                p += m.omega * delay + class_rng.uniform(-kVariantNudge, kVariantNudge);
        } else {
            m.omega = class_rng.uniform(0.3, 1.5);
            m.amplitude = class_rng.uniform(0.5, 1.5);
            m.phase.resize(static_cast<std::size_t>(J) * 3);
            for (auto& p : m.phase) p = class_rng.uniform(0.0, kTau);
        }
        motions.push_back(std::move(m));
    }

    auto make_clip = [&](int c, Rng& rng) {
        SkeletonSequence s;
        s.class_id = c;
        s.frames = Tensor<double>({T, J, 3});
        const auto& m = motions[static_cast<std::size_t>(c)];
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < J; ++j)
                for (int d = 0; d < 3; ++d) {
                    const double base = pose[static_cast<std::size_t>(j) * 3 + d];
                    const double ph = m.phase[static_cast<std::size_t>(j) * 3 + d];
                    double x = base + m.amplitude * std::sin(m.omega * t + ph);
                    if (noise_sigma > 0) x += noise_sigma * rng.normal();
                    s.frames.at(t, j, d) = x;
                }
        return s;
    };

    for (int c = 0; c < class_count; ++c) {
        Rng train_rng(derive_seed(seed, 0x7e0000 + static_cast<std::uint64_t>(c)));
        Rng test_rng(derive_seed(seed, 0x7f0000 + static_cast<std::uint64_t>(c)));
        for (int i = 0; i < per_class_train; ++i)
            ds.train[static_cast<std::size_t>(c)].push_back(make_clip(c, train_rng));
        for (int i = 0; i < per_class_test; ++i)
            ds.test[static_cast<std::size_t>(c)].push_back(make_clip(c, test_rng));
    }
    return ds;
}

// Carve a class-incremental protocol out of a per-class dataset. The base
// session keeps every train sample of its classes; each later session draws
// exactly `shots` samples per class from the seed.
inline ProtocolData make_protocol(const SplitDataset& dataset, int base_class_count,
                                  int sessions, int ways, int shots,
                                  const std::vector<int>& class_order,
                                  std::uint64_t seed) {
    if (base_class_count < 1) throw ConfigError("make_protocol: base_class_count must be >= 1");
    if (sessions < 0 || ways < 1 || shots < 1)
        throw ConfigError("make_protocol: sessions/ways/shots out of range");
    const int needed = base_class_count + sessions * ways;
    if (needed > dataset.class_count)
        throw ConfigError("make_protocol: protocol needs " + std::to_string(needed) +
                          " classes but dataset has " + std::to_string(dataset.class_count));

    std::vector<int> order = class_order;
    if (order.empty()) {
        order.resize(static_cast<std::size_t>(dataset.class_count));
        for (int c = 0; c < dataset.class_count; ++c) order[static_cast<std::size_t>(c)] = c;
    }
    if (static_cast<int>(order.size()) < needed)
        throw ConfigError("make_protocol: class_order lists " +
                          std::to_string(order.size()) + " classes, protocol needs " +
                          std::to_string(needed));
    for (int c : order)
        if (c < 0 || c >= dataset.class_count)
            throw ConfigError("make_protocol: class_order id " + std::to_string(c) +
                              " outside dataset");

    ProtocolData pd;
    pd.protocol.shots = shots;
    pd.protocol.seed = seed;
    pd.protocol.base_classes.assign(order.begin(), order.begin() + base_class_count);
    for (int t = 0; t < sessions; ++t) {
        const auto b = order.begin() + base_class_count + static_cast<long>(t) * ways;
        pd.protocol.sessions.emplace_back(b, b + ways);
    }
    pd.protocol.validate();

    pd.session_train.resize(static_cast<std::size_t>(sessions) + 1);
    for (int c : pd.protocol.base_classes)
        for (const auto& s : dataset.train[static_cast<std::size_t>(c)])
            pd.session_train[0].push_back(s);

    for (int t = 1; t <= sessions; ++t) {
        for (int c : pd.protocol.sessions[static_cast<std::size_t>(t - 1)]) {
            const auto& pool = dataset.train[static_cast<std::size_t>(c)];
            if (shots > static_cast<int>(pool.size()))
                throw ConfigError("make_protocol: class " + std::to_string(c) + " has " +
                                  std::to_string(pool.size()) + " train samples, need " +
                                  std::to_string(shots) + " shots");
            Rng rng(derive_seed(seed, 0x5807u ^ (static_cast<std::uint64_t>(t) << 32) ^
                                          static_cast<std::uint64_t>(c)));
            auto picks = rng.sample_without_replacement(static_cast<int>(pool.size()), shots);
            std::sort(picks.begin(), picks.end());
            for (int i : picks)
                pd.session_train[static_cast<std::size_t>(t)].push_back(
                    pool[static_cast<std::size_t>(i)]);
        }
    }
    return pd;
}

// Cumulative test pool over all classes seen up to and including session t.
inline std::vector<SkeletonSequence> cumulative_test_set(const SplitDataset& dataset,
                                                         const ContinualProtocol& protocol,
                                                         int up_to_session) {
    std::vector<SkeletonSequence> out;
    for (int t = 0; t <= up_to_session; ++t)
        for (int c : protocol.classes_of(t))
            for (const auto& s : dataset.test[static_cast<std::size_t>(c)]) out.push_back(s);
    return out;
}

}  // namespace poet
