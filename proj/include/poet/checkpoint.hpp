#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "poet/common.hpp"
#include "poet/trainer.hpp"

namespace poet {

// Checkpoint archive: a UTF-8 "key = value" manifest, a "---BLOB---" line,
// then the concatenated parameter tensors as little-endian 32-bit floats at
// the offsets the manifest declares. The writer is fully deterministic, so
// save -> load -> save round-trips byte-identically.

namespace ckpt_detail {

inline std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string join_ints(const std::vector<int>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(xs[i]);
    }
    return s;
}

inline std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

inline std::vector<double> split_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stod(tok));
    return out;
}

inline void put_le_float(std::string& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>((u >> 8) & 0xff));
    out.push_back(static_cast<char>((u >> 16) & 0xff));
    out.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline float get_le_float(const char* p) {
    std::uint32_t u = static_cast<std::uint8_t>(p[0]) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[1])) << 8) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[2])) << 16) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[3])) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace ckpt_detail

inline std::map<std::string, std::string> model_config_kv(const BackboneConfig& c) {
    using ckpt_detail::fmt_double;
    return {{"model.kind", c.kind == BackboneKind::Gcn ? "gcn" : "graph-transformer"},
            {"model.layer_channels", ckpt_detail::join_ints(c.layer_channels)},
            {"model.attach_after_layer", std::to_string(c.attach_after_layer)},
            {"model.dropout", fmt_double(c.dropout)}};
}

inline BackboneConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
    BackboneConfig c;
    c.kind = backbone_kind_from(kv.at("model.kind"));
    c.layer_channels = ckpt_detail::split_ints(kv.at("model.layer_channels"));
    c.attach_after_layer = std::stoi(kv.at("model.attach_after_layer"));
    c.dropout = std::stod(kv.at("model.dropout"));
    return c;
}

inline std::string head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::Linear: return "linear";
        case HeadKind::LinearFrozenOld: return "linear-frozen-old";
        case HeadKind::Cosine: return "cosine";
    }
    return "?";
}

inline std::map<std::string, std::string> train_config_kv(const TrainConfig& c) {
    using ckpt_detail::fmt_double;
    return {{"train.method", to_string(c.method)},
            {"train.head", head_kind_name(c.head)},
            {"train.pool_mode", c.pool_mode == PoolMode::Fixed ? "fixed" : "expand"},
            {"train.expand_prompts", std::to_string(c.expand_prompts)},
            {"train.attachment", to_string(c.attachment)},
            {"train.sorting", c.sorting ? "on" : "off"},
            {"train.coupled", c.coupled ? "on" : "off"},
            {"train.clustering", c.clustering ? "on" : "off"},
            {"train.qa_update", c.qa_update ? "on" : "off"},
            {"train.lambda", fmt_double(c.lambda)},
            {"train.pretrain_epochs", std::to_string(c.pretrain_epochs)},
            {"train.pretrain_lr", fmt_double(c.pretrain_lr)},
            {"train.base_epochs", std::to_string(c.base_epochs)},
            {"train.base_lr", fmt_double(c.base_lr)},
            {"train.base_batch", std::to_string(c.base_batch)},
            {"train.session_epochs", std::to_string(c.session_epochs)},
            {"train.session_lr", fmt_double(c.session_lr)},
            {"train.session_batch", std::to_string(c.session_batch)},
            {"train.adaptor_lr", fmt_double(c.adaptor_lr)},
            {"train.seed", std::to_string(c.seed)}};
}

inline TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    c.method = train_method_from(kv.at("train.method"));
    c.head = head_kind_from(kv.at("train.head"));
    c.pool_mode = kv.at("train.pool_mode") == "fixed" ? PoolMode::Fixed : PoolMode::Expand;
    c.expand_prompts = std::stoi(kv.at("train.expand_prompts"));
    c.attachment = attach_mode_from(kv.at("train.attachment"));
    c.sorting = kv.at("train.sorting") == "on";
    c.coupled = kv.at("train.coupled") == "on";
    c.clustering = kv.at("train.clustering") == "on";
    c.qa_update = kv.at("train.qa_update") == "on";
    c.lambda = std::stod(kv.at("train.lambda"));
    c.pretrain_epochs = std::stoi(kv.at("train.pretrain_epochs"));
    c.pretrain_lr = std::stod(kv.at("train.pretrain_lr"));
    c.base_epochs = std::stoi(kv.at("train.base_epochs"));
    c.base_lr = std::stod(kv.at("train.base_lr"));
    c.base_batch = std::stoi(kv.at("train.base_batch"));
    c.session_epochs = std::stoi(kv.at("train.session_epochs"));
    c.session_lr = std::stod(kv.at("train.session_lr"));
    c.session_batch = std::stoi(kv.at("train.session_batch"));
    c.adaptor_lr = std::stod(kv.at("train.adaptor_lr"));
    c.seed = std::stoull(kv.at("train.seed"));
    return c;
}

template <typename Real>
void save_checkpoint(ContinualState<Real>& st, const std::string& path) {
    std::ostringstream m;
    m << "poet-checkpoint = 1\n";
    m << "session = " << st.completed_session << "\n";
    m << "frames = " << st.frames << "\n";
    for (const auto& [k, v] : model_config_kv(st.model_config)) m << k << " = " << v << "\n";
    for (const auto& [k, v] : train_config_kv(st.train)) m << k << " = " << v << "\n";

    m << "topology.joints = " << st.topology.joint_count << "\n";
    std::string edges;
    for (std::size_t i = 0; i < st.topology.edges.size(); ++i) {
        if (i) edges += ",";
        edges += std::to_string(st.topology.edges[i].first) + "-" +
                 std::to_string(st.topology.edges[i].second);
    }
    m << "topology.edges = " << edges << "\n";

    m << "protocol.base = " << ckpt_detail::join_ints(st.protocol.base_classes) << "\n";
    m << "protocol.sessions = " << st.protocol.session_count() << "\n";
    for (int t = 1; t <= st.protocol.session_count(); ++t)
        m << "protocol.session_" << t << " = "
          << ckpt_detail::join_ints(st.protocol.classes_of(t)) << "\n";
    m << "protocol.shots = " << st.protocol.shots << "\n";
    m << "protocol.seed = " << st.protocol.seed << "\n";

    m << "row_classes = " << ckpt_detail::join_ints(st.row_classes) << "\n";
    m << "head.frozen_rows = " << st.model.head.frozen_rows << "\n";
    m << "features.frozen = " << (st.model.feature_params().empty() ||
                                          st.model.feature_params()[0]->frozen
                                      ? 1
                                      : 0)
      << "\n";
    m << "head.eta_frozen = "
      << (st.model.head.kind == HeadKind::Cosine && st.model.head.eta.frozen ? 1 : 0) << "\n";
    m << "has_codebook = " << (st.has_prompts() ? 1 : 0) << "\n";
    if (st.has_prompts()) {
        m << "codebook.frozen_prompts = " << st.codebook->frozen_prompts << "\n";
        m << "codebook.new_block_start = " << st.codebook->new_block_start << "\n";
        m << "codebook.qa_frozen = " << (st.codebook->qa_w.frozen ? 1 : 0) << "\n";
    }

    m << "history.rows = " << st.history.tasks() << "\n";
    for (int l = 1; l <= st.history.tasks(); ++l) {
        m << "history.row_" << l << " =";
        for (int j = 1; j <= l; ++j)
            m << (j == 1 ? " " : ",") << ckpt_detail::fmt_double(st.history.at(l, j));
        m << "\n";
    }

    auto named = st.named_params();
    m << "tensor.count = " << named.size() << "\n";
    std::string blob;
    long offset = 0;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [name, p] = named[i];
        m << "tensor." << i << ".name = " << name << "\n";
        m << "tensor." << i << ".shape = " << ckpt_detail::join_ints(p->value.shape) << "\n";
        m << "tensor." << i << ".offset = " << offset << "\n";
        m << "tensor." << i << ".count = " << p->value.numel() << "\n";
        for (long j = 0; j < p->value.numel(); ++j)
            ckpt_detail::put_le_float(blob, static_cast<float>(p->value[j]));
        offset += p->value.numel();
    }
    m << "blob.bytes = " << blob.size() << "\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out << m.str() << "---BLOB---\n" << blob;
    if (!out) throw IoError("checkpoint write failed for '" + path + "'");
}

template <typename Real>
ContinualState<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    bool found_blob = false;
    while (std::getline(in, line)) {
        if (line == "---BLOB---") {
            found_blob = true;
            break;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) {
            if (line.size() > 2 && line.compare(line.size() - 2, 2, " =") == 0) {
                kv[line.substr(0, line.size() - 2)] = "";
                continue;
            }
            throw IntegrityError("checkpoint manifest line is not 'key = value': " + line);
        }
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    if (!found_blob) throw IntegrityError("checkpoint is missing the blob marker");
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    auto need = [&](const std::string& k) -> const std::string& {
        const auto it = kv.find(k);
        if (it == kv.end()) throw IntegrityError("checkpoint manifest is missing '" + k + "'");
        return it->second;
    };

    ContinualState<Real> st;
    st.model_config = model_config_from_kv(kv);
    st.train = train_config_from_kv(kv);
    st.frames = std::stoi(need("frames"));
    st.completed_session = std::stoi(need("session"));

    st.topology.joint_count = std::stoi(need("topology.joints"));
    {
        std::stringstream ss(need("topology.edges"));
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            const auto dash = tok.find('-');
            if (dash == std::string::npos)
                throw IntegrityError("checkpoint topology edge '" + tok + "' is malformed");
            st.topology.edges.emplace_back(std::stoi(tok.substr(0, dash)),
                                           std::stoi(tok.substr(dash + 1)));
        }
    }

    st.protocol.base_classes = ckpt_detail::split_ints(need("protocol.base"));
    const int sessions = std::stoi(need("protocol.sessions"));
    for (int t = 1; t <= sessions; ++t)
        st.protocol.sessions.push_back(
            ckpt_detail::split_ints(need("protocol.session_" + std::to_string(t))));
    st.protocol.shots = std::stoi(need("protocol.shots"));
    st.protocol.seed = std::stoull(need("protocol.seed"));
    st.row_classes = ckpt_detail::split_ints(need("row_classes"));

    const int hist_rows = std::stoi(need("history.rows"));
    for (int l = 1; l <= hist_rows; ++l)
        st.history.push_row(
            ckpt_detail::split_doubles(need("history.row_" + std::to_string(l))));

    // Rebuild the module structure, then overwrite every tensor from the blob.
    Rng dummy(0);
    st.model.init(st.model_config, st.topology, st.train.head,
                  static_cast<int>(st.row_classes.size()), dummy);
    if (std::stoi(need("has_codebook")) == 1) {
        st.codebook.emplace();
        st.codebook->init(st.model, st.frames, dummy);
        st.attach.init(st.train.attachment, st.frames, st.model_config.embed_dim(), dummy);
        st.codebook->frozen_prompts = std::stoi(need("codebook.frozen_prompts"));
        st.codebook->new_block_start = std::stoi(need("codebook.new_block_start"));
        const bool qa_frozen = std::stoi(need("codebook.qa_frozen")) == 1;
        st.codebook->qa_w.frozen = qa_frozen;
        st.codebook->qa_b.frozen = qa_frozen;
    }
    st.model.head.frozen_rows = std::stoi(need("head.frozen_rows"));
    st.model.set_feature_frozen(std::stoi(need("features.frozen")) == 1);
    if (st.model.head.kind == HeadKind::Cosine)
        st.model.head.eta.frozen = std::stoi(need("head.eta_frozen")) == 1;

    auto named = st.named_params();
    std::map<std::string, Param<Real>*> by_name(named.begin(), named.end());
    const std::size_t tensor_count = std::stoul(need("tensor.count"));
    const std::size_t blob_bytes = std::stoul(need("blob.bytes"));
    if (blob.size() > blob_bytes)
        throw IntegrityError("checkpoint blob has " + std::to_string(blob.size()) +
                             " bytes, manifest declares " + std::to_string(blob_bytes));
    if (tensor_count != named.size())
        throw IntegrityError("checkpoint declares " + std::to_string(tensor_count) +
                             " tensors, state has " + std::to_string(named.size()));
    for (std::size_t i = 0; i < tensor_count; ++i) {
        const std::string pre = "tensor." + std::to_string(i) + ".";
        const std::string name = need(pre + "name");
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw IntegrityError("checkpoint tensor '" + name + "' has no matching parameter");
        auto shape = ckpt_detail::split_ints(need(pre + "shape"));
        const long offset = std::stol(need(pre + "offset"));
        const long count = std::stol(need(pre + "count"));
        if (count != Tensor<Real>::numel_of(shape))
            throw IntegrityError("checkpoint tensor '" + name + "' count mismatch");
        if (offset < 0 || (offset + count) * 4 > static_cast<long>(blob.size()))
            throw IntegrityError("checkpoint blob too short for tensor '" + name + "'");
        Param<Real>* p = it->second;
        if (p->value.shape != shape) p->resize(shape);
        for (long j = 0; j < count; ++j)
            p->value[j] = static_cast<Real>(
                ckpt_detail::get_le_float(blob.data() + (offset + j) * 4));
    }
    return st;
}

}  // namespace poet
