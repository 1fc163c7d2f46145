#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "poet/checkpoint.hpp"
#include "poet/common.hpp"
#include "poet/data.hpp"
#include "poet/metrics.hpp"
#include "poet/skeleton_io.hpp"
#include "poet/trainer.hpp"

namespace poet {

namespace fs = std::filesystem;

// ---- sectioned key = value config -------------------------------------------

// Grammar: "[section]" headers, "key = value" entries, '#' comments, blank
// lines ignored. Every key is validated against the known set so a typo is
// reported by name.
class IniDoc {
public:
    static IniDoc parse(const std::string& text) {
        IniDoc doc;
        std::istringstream in(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError("config line " + std::to_string(line_no) +
                                      ": unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
            doc.values_[section.empty() ? key : section + "." + key] = value;
        }
        return doc;
    }

    static IniDoc parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int get_int(const std::string& key, int fallback) {
        const std::string s = get(key, std::to_string(fallback));
        try {
            return std::stoi(s);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected an integer, got '" + s + "'");
        }
    }

    double get_double(const std::string& key, double fallback) {
        const std::string s = get(key, ckpt_detail::fmt_double(fallback));
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a number, got '" + s + "'");
        }
    }

    bool get_onoff(const std::string& key, bool fallback) {
        const std::string s = get(key, fallback ? "on" : "off");
        if (s == "on" || s == "true" || s == "1") return true;
        if (s == "off" || s == "false" || s == "0") return false;
        throw ConfigError(key + ": expected on/off, got '" + s + "'");
    }

    void reject_unknown() const {
        for (const auto& [k, _] : values_)
            if (!used_.count(k)) throw ConfigError(k + ": unknown configuration key");
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!IniDoc::trim(tok).empty()) out.push_back(std::stoull(IniDoc::trim(tok)));
    return out;
}

struct DatasetConfig {
    std::string source = "synthetic";  // synthetic | files
    int classes = 10;
    int per_class_train = 20;
    int per_class_test = 10;
    int frames = 16;
    int joints = 25;
    double noise_sigma = 0.05;
    std::uint64_t seed = 7;
    std::string dir;  // files source: directory holding protocol.txt
};

struct ProtocolConfig {
    int base_classes = 0;  // 0: classes - sessions*ways
    int sessions = 0;
    int ways = 2;
    int shots = 5;
    std::vector<int> class_order;  // empty = ascending ids
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ProtocolConfig protocol;
    BackboneConfig model;
    TrainConfig train;  // seed is overridden per run
    std::string out_dir = "runs";
    std::vector<std::uint64_t> seeds = {1};
};

inline std::string default_out_root() {
    if (const char* env = std::getenv("POET_OUT_ROOT")) return env;
    return "runs";
}

inline ExperimentConfig experiment_from_ini(IniDoc& doc) {
    ExperimentConfig cfg;
    auto& d = cfg.dataset;
    d.source = doc.get("dataset.source", d.source);
    if (d.source != "synthetic" && d.source != "files")
        throw ConfigError("dataset.source: must be 'synthetic' or 'files'");
    d.classes = doc.get_int("dataset.classes", d.classes);
    d.per_class_train = doc.get_int("dataset.per_class_train", d.per_class_train);
    d.per_class_test = doc.get_int("dataset.per_class_test", d.per_class_test);
    d.frames = doc.get_int("dataset.frames", d.frames);
    d.joints = doc.get_int("dataset.joints", d.joints);
    d.noise_sigma = doc.get_double("dataset.noise_sigma", d.noise_sigma);
    d.seed = static_cast<std::uint64_t>(
        std::stoull(doc.get("dataset.seed", std::to_string(d.seed))));
    d.dir = doc.get("dataset.dir", d.dir);
    if (d.source == "files") {
        if (d.dir.empty()) throw ConfigError("dataset.dir: required when source = files");
        if (!fs::exists(fs::path(d.dir) / "protocol.txt"))
            throw ConfigError("dataset.dir: no protocol.txt under '" + d.dir + "'");
    }
    if (d.frames < 2) throw ConfigError("dataset.frames: must be >= 2");
    if (d.joints < 2) throw ConfigError("dataset.joints: must be >= 2");

    auto& p = cfg.protocol;
    p.sessions = doc.get_int("protocol.sessions", p.sessions);
    p.ways = doc.get_int("protocol.ways", p.ways);
    p.shots = doc.get_int("protocol.shots", p.shots);
    p.base_classes = doc.get_int("protocol.base_classes", p.base_classes);
    const std::string order = doc.get("protocol.class_order", "default");
    if (order != "default") {
        std::stringstream ss(order);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!IniDoc::trim(tok).empty())
                p.class_order.push_back(std::stoi(IniDoc::trim(tok)));
    }
    if (p.sessions < 0) throw ConfigError("protocol.sessions: must be >= 0");
    if (p.ways < 1) throw ConfigError("protocol.ways: must be >= 1");
    if (p.shots < 1) throw ConfigError("protocol.shots: must be >= 1");

    auto& m = cfg.model;
    m.kind = backbone_kind_from(doc.get("model.kind", "gcn"));
    m.layer_channels = ckpt_detail::split_ints(doc.get("model.layer_channels", "16,32"));
    m.attach_after_layer = doc.get_int("model.attach_after_layer", 1);
    m.dropout = doc.get_double("model.dropout", 0.0);

    auto& t = cfg.train;
    t.method = train_method_from(doc.get("train.method", "poet"));
    t.head = head_kind_from(doc.get("train.head", "cosine"));
    const std::string pm = doc.get("train.pool_mode", "fixed");
    if (pm != "fixed" && pm != "expand")
        throw ConfigError("train.pool_mode: must be 'fixed' or 'expand'");
    t.pool_mode = pm == "fixed" ? PoolMode::Fixed : PoolMode::Expand;
    t.expand_prompts = doc.get_int("train.expand_prompts", 4);
    t.attachment = attach_mode_from(doc.get("train.attachment", "add"));
    t.sorting = doc.get_onoff("train.sorting", true);
    t.coupled = doc.get_onoff("train.coupled", true);
    t.clustering = doc.get_onoff("train.clustering", true);
    t.qa_update = doc.get_onoff("train.qa_update", true);
    t.lambda = doc.get_double("train.lambda", 0.1);
    t.pretrain_epochs = doc.get_int("train.pretrain_epochs", 20);
    t.pretrain_lr = doc.get_double("train.pretrain_lr", 0.0);
    t.base_epochs = doc.get_int("train.base_epochs", 15);
    t.base_lr = doc.get_double("train.base_lr", 0.05);
    t.base_batch = doc.get_int("train.base_batch", 32);
    t.session_epochs = doc.get_int("train.session_epochs", 30);
    t.session_lr = doc.get_double("train.session_lr", 0.01);
    t.session_batch = doc.get_int("train.session_batch", 0);
    t.adaptor_lr = doc.get_double("train.adaptor_lr", 0.01);

    cfg.out_dir = doc.get("run.out_dir", default_out_root());
    cfg.seeds = parse_seed_list(doc.get("run.seeds", "1"));
    if (cfg.seeds.empty()) throw ConfigError("run.seeds: seed list must not be empty");

    doc.reject_unknown();

    // Cross-field validation with offending keys named.
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model.layer_channels/attach_after_layer: ") + e.what());
    }
    t.validate(d.frames);
    const int base = p.base_classes > 0 ? p.base_classes : d.classes - p.sessions * p.ways;
    if (base < 1)
        throw ConfigError("protocol.base_classes: protocol leaves no base classes");
    if (base + p.sessions * p.ways > d.classes && d.source == "synthetic")
        throw ConfigError("protocol.sessions: protocol needs more classes than dataset.classes");
    return cfg;
}

inline int resolved_base_classes(const ExperimentConfig& cfg, int dataset_classes) {
    return cfg.protocol.base_classes > 0
               ? cfg.protocol.base_classes
               : dataset_classes - cfg.protocol.sessions * cfg.protocol.ways;
}

// Canonical resolved text (run.seeds excluded): the run-directory key.
inline std::string canonical_config_text(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> kv;
    const auto& d = cfg.dataset;
    kv["dataset.source"] = d.source;
    kv["dataset.classes"] = std::to_string(d.classes);
    kv["dataset.per_class_train"] = std::to_string(d.per_class_train);
    kv["dataset.per_class_test"] = std::to_string(d.per_class_test);
    kv["dataset.frames"] = std::to_string(d.frames);
    kv["dataset.joints"] = std::to_string(d.joints);
    kv["dataset.noise_sigma"] = ckpt_detail::fmt_double(d.noise_sigma);
    kv["dataset.seed"] = std::to_string(d.seed);
    kv["dataset.dir"] = d.dir;
    kv["protocol.base_classes"] = std::to_string(cfg.protocol.base_classes);
    kv["protocol.sessions"] = std::to_string(cfg.protocol.sessions);
    kv["protocol.ways"] = std::to_string(cfg.protocol.ways);
    kv["protocol.shots"] = std::to_string(cfg.protocol.shots);
    kv["protocol.class_order"] = ckpt_detail::join_ints(cfg.protocol.class_order);
    for (const auto& [k, v] : model_config_kv(cfg.model)) kv[k] = v;
    for (const auto& [k, v] : train_config_kv(cfg.train)) kv[k] = v;
    kv.erase("train.seed");  // per-run
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

inline std::string config_hash_hex(const ExperimentConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical_config_text(cfg))));
    return buf;
}

// ---- dataset construction ----------------------------------------------------

struct LoadedBenchmark {
    SplitDataset dataset;
    SkeletonTopology topology;
};

inline std::string format_for_joints(int joints) {
    if (joints == 25) return "ntu-style";
    if (joints == 22) return "shrec-style";
    throw ConfigError("dataset.joints: skeleton file schema supports 25 (ntu-style) or "
                      "22 (shrec-style) joints, got " +
                      std::to_string(joints));
}

inline LoadedBenchmark load_files_benchmark(const DatasetConfig& d) {
    const fs::path dir(d.dir);
    IniDoc proto = IniDoc::parse_file((dir / "protocol.txt").string());
    LoadedBenchmark out;
    const int classes = proto.get_int("classes", -1);
    const int joints = proto.get_int("joints", -1);
    if (classes < 2 || joints < 2)
        throw ParseError("protocol.txt: missing classes/joints declarations");
    const std::string format = proto.get("format", format_for_joints(joints));
    out.topology = SkeletonTopology::chain(joints);
    out.dataset.class_count = classes;
    out.dataset.frames_per_clip = d.frames;
    out.dataset.joints = joints;
    out.dataset.train.resize(static_cast<std::size_t>(classes));
    out.dataset.test.resize(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        char key[64];
        std::snprintf(key, sizeof(key), "class_%03d_train", c);
        const std::string train_file = proto.get(key, "");
        std::snprintf(key, sizeof(key), "class_%03d_test", c);
        const std::string test_file = proto.get(key, "");
        if (train_file.empty() || test_file.empty())
            throw ParseError("protocol.txt: missing file entries for class " +
                             std::to_string(c));
        auto tr = load_skeleton_file((dir / train_file).string(), format, d.frames);
        auto te = load_skeleton_file((dir / test_file).string(), format, d.frames);
        for (auto& s : tr) s.class_id = c;
        for (auto& s : te) s.class_id = c;
        out.dataset.train[static_cast<std::size_t>(c)] = std::move(tr);
        out.dataset.test[static_cast<std::size_t>(c)] = std::move(te);
    }
    return out;
}

inline LoadedBenchmark load_benchmark(const DatasetConfig& d) {
    if (d.source == "files") return load_files_benchmark(d);
    LoadedBenchmark out;
    out.topology = SkeletonTopology::chain(d.joints);
    out.dataset = synth_generate(out.topology, d.classes, d.per_class_train,
                                 d.per_class_test, d.frames, d.noise_sigma, d.seed);
    return out;
}

// ---- artifact writers ---------------------------------------------------------

inline std::string metric_cell(const std::optional<double>& v) {
    if (!v) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return buf;
}

inline std::string metrics_csv_row(const SessionReport& r) {
    std::string row = std::to_string(r.session);
    row += "," + metric_cell(r.old_acc);
    row += "," + metric_cell(r.new_acc);
    row += "," + metric_cell(r.avg);
    row += "," + metric_cell(r.a_hm);
    row += "," + metric_cell(r.bwf_value);
    row += "," + metric_cell(r.wall_seconds);
    return row;
}

inline constexpr const char* kMetricsHeader = "session,old,new,avg,a_hm,bwf,wall_seconds";

inline void write_selection_csv(const std::string& path, const std::string& run_id,
                                const std::vector<SelectionRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write selection log '" + path + "'");
    out << "run_id,session,step,sample_index,order\n";
    for (const auto& r : records)
        out << run_id << "," << r.session << "," << r.step << "," << r.sample_index << ",\""
            << order_to_string(r.order) << "\"\n";
}

inline void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write confusion matrix '" + path + "'");
    out << "true\\pred";
    for (int c : cm.classes) out << "," << c;
    out << "\n";
    const int K = static_cast<int>(cm.classes.size());
    for (int i = 0; i < K; ++i) {
        out << cm.classes[static_cast<std::size_t>(i)];
        for (int j = 0; j < K; ++j) out << "," << cm.at(i, j);
        out << "\n";
    }
}

// ---- run orchestration ---------------------------------------------------------

struct RunOptions {
    bool force = false;
    bool resume = false;
};

using Real = float;  // production scalar type; doubles are for test oracles

inline ProtocolData build_protocol(const ExperimentConfig& cfg, const SplitDataset& ds,
                                   std::uint64_t run_seed) {
    return make_protocol(ds, resolved_base_classes(cfg, ds.class_count),
                         cfg.protocol.sessions, cfg.protocol.ways, cfg.protocol.shots,
                         cfg.protocol.class_order, run_seed);
}

// One (config, seed) run directory with checkpoints, metrics CSV and
// selection logs. Returns the reports (freshly computed or reloaded rows).
inline std::vector<std::string> run_one_seed(const ExperimentConfig& cfg,
                                             const LoadedBenchmark& bench,
                                             std::uint64_t seed, const RunOptions& opt,
                                             std::ostream& log) {
    const std::string hash = config_hash_hex(cfg);
    const fs::path family = fs::path(cfg.out_dir) / hash;
    const fs::path run_dir = family / ("seed_" + std::to_string(seed));
    const std::string run_id = hash + "-seed_" + std::to_string(seed);
    const fs::path done_marker = run_dir / "COMPLETE";
    const fs::path metrics_path = run_dir / "metrics.csv";

    auto read_rows = [&]() {
        std::vector<std::string> rows;
        std::ifstream in(metrics_path);
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line))
            if (!line.empty()) rows.push_back(line);
        return rows;
    };

    if (fs::exists(done_marker)) {
        if (!opt.force) {
            log << "run " << run_id << ": already complete, skipping (use --force to redo)\n";
            return read_rows();
        }
        fs::remove_all(run_dir);
    }

    TrainConfig train = cfg.train;
    train.seed = seed;
    ProtocolData pd = build_protocol(cfg, bench.dataset, seed);
    const int sessions = pd.protocol.session_count();

    fs::create_directories(run_dir);
    {
        std::ofstream rc(run_dir / "resolved_config.txt");
        rc << canonical_config_text(cfg) << "run.seed = " << seed << "\n";
    }

    int start_session = 0;
    std::optional<ContinualState<Real>> st;
    std::vector<std::string> rows;
    if (opt.resume) {
        for (int t = sessions; t >= 0; --t) {
            const fs::path ck = run_dir / ("session_" + std::to_string(t) + ".ckpt");
            if (fs::exists(ck)) {
                st = load_checkpoint<Real>(ck.string());
                start_session = t + 1;
                break;
            }
        }
        if (st) {
            auto old_rows = read_rows();
            for (const auto& r : old_rows)
                if (std::stoi(r.substr(0, r.find(','))) < start_session) rows.push_back(r);
            log << "run " << run_id << ": resuming after session "
                << (start_session - 1) << "\n";
        }
    }

    auto persist_session = [&](ContinualState<Real>& state, const SessionReport& rep,
                               const std::vector<SelectionRecord>& sel) {
        save_checkpoint(state,
                        (run_dir / ("session_" + std::to_string(rep.session) + ".ckpt"))
                            .string());
        if (!sel.empty())
            write_selection_csv(
                (run_dir / ("selections_session_" + std::to_string(rep.session) + ".csv"))
                    .string(),
                run_id, sel);
        write_confusion_csv(
            (run_dir / ("confusion_session_" + std::to_string(rep.session) + ".csv"))
                .string(),
            rep.confusion);
        rows.push_back(metrics_csv_row(rep));
        std::ofstream out(metrics_path);
        out << kMetricsHeader << "\n";
        for (const auto& r : rows) out << r << "\n";
    };

    const auto t0 = std::chrono::steady_clock::now();
    auto since = [&t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    double last = 0;

    if (start_session == 0) {
        std::vector<SelectionRecord> selections;
        st = train_base<Real>(cfg.model, train, bench.topology, cfg.dataset.frames, pd,
                              &selections);
        auto rep = evaluate_session(*st, bench.dataset, 0);
        rep.wall_seconds = since() - last;
        last = since();
        persist_session(*st, rep, selections);
        log << "run " << run_id << " session 0: avg " << metric_cell(rep.avg) << "\n";
        start_session = 1;
    }
    for (int t = start_session; t <= sessions; ++t) {
        std::vector<SelectionRecord> selections;
        train_session(*st, pd.session_train[static_cast<std::size_t>(t)], t, &selections);
        auto rep = evaluate_session(*st, bench.dataset, t);
        rep.wall_seconds = since() - last;
        last = since();
        persist_session(*st, rep, selections);
        log << "run " << run_id << " session " << t << ": avg " << metric_cell(rep.avg)
            << " a_hm " << metric_cell(rep.a_hm) << "\n";
    }
    std::ofstream(done_marker) << "ok\n";
    return rows;
}

// Mean/std aggregation of per-seed metric rows into summary.csv.
inline void write_summary_csv(const std::string& path,
                              const std::vector<std::vector<std::string>>& per_seed_rows) {
    check(!per_seed_rows.empty(), "summary: no runs");
    const std::size_t sessions = per_seed_rows[0].size();
    std::ofstream out(path);
    if (!out) throw IoError("cannot write summary '" + path + "'");
    out << "session,seeds,old_mean,old_std,new_mean,new_std,avg_mean,avg_std,"
           "a_hm_mean,a_hm_std,bwf_mean,bwf_std\n";
    for (std::size_t s = 0; s < sessions; ++s) {
        // columns: session, old, new, avg, a_hm, bwf, wall
        std::vector<std::vector<double>> cols(5);
        for (const auto& rows : per_seed_rows) {
            check(rows.size() == sessions, "summary: inconsistent session counts");
            std::stringstream ss(rows[s]);
            std::string tok;
            int c = 0;
            while (std::getline(ss, tok, ',')) {
                if (c >= 1 && c <= 5) cols[static_cast<std::size_t>(c - 1)].push_back(
                        tok == "nan" ? std::nan("") : std::stod(tok));
                ++c;
            }
        }
        out << s << "," << per_seed_rows.size();
        for (const auto& col : cols) {
            double n = 0, mean = 0, m2 = 0;
            for (double v : col) {
                if (std::isnan(v)) continue;
                ++n;
                const double d = v - mean;
                mean += d / n;
                m2 += d * (v - mean);
            }
            if (n == 0) {
                out << ",nan,nan";
            } else {
                const double sd = n > 1 ? std::sqrt(m2 / (n - 1)) : 0.0;
                char buf[48];
                std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", mean, sd);
                out << buf;
            }
        }
        out << "\n";
    }
}

// Train every seed, then aggregate. Returns the family directory.
inline std::string run_experiment(const ExperimentConfig& cfg, const RunOptions& opt,
                                  std::ostream& log) {
    const LoadedBenchmark bench = load_benchmark(cfg.dataset);
    std::vector<std::vector<std::string>> per_seed;
    for (std::uint64_t seed : cfg.seeds)
        per_seed.push_back(run_one_seed(cfg, bench, seed, opt, log));
    const fs::path family = fs::path(cfg.out_dir) / config_hash_hex(cfg);
    write_summary_csv((family / "summary.csv").string(), per_seed);
    log << "summary: " << (family / "summary.csv").string() << "\n";
    return family.string();
}

// ---- gen-data -----------------------------------------------------------------

struct GenDataOptions {
    std::string out_dir;
    int classes = 10;
    int per_class_train = 20;
    int per_class_test = 10;
    int frames = 16;
    int joints = 25;
    double noise_sigma = 0.05;
    std::uint64_t seed = 1;
    int sessions = 0;
    int ways = 2;
    int shots = 5;
};

inline void cmd_gen_data(const GenDataOptions& o, std::ostream& log) {
    const std::string format = format_for_joints(o.joints);
    const int base = o.classes - o.sessions * o.ways;
    if (base < 1)
        throw ConfigError("gen-data: sessions*ways leaves no base classes (classes=" +
                          std::to_string(o.classes) + ")");
    const auto topo = SkeletonTopology::chain(o.joints);
    const auto ds = synth_generate(topo, o.classes, o.per_class_train, o.per_class_test,
                                   o.frames, o.noise_sigma, o.seed);
    std::error_code ec;
    fs::create_directories(o.out_dir, ec);
    if (ec) throw IoError("gen-data: cannot create '" + o.out_dir + "': " + ec.message());

    std::ostringstream proto;
    proto << "classes = " << o.classes << "\n";
    proto << "joints = " << o.joints << "\n";
    proto << "frames = " << o.frames << "\n";
    proto << "per_class_train = " << o.per_class_train << "\n";
    proto << "per_class_test = " << o.per_class_test << "\n";
    proto << "noise_sigma = " << ckpt_detail::fmt_double(o.noise_sigma) << "\n";
    proto << "seed = " << o.seed << "\n";
    proto << "format = " << format << "\n";
    proto << "base_classes = " << base << "\n";
    proto << "sessions = " << o.sessions << "\n";
    proto << "ways = " << o.ways << "\n";
    proto << "shots = " << o.shots << "\n";
    for (int c = 0; c < o.classes; ++c) {
        char train_name[32], test_name[32];
        std::snprintf(train_name, sizeof(train_name), "class_%03d_train.txt", c);
        std::snprintf(test_name, sizeof(test_name), "class_%03d_test.txt", c);
        save_skeleton_file((fs::path(o.out_dir) / train_name).string(),
                           ds.train[static_cast<std::size_t>(c)]);
        save_skeleton_file((fs::path(o.out_dir) / test_name).string(),
                           ds.test[static_cast<std::size_t>(c)]);
        char key[64];
        std::snprintf(key, sizeof(key), "class_%03d_train = %s", c, train_name);
        proto << key << "\n";
        std::snprintf(key, sizeof(key), "class_%03d_test = %s", c, test_name);
        proto << key << "\n";
    }
    std::ofstream pf(fs::path(o.out_dir) / "protocol.txt");
    if (!pf) throw IoError("gen-data: cannot write protocol.txt");
    pf << proto.str();
    log << "gen-data: wrote " << o.classes << " classes (" << base << " base + "
        << o.sessions << "x" << o.ways << "-way) under " << o.out_dir << "\n";
}

// ---- eval ----------------------------------------------------------------------

inline void cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
                     std::ostream& out) {
    auto doc = IniDoc::parse_file(config_path);
    const ExperimentConfig cfg = experiment_from_ini(doc);
    auto st = load_checkpoint<Real>(checkpoint_path);
    const LoadedBenchmark bench = load_benchmark(cfg.dataset);
    const int t = st.completed_session;
    const auto test = cumulative_test_set(bench.dataset, st.protocol, t);
    std::vector<int> labels;
    for (const auto& s : test) labels.push_back(s.class_id);
    const auto preds = predict(st, test);
    const auto acc = compute_accuracies(preds, labels, st.protocol.class_sessions(), t);
    SessionReport rep;
    rep.session = t;
    rep.avg = acc.avg;
    rep.old_acc = acc.old_acc;
    rep.new_acc = acc.new_acc;
    if (acc.old_acc && acc.new_acc) rep.a_hm = harmonic_mean(*acc.old_acc, *acc.new_acc);
    if (t >= 1 && st.history.tasks() >= t + 1) rep.bwf_value = bwf(st.history, t + 1);
    out << kMetricsHeader << "\n" << metrics_csv_row(rep) << "\n";
}

// ---- report --------------------------------------------------------------------

// Pool size recorded in a checkpoint manifest (for unused-index accounting).
inline std::optional<int> checkpoint_pool_size(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::string line;
    std::optional<std::string> pending_name;
    while (std::getline(in, line) && line != "---BLOB---") {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key.size() > 5 && key.compare(key.size() - 5, 5, ".name") == 0 &&
            value == "main.codebook.pool") {
            pending_name = key.substr(0, key.size() - 5);
        } else if (pending_name && key == *pending_name + ".shape") {
            const auto shape = ckpt_detail::split_ints(value);
            if (!shape.empty()) return shape[0];
        }
    }
    return std::nullopt;
}

inline std::vector<OrderedSelection> read_selection_csv(const std::string& path,
                                                        int pool_size_hint) {
    std::vector<OrderedSelection> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::getline(in, line);  // header
    int max_idx = -1;
    while (std::getline(in, line)) {
        const auto q1 = line.find('"');
        const auto q2 = line.rfind('"');
        if (q1 == std::string::npos || q2 <= q1) continue;
        OrderedSelection sel;
        std::stringstream ss(line.substr(q1 + 1, q2 - q1 - 1));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) sel.order.push_back(std::stoi(tok) - 1);
        for (int i : sel.order) max_idx = std::max(max_idx, i);
        out.push_back(std::move(sel));
    }
    const int M = std::max(pool_size_hint, max_idx + 1);
    for (auto& s : out) s.gamma.assign(static_cast<std::size_t>(M), 0.0);
    return out;
}

inline void cmd_report(const std::string& run_dir, std::ostream& out) {
    const fs::path dir(run_dir);
    if (!fs::exists(dir / "metrics.csv"))
        throw IoError("report: missing logs under '" + run_dir +
                      "'; expected metrics.csv, selections_session_<t>.csv, "
                      "confusion_session_<t>.csv, session_<t>.ckpt");

    // Per-session metric table, one decimal as in result tables.
    out << "session |   old |   new |   avg |  a_hm |   bwf\n";
    std::ifstream mf(dir / "metrics.csv");
    std::string line;
    std::getline(mf, line);
    int max_session = -1;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<std::string> cells;
        while (std::getline(ss, tok, ',')) cells.push_back(tok);
        if (cells.size() < 6) continue;
        max_session = std::max(max_session, std::stoi(cells[0]));
        auto one_dec = [](const std::string& s) -> std::string {
            if (s == "nan") return "    -";
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%5.1f", std::stod(s));
            return buf;
        };
        char row[160];
        std::snprintf(row, sizeof(row), "%7s | %s | %s | %s | %s | %s\n", cells[0].c_str(),
                      one_dec(cells[1]).c_str(), one_dec(cells[2]).c_str(),
                      one_dec(cells[3]).c_str(), one_dec(cells[4]).c_str(),
                      one_dec(cells[5]).c_str());
        out << row;
    }

    std::vector<double> entropy_trend;
    bool any_selection = false;
    for (int t = 0; t <= max_session; ++t) {
        const fs::path sel_path = dir / ("selections_session_" + std::to_string(t) + ".csv");
        if (!fs::exists(sel_path)) continue;
        const auto pool_size = checkpoint_pool_size(
            (dir / ("session_" + std::to_string(t) + ".ckpt")).string());
        const auto selections = read_selection_csv(sel_path.string(), pool_size.value_or(0));
        if (selections.empty()) continue;
        any_selection = true;
        const auto rep = collapse_diagnostics(selections);

        std::ofstream om(dir / ("order_matrix_session_" + std::to_string(t) + ".csv"));
        om << "index";
        for (int p = 0; p < rep.slots; ++p) om << ",pos_" << (p + 1);
        om << "\n";
        for (int m = 0; m < rep.pool_size; ++m) {
            om << (m + 1);
            for (int p = 0; p < rep.slots; ++p) om << "," << rep.order_matrix.at(m, p);
            om << "\n";
        }
        std::ofstream cp(dir / ("collapse_session_" + std::to_string(t) + ".csv"));
        cp << "index,count,entropy\n";
        for (int m = 0; m < rep.pool_size; ++m) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%ld,%.6f", m + 1,
                          rep.usage[static_cast<std::size_t>(m)],
                          rep.entropy[static_cast<std::size_t>(m)]);
            cp << buf << "\n";
        }
        out << "session " << t << ": pool " << rep.pool_size << ", unused indices: ";
        if (rep.unused.empty()) {
            out << "none";
        } else {
            for (std::size_t i = 0; i < rep.unused.size(); ++i)
                out << (i ? "," : "") << (rep.unused[i] + 1);
        }
        char ebuf[48];
        std::snprintf(ebuf, sizeof(ebuf), "%.4f", rep.mean_entropy);
        out << ", mean selection entropy " << ebuf << "\n";
        entropy_trend.push_back(rep.mean_entropy);
    }
    if (!any_selection) {
        out << "no selection data\n";
        return;
    }
    out << "selection entropy per session:";
    bool nondecreasing = true;
    for (std::size_t i = 0; i < entropy_trend.size(); ++i) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), " %.4f", entropy_trend[i]);
        out << buf;
        if (i > 0 && entropy_trend[i] + 1e-12 < entropy_trend[i - 1]) nondecreasing = false;
    }
    out << (nondecreasing ? " (non-decreasing)" : " (not monotone)") << "\n";
}

}  // namespace poet
