#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "poet/checkpoint.hpp"

using namespace poet;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("poet_ckpt_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

ContinualState<float> trained_state(int sessions_done) {
    const auto topo = SkeletonTopology::chain(3);
    const auto ds = synth_generate(topo, 8, 3, 2, 4, 0.05, 21);
    const auto pd = make_protocol(ds, 4, 2, 2, 2, {}, 5);
    BackboneConfig mc;
    mc.layer_channels = {4, 6};
    TrainConfig tc;
    tc.pretrain_epochs = 2;
    tc.base_epochs = 2;
    tc.session_epochs = 2;
    tc.base_batch = 6;
    tc.seed = 9;
    tc.pool_mode = PoolMode::Expand;
    tc.expand_prompts = 1;
    auto st = train_base<float>(mc, tc, topo, 4, pd);
    evaluate_session(st, ds, 0);
    for (int t = 1; t <= sessions_done; ++t) {
        train_session(st, pd.session_train[static_cast<std::size_t>(t)], t);
        evaluate_session(st, ds, t);
    }
    return st;
}

}  // namespace

TEST_CASE("save -> load -> save is byte-identical") {
    TempDir tmp;
    auto st = trained_state(1);
    save_checkpoint(st, tmp.file("a.ckpt"));
    auto loaded = load_checkpoint<float>(tmp.file("a.ckpt"));
    save_checkpoint(loaded, tmp.file("b.ckpt"));
    CHECK(read_bytes(tmp.file("a.ckpt")) == read_bytes(tmp.file("b.ckpt")));
}

TEST_CASE("round trip restores parameters and manifest bit-exactly") {
    TempDir tmp;
    auto st = trained_state(2);
    save_checkpoint(st, tmp.file("s.ckpt"));
    auto loaded = load_checkpoint<float>(tmp.file("s.ckpt"));

    CHECK(loaded.completed_session == st.completed_session);
    CHECK(loaded.frames == st.frames);
    CHECK(loaded.row_classes == st.row_classes);
    CHECK(loaded.protocol.base_classes == st.protocol.base_classes);
    CHECK(loaded.protocol.session_count() == st.protocol.session_count());
    CHECK(loaded.history.tasks() == st.history.tasks());
    for (int l = 1; l <= st.history.tasks(); ++l)
        for (int j = 1; j <= l; ++j) CHECK(loaded.history.at(l, j) == st.history.at(l, j));
    CHECK(loaded.codebook->frozen_prompts == st.codebook->frozen_prompts);
    CHECK(loaded.codebook->new_block_start == st.codebook->new_block_start);
    CHECK(loaded.model.head.frozen_rows == st.model.head.frozen_rows);

    auto a = st.named_params();
    auto b = loaded.named_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second->value.shape == b[i].second->value.shape);
        CHECK(a[i].second->value.v == b[i].second->value.v);
        CHECK(a[i].second->frozen == b[i].second->frozen);
    }
}

TEST_CASE("loaded state continues training identically") {
    TempDir tmp;
    const auto topo = SkeletonTopology::chain(3);
    const auto ds = synth_generate(topo, 8, 3, 2, 4, 0.05, 21);
    const auto pd = make_protocol(ds, 4, 2, 2, 2, {}, 5);
    BackboneConfig mc;
    mc.layer_channels = {4, 6};
    TrainConfig tc;
    tc.pretrain_epochs = 2;
    tc.base_epochs = 2;
    tc.session_epochs = 2;
    tc.base_batch = 6;
    tc.seed = 9;
    auto st = train_base<float>(mc, tc, topo, 4, pd);
    evaluate_session(st, ds, 0);
    save_checkpoint(st, tmp.file("base.ckpt"));

    auto resumed = load_checkpoint<float>(tmp.file("base.ckpt"));
    train_session(st, pd.session_train[1], 1);
    train_session(resumed, pd.session_train[1], 1);
    const auto r1 = evaluate_session(st, ds, 1);
    const auto r2 = evaluate_session(resumed, ds, 1);
    CHECK(r1.avg == r2.avg);
    CHECK(r1.old_acc == r2.old_acc);
    CHECK(r1.new_acc == r2.new_acc);
}

TEST_CASE("manifest session index increments per session") {
    TempDir tmp;
    auto st0 = trained_state(0);
    auto st1 = trained_state(1);
    save_checkpoint(st0, tmp.file("s0.ckpt"));
    save_checkpoint(st1, tmp.file("s1.ckpt"));
    CHECK(load_checkpoint<float>(tmp.file("s0.ckpt")).completed_session == 0);
    CHECK(load_checkpoint<float>(tmp.file("s1.ckpt")).completed_session == 1);
}

TEST_CASE("a truncated blob names the damaged tensor") {
    TempDir tmp;
    auto st = trained_state(0);
    save_checkpoint(st, tmp.file("full.ckpt"));
    auto bytes = read_bytes(tmp.file("full.ckpt"));
    // chop the final tensor's data off
    const auto last = st.named_params().back();
    bytes.resize(bytes.size() - 4 * static_cast<std::size_t>(last.second->numel()));
    std::ofstream(tmp.file("cut.ckpt"), std::ios::binary) << bytes;
    try {
        load_checkpoint<float>(tmp.file("cut.ckpt"));
        FAIL("expected an integrity error");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find(last.first) != std::string::npos);
    }
}

TEST_CASE("a missing manifest key is an integrity error") {
    TempDir tmp;
    auto st = trained_state(0);
    save_checkpoint(st, tmp.file("ok.ckpt"));
    auto bytes = read_bytes(tmp.file("ok.ckpt"));
    const auto pos = bytes.find("frames = ");
    bytes.replace(pos, 9, "framez = ");
    std::ofstream(tmp.file("bad.ckpt"), std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint<float>(tmp.file("bad.ckpt")), IntegrityError);
}
