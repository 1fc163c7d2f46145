#include <catch2/catch_amalgamated.hpp>

#include "poet/metrics.hpp"

using namespace poet;
using Catch::Approx;

TEST_CASE("harmonic mean reproduces reported trade-off values") {
    // Final-session Old/New of the gesture benchmark round to the published 56.2.
    CHECK(harmonic_mean(45.9, 72.4) == Approx(56.18).margin(0.05));
    // Final-session Old/New of the activity benchmark: 56.49, within 56.3 +- 3.2.
    const double hm = harmonic_mean(57.2, 55.8);
    CHECK(hm == Approx(56.49).margin(0.005));
    CHECK(std::fabs(hm - 56.3) <= 3.2);
}

TEST_CASE("harmonic mean identities") {
    CHECK(harmonic_mean(37.0, 37.0) == Approx(37.0));
    CHECK(harmonic_mean(0.0, 88.0) == 0.0);
    CHECK(harmonic_mean(0.0, 0.0) == 0.0);
}

TEST_CASE("harmonic mean is symmetric and bounded by the arithmetic mean") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const double a = rng.uniform(0.0, 100.0);
        const double b = rng.uniform(0.0, 100.0);
        const double hm = harmonic_mean(a, b);
        CHECK(hm == Approx(harmonic_mean(b, a)));
        CHECK(hm <= (a + b) / 2.0 + 1e-12);
        CHECK(hm <= std::max(a, b) + 1e-12);
    }
    CHECK(harmonic_mean(42.0, 42.0) == Approx((42.0 + 42.0) / 2.0));
}

namespace {

AccuracyHistory history_from(const std::vector<std::vector<double>>& rows) {
    AccuracyHistory h;
    for (const auto& r : rows) h.push_row(r);
    return h;
}

// Direct enumeration of the forgetting formula, kept independent of bwf().
double bwf_oracle(const AccuracyHistory& h, int k) {
    double total = 0;
    for (int j = 1; j <= k - 1; ++j) {
        double peak = -1e300;
        for (int l = j; l <= k - 1; ++l) peak = std::max(peak, h.at(l, j));
        total += peak - h.at(k, j);
    }
    return total / (k - 1);
}

}  // namespace

TEST_CASE("bwf hand-built case") {
    const auto h = history_from({{80}, {70, 60}, {60, 50, 40}});
    CHECK(bwf(h, 3) == Approx(15.0));
}

TEST_CASE("bwf of a constant history is zero") {
    const auto h = history_from({{55}, {55, 55}, {55, 55, 55}, {55, 55, 55, 55}});
    CHECK(bwf(h, 2) == Approx(0.0));
    CHECK(bwf(h, 3) == Approx(0.0));
    CHECK(bwf(h, 4) == Approx(0.0));
}

TEST_CASE("bwf can be negative when a task improves") {
    const auto h = history_from({{50}, {60, 30}});
    CHECK(bwf(h, 2) == Approx(-10.0));
}

TEST_CASE("bwf k=2 reduction and oracle equivalence on random histories") {
    Rng rng(23);
    for (int rep = 0; rep < 100; ++rep) {
        const int tasks = 2 + rng.uniform_int(4);
        AccuracyHistory h;
        for (int l = 1; l <= tasks; ++l) {
            std::vector<double> row;
            for (int j = 1; j <= l; ++j) row.push_back(rng.uniform(0.0, 100.0));
            h.push_row(row);
        }
        CHECK(bwf(h, 2) == Approx(h.at(1, 1) - h.at(2, 1)));
        for (int k = 2; k <= tasks; ++k) CHECK(bwf(h, k) == Approx(bwf_oracle(h, k)));
    }
}

TEST_CASE("bwf rejects k below 2") {
    const auto h = history_from({{80}, {70, 60}});
    CHECK_THROWS_AS(bwf(h, 1), ContractError);
}

TEST_CASE("accuracy breakdown counts old and new pools") {
    // 4 old samples with 3 correct, 2 new samples with 1 correct.
    const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
    const std::vector<int> preds = {0, 0, 1, 9, 2, 9};
    const std::map<int, int> sessions = {{0, 0}, {1, 0}, {2, 1}, {9, 1}};
    const auto acc = compute_accuracies(preds, labels, sessions, 1);
    CHECK(acc.old_acc.value() == Approx(75.0));
    CHECK(acc.new_acc.value() == Approx(50.0));
    CHECK(acc.avg == Approx(100.0 * 4.0 / 6.0));
    CHECK(acc.per_class.at(0) == Approx(100.0));
    CHECK(acc.per_class.at(1) == Approx(50.0));
}

TEST_CASE("accuracy breakdown trivial and error cases") {
    const std::map<int, int> sessions = {{0, 0}, {1, 1}};
    const auto perfect = compute_accuracies({0, 1}, {0, 1}, sessions, 1);
    CHECK(perfect.avg == Approx(100.0));
    CHECK(perfect.old_acc.value() == Approx(100.0));
    CHECK(perfect.new_acc.value() == Approx(100.0));

    // no samples from the current session -> new accuracy undefined
    CHECK_THROWS_AS(compute_accuracies({0}, {0}, sessions, 1), ContractError);
    // unknown class id
    CHECK_THROWS_AS(compute_accuracies({7}, {7}, sessions, 1), ContractError);
}

TEST_CASE("avg equals the count-weighted combination of old and new") {
    Rng rng(31);
    for (int rep = 0; rep < 50; ++rep) {
        std::map<int, int> sessions;
        for (int c = 0; c < 6; ++c) sessions[c] = c < 4 ? 0 : 1;
        std::vector<int> labels, preds;
        long n_old = 0, n_new = 0;
        for (int i = 0; i < 40; ++i) {
            const int y = rng.uniform_int(6);
            labels.push_back(y);
            preds.push_back(rng.uniform() < 0.6 ? y : rng.uniform_int(6));
            (y < 4 ? n_old : n_new)++;
        }
        if (n_new == 0 || n_old == 0) continue;
        const auto acc = compute_accuracies(preds, labels, sessions, 1);
        const double combined = (static_cast<double>(n_old) * acc.old_acc.value() +
                                 static_cast<double>(n_new) * acc.new_acc.value()) /
                                static_cast<double>(n_old + n_new);
        CHECK(std::fabs(acc.avg - combined) < 1e-9);
    }
}

TEST_CASE("confusion matrix tallies") {
    const std::vector<int> classes = {3, 5, 8};
    SECTION("perfect predictor is diagonal") {
        const auto cm = confusion_matrix({3, 5, 8, 8}, {3, 5, 8, 8}, classes);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                CHECK(cm.at(i, j) == (i == j ? (i == 2 ? 2 : 1) : 0));
    }
    SECTION("row sums equal per-class counts and a hand tally matches") {
        const std::vector<int> labels = {3, 3, 5};
        const std::vector<int> preds = {5, 3, 5};
        const auto cm = confusion_matrix(preds, labels, classes);
        CHECK(cm.at(0, 0) == 1);
        CHECK(cm.at(0, 1) == 1);
        CHECK(cm.at(1, 1) == 1);
        long row0 = 0;
        for (int j = 0; j < 3; ++j) row0 += cm.at(0, j);
        CHECK(row0 == 2);
    }
}

TEST_CASE("session report invariants on harmonic mean") {
    Rng rng(41);
    for (int i = 0; i < 100; ++i) {
        const double o = rng.uniform(0.0, 100.0);
        const double n = rng.uniform(0.0, 100.0);
        const double hm = harmonic_mean(o, n);
        CHECK(hm >= 0.0);
        CHECK(hm <= 100.0);
        CHECK(hm <= std::max(o, n) + 1e-12);
        CHECK(hm <= (o + n) / 2.0 + 1e-12);
    }
}
