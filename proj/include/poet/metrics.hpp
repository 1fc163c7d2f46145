#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poet/common.hpp"
#include "poet/tensor.hpp"

namespace poet {

struct AccuracyBreakdown {
    double avg = 0;                     // percent over all samples
    std::optional<double> old_acc;      // classes of sessions < current
    std::optional<double> new_acc;      // classes of the current session
    std::map<int, double> per_class;    // percent per class id
};

// predictions/labels are aligned; class_session maps every class id to the
// session that introduced it.
inline AccuracyBreakdown compute_accuracies(const std::vector<int>& predictions,
                                            const std::vector<int>& labels,
                                            const std::map<int, int>& class_session,
                                            int current_session) {
    check(predictions.size() == labels.size(), "compute_accuracies: size mismatch");
    if (labels.empty()) throw ContractError("compute_accuracies: no samples");
    long total = 0, total_ok = 0;
    long n_old = 0, ok_old = 0, n_new = 0, ok_new = 0;
    std::map<int, std::pair<long, long>> per_class;  // class -> (count, correct)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        const auto it = class_session.find(y);
        if (it == class_session.end())
            throw ContractError("compute_accuracies: unknown class id " + std::to_string(y));
        const bool ok = predictions[i] == y;
        ++total;
        total_ok += ok;
        auto& pc = per_class[y];
        ++pc.first;
        pc.second += ok;
        if (it->second < current_session) {
            ++n_old;
            ok_old += ok;
        } else if (it->second == current_session) {
            ++n_new;
            ok_new += ok;
        } else {
            throw ContractError("compute_accuracies: class " + std::to_string(y) +
                                " belongs to a future session");
        }
    }
    if (n_new == 0)
        throw ContractError("compute_accuracies: current session has no test samples");
    AccuracyBreakdown out;
    out.avg = 100.0 * static_cast<double>(total_ok) / static_cast<double>(total);
    out.new_acc = 100.0 * static_cast<double>(ok_new) / static_cast<double>(n_new);
    if (n_old > 0)
        out.old_acc = 100.0 * static_cast<double>(ok_old) / static_cast<double>(n_old);
    for (const auto& [c, p] : per_class)
        out.per_class[c] = 100.0 * static_cast<double>(p.second) / static_cast<double>(p.first);
    return out;
}

// 2*old*new / (old+new); 0 when both are 0.
inline double harmonic_mean(double old_acc, double new_acc) {
    check(old_acc >= 0 && new_acc >= 0, "harmonic_mean: accuracies must be >= 0");
    if (old_acc + new_acc == 0) return 0;
    return 2.0 * old_acc * new_acc / (old_acc + new_acc);
}

// a[l][j]: accuracy of task j's classes measured after training session l,
// for 1 <= j <= l. Stored lower-triangular, 1-based access.
struct AccuracyHistory {
    std::vector<std::vector<double>> rows;

    int tasks() const { return static_cast<int>(rows.size()); }

    void push_row(std::vector<double> row) {
        check(static_cast<int>(row.size()) == tasks() + 1,
              "AccuracyHistory: row " + std::to_string(tasks() + 1) + " must have " +
                  std::to_string(tasks() + 1) + " entries");
        rows.push_back(std::move(row));
    }

    double at(int l, int j) const {
        check(l >= 1 && l <= tasks() && j >= 1 && j <= l,
              "AccuracyHistory: index (" + std::to_string(l) + "," + std::to_string(j) +
                  ") outside the lower triangle");
        return rows[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(j - 1)];
    }
};

// Backward forgetting after task k:
//   F_k = 1/(k-1) * sum_{j=1}^{k-1} [ max_{l in {j..k-1}} a[l][j] - a[k][j] ].
// The max runs from l=j because a[l][j] only exists once task j has been
// trained.
inline double bwf(const AccuracyHistory& history, int k) {
    if (k < 2) throw ContractError("bwf: k must be >= 2");
    check(history.tasks() >= k, "bwf: history has " + std::to_string(history.tasks()) +
                                    " rows, need " + std::to_string(k));
    double sum = 0;
    for (int j = 1; j <= k - 1; ++j) {
        double peak = history.at(j, j);
        for (int l = j + 1; l <= k - 1; ++l) peak = std::max(peak, history.at(l, j));
        sum += peak - history.at(k, j);
    }
    return sum / static_cast<double>(k - 1);
}

struct ConfusionMatrix {
    std::vector<int> classes;  // row/column order
    Tensor<long> counts;       // rows = true class, cols = predicted

    long at(int true_idx, int pred_idx) const { return counts.at(true_idx, pred_idx); }
};

inline ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                        const std::vector<int>& labels,
                                        const std::vector<int>& seen_classes) {
    check(predictions.size() == labels.size(), "confusion_matrix: size mismatch");
    ConfusionMatrix cm;
    cm.classes = seen_classes;
    const int K = static_cast<int>(seen_classes.size());
    cm.counts = Tensor<long>({K, K});
    std::map<int, int> pos;
    for (int i = 0; i < K; ++i) pos[seen_classes[static_cast<std::size_t>(i)]] = i;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto ti = pos.find(labels[i]);
        const auto pi = pos.find(predictions[i]);
        check(ti != pos.end(), "confusion_matrix: label " + std::to_string(labels[i]) +
                                   " not in seen classes");
        check(pi != pos.end(), "confusion_matrix: prediction " +
                                   std::to_string(predictions[i]) + " not in seen classes");
        ++cm.counts.at(ti->second, pi->second);
    }
    return cm;
}

// Everything reported after one session. Percentages are exact ratios; any
// rounding happens at emission time.
struct SessionReport {
    int session = 0;
    double avg = 0;
    std::optional<double> old_acc;
    std::optional<double> new_acc;
    std::optional<double> a_hm;
    std::optional<double> bwf_value;
    std::map<int, double> per_class;
    ConfusionMatrix confusion;
    double wall_seconds = 0;
};

}  // namespace poet
