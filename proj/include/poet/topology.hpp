#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "poet/common.hpp"
#include "poet/tensor.hpp"

namespace poet {

// Undirected joint graph of the skeleton.
struct SkeletonTopology {
    int joint_count = 0;
    std::vector<std::pair<int, int>> edges;

    static SkeletonTopology chain(int joints) {
        SkeletonTopology t;
        t.joint_count = joints;
        for (int j = 0; j + 1 < joints; ++j) t.edges.emplace_back(j, j + 1);
        return t;
    }

    void validate() const {
        if (joint_count < 1) throw ConfigError("topology: joint_count must be >= 1");
        for (const auto& [a, b] : edges) {
            if (a < 0 || a >= joint_count || b < 0 || b >= joint_count)
                throw ConfigError("topology: edge endpoint out of range");
            if (a == b) throw ConfigError("topology: self-loops are not allowed");
        }
        if (!connected()) throw ConfigError("topology: graph must be connected");
    }

    bool connected() const {
        if (joint_count <= 1) return true;
        std::vector<std::vector<int>> adj(static_cast<std::size_t>(joint_count));
        for (const auto& [a, b] : edges) {
            adj[static_cast<std::size_t>(a)].push_back(b);
            adj[static_cast<std::size_t>(b)].push_back(a);
        }
        std::vector<char> seen(static_cast<std::size_t>(joint_count), 0);
        std::vector<int> stack = {0};
        seen[0] = 1;
        int count = 1;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v : adj[static_cast<std::size_t>(u)]) {
                if (!seen[static_cast<std::size_t>(v)]) {
                    seen[static_cast<std::size_t>(v)] = 1;
                    ++count;
                    stack.push_back(v);
                }
            }
        }
        return count == joint_count;
    }

    // Symmetrically normalized adjacency with self-loops:
    // D^{-1/2} (A + I) D^{-1/2}.
    template <typename Real>
    Tensor<Real> normalized_adjacency() const {
        const int J = joint_count;
        Tensor<double> a({J, J});
        for (int j = 0; j < J; ++j) a.at(j, j) = 1.0;
        for (const auto& [u, v] : edges) {
            a.at(u, v) = 1.0;
            a.at(v, u) = 1.0;
        }
        std::vector<double> deg(static_cast<std::size_t>(J), 0.0);
        for (int i = 0; i < J; ++i)
            for (int j = 0; j < J; ++j) deg[static_cast<std::size_t>(i)] += a.at(i, j);
        Tensor<Real> out({J, J});
        for (int i = 0; i < J; ++i)
            for (int j = 0; j < J; ++j)
                out.at(i, j) = static_cast<Real>(
                    a.at(i, j) / std::sqrt(deg[static_cast<std::size_t>(i)] *
                                           deg[static_cast<std::size_t>(j)]));
        return out;
    }
};

}  // namespace poet
