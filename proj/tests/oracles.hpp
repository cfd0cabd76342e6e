#pragma once

// Brute-force references shared by the unit tests and the acceptance run.

#include <cstddef>
#include <string>
#include <vector>

#include "rdlab/evalkit.hpp"

namespace oracle {

// Values live on the grid {-0.5, 0, 0.5}; work in integer halves.
inline constexpr int kGrid[3] = {-1, 0, 1};

struct Op {
    int name;
    int halves;
};

inline void subsets(std::size_t max_size, std::vector<std::vector<Op>>& out, std::vector<Op>& cur, int next_name)
{
    out.push_back(cur);
    if (cur.size() == max_size) {
        return;
    }
    for (int n = next_name; n < 5; ++n) {
        for (int h : kGrid) {
            cur.push_back({n, h});
            subsets(max_size, out, cur, n + 1);
            cur.pop_back();
        }
    }
}

inline std::vector<std::vector<Op>> all_sets(std::size_t min_size, std::size_t max_size)
{
    std::vector<std::vector<Op>> raw, out;
    std::vector<Op> cur;
    subsets(max_size, raw, cur, 0);
    for (auto& s : raw) {
        if (s.size() >= min_size) {
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline double accuracy(const std::vector<Op>& pred, const std::vector<Op>& gt)
{
    int hits = 0;
    for (const auto& g : gt) {
        for (const auto& p : pred) {
            hits += p.name == g.name ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(gt.size());
}

inline double mse(const std::vector<Op>& pred, const std::vector<Op>& gt)
{
    long quarters = 0;
    for (const auto& g : gt) {
        int p_halves = 0;
        for (const auto& p : pred) {
            if (p.name == g.name) {
                p_halves = p.halves;
            }
        }
        quarters += static_cast<long>(p_halves - g.halves) * (p_halves - g.halves);
    }
    return static_cast<double>(quarters) / 4.0 / static_cast<double>(gt.size());
}

inline rdlab::EditSpec to_spec(const std::vector<Op>& ops)
{
    rdlab::EditSpec s;
    for (const auto& o : ops) {
        s.ops.push_back({rdlab::kAllOps[static_cast<std::size_t>(o.name)], o.halves * 0.5});
    }
    return s;
}

inline rdlab::ParsedPrediction to_pred(const std::vector<Op>& ops)
{
    rdlab::ParsedPrediction p;
    p.ops = to_spec(ops).ops;
    return p;
}

struct EnumerationResult {
    std::size_t pairs = 0;
    std::size_t mismatches = 0;
};

/// Every (gt, pred) pair with 1 <= |gt| <= 3 and |pred| <= 5 over five names
/// and the three-value grid.
inline EnumerationResult enumerate_metrics()
{
    EnumerationResult r;
    const auto gts = all_sets(1, 3);
    const auto preds = all_sets(0, 5);
    for (const auto& g : gts) {
        const rdlab::EditSpec spec = to_spec(g);
        for (const auto& p : preds) {
            const rdlab::ParsedPrediction pred = to_pred(p);
            ++r.pairs;
            if (rdlab::accuracy(pred, spec) != accuracy(p, g) || rdlab::param_mse(pred, spec) != mse(p, g)) {
                ++r.mismatches;
            }
        }
    }
    return r;
}

} // namespace oracle
