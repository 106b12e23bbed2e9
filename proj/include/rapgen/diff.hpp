#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace rapgen {

// Longest-common-subsequence matching between two line vectors. Returns the
// matched index pairs (i, j), strictly increasing in both components.
inline std::vector<std::pair<int, int>> lcs_pairs(const std::vector<std::string>& a,
                                                  const std::vector<std::string>& b) {
    const int n = static_cast<int>(a.size());
    const int m = static_cast<int>(b.size());
    std::vector<std::vector<int>> dp(static_cast<size_t>(n) + 1,
                                     std::vector<int>(static_cast<size_t>(m) + 1, 0));
    for (int i = n - 1; i >= 0; --i) {
        for (int j = m - 1; j >= 0; --j) {
            auto& cell = dp[static_cast<size_t>(i)][static_cast<size_t>(j)];
            if (a[static_cast<size_t>(i)] == b[static_cast<size_t>(j)])
                cell = dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j) + 1] + 1;
            else
                cell = std::max(dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j)],
                                dp[static_cast<size_t>(i)][static_cast<size_t>(j) + 1]);
        }
    }
    std::vector<std::pair<int, int>> pairs;
    int i = 0, j = 0;
    while (i < n && j < m) {
        if (a[static_cast<size_t>(i)] == b[static_cast<size_t>(j)]) {
            pairs.emplace_back(i, j);
            ++i;
            ++j;
        } else if (dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j)] >=
                   dp[static_cast<size_t>(i)][static_cast<size_t>(j) + 1]) {
            ++i;
        } else {
            ++j;
        }
    }
    return pairs;
}

// One maximal run of unmatched lines between two consecutive LCS matches:
// `deleted` source lines and `inserted` target lines.
struct DiffHunk {
    int deleted = 0;
    int inserted = 0;
};

inline std::vector<DiffHunk> diff_hunks(size_t source_count, size_t target_count,
                                        const std::vector<std::pair<int, int>>& matches) {
    std::vector<DiffHunk> hunks;
    int pi = 0, pj = 0;
    auto flush = [&](int i, int j) {
        DiffHunk h{i - pi, j - pj};
        if (h.deleted > 0 || h.inserted > 0) hunks.push_back(h);
    };
    for (auto [i, j] : matches) {
        flush(i, j);
        pi = i + 1;
        pj = j + 1;
    }
    flush(static_cast<int>(source_count), static_cast<int>(target_count));
    return hunks;
}

}  // namespace rapgen
