#pragma once

// Training objectives: smoothed cross-entropy, batch-hard triplet,
// intra-domain scatter, inter-domain shuffle, and their composites.

#include <limits>
#include <vector>

#include "metabin/tensor.hpp"

namespace metabin {

struct LabeledBatch {
    Var embeddings;               // (N, d_emb), pre-neck
    Var logits;                   // optional (N, M)
    std::vector<int> identity_labels;
    std::vector<int> domain_labels;
};

// Mean cross-entropy against targets smoothed to (1-eps) on the true class
// plus eps/M spread over all classes.
inline Var cross_entropy_smoothed(const Var& logits, const std::vector<int>& labels, double eps) {
    if (logits.value().rank() != 2) throw DimensionError("cross_entropy_smoothed: expects rank-2 logits");
    int64_t n = logits.shape()[0], m = logits.shape()[1];
    if (eps < 0.0 || eps >= 1.0) throw ContractError("cross_entropy_smoothed: epsilon must be in [0,1)");
    if (m < 2) throw ContractError("cross_entropy_smoothed: need at least 2 classes");
    if (static_cast<int64_t>(labels.size()) != n)
        throw DimensionError("cross_entropy_smoothed: label count mismatch");
    Tensor target({n, m});
    double off = eps / static_cast<double>(m);
    for (int64_t i = 0; i < n; ++i) {
        int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= m)
            throw ContractError("cross_entropy_smoothed: label " + std::to_string(y) +
                                " out of range for M=" + std::to_string(m));
        for (int64_t j = 0; j < m; ++j) target[i * m + j] = off;
        target[i * m + y] += 1.0 - eps;
    }
    Var ls = log_softmax(logits);
    return mul_scalar(sum(mul_const(ls, target)), -1.0 / static_cast<double>(n));
}

namespace detail {

// Plain distance matrix on embedding values (no graph); used for mining.
inline std::vector<double> distance_values(const Tensor& e) {
    int64_t n = e.shape()[0], d = e.shape()[1];
    std::vector<double> dist(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < d; ++t) {
                double x = e[i * d + t] - e[j * d + t];
                s += x * x;
            }
            double v = std::sqrt(s);
            dist[static_cast<size_t>(i * n + j)] = v;
            dist[static_cast<size_t>(j * n + i)] = v;
        }
    return dist;
}

// argmax/argmin over candidate indices, ties to the lowest index; reports the
// selection margin so gradient checks can exclude tie points.
inline int64_t select_extreme(const std::vector<double>& dist, int64_t n, int64_t anchor,
                              const std::vector<int64_t>& candidates, bool want_max) {
    int64_t best = candidates[0];
    for (int64_t c : candidates) {
        double dv = dist[static_cast<size_t>(anchor * n + c)];
        double bv = dist[static_cast<size_t>(anchor * n + best)];
        if (want_max ? dv > bv : dv < bv) best = c;
    }
    double margin = std::numeric_limits<double>::infinity();
    for (int64_t c : candidates)
        if (c != best)
            margin = std::min(margin, std::abs(dist[static_cast<size_t>(anchor * n + c)] -
                                               dist[static_cast<size_t>(anchor * n + best)]));
    if (candidates.size() > 1) KinkMonitor::report(margin);
    return best;
}

}  // namespace detail

// Mean over anchors of [d(a, hardest positive) - d(a, hardest negative) + m]_+.
// Hardest positive = max distance, hardest negative = min distance, ties to
// the lowest index. Gradient flows through the selected pairs only.
inline Var batch_hard_triplet(const Var& emb, const std::vector<int>& ids, double margin) {
    if (emb.value().rank() != 2) throw DimensionError("batch_hard_triplet: expects rank-2 embeddings");
    int64_t n = emb.shape()[0];
    if (static_cast<int64_t>(ids.size()) != n)
        throw DimensionError("batch_hard_triplet: label count mismatch");
    if (n < 2) throw BatchCompositionError("batch_hard_triplet: batch too small");
    std::vector<double> dist = detail::distance_values(emb.value());
    std::vector<Var> terms;
    terms.reserve(static_cast<size_t>(n));
    for (int64_t a = 0; a < n; ++a) {
        std::vector<int64_t> pos, neg;
        for (int64_t j = 0; j < n; ++j) {
            if (j == a) continue;
            (ids[static_cast<size_t>(j)] == ids[static_cast<size_t>(a)] ? pos : neg).push_back(j);
        }
        if (pos.empty())
            throw BatchCompositionError("batch_hard_triplet: anchor " + std::to_string(a) +
                                        " has no positive");
        if (neg.empty())
            throw BatchCompositionError("batch_hard_triplet: anchor " + std::to_string(a) +
                                        " has no negative");
        int64_t p = detail::select_extreme(dist, n, a, pos, /*want_max=*/true);
        int64_t g = detail::select_extreme(dist, n, a, neg, /*want_max=*/false);
        Var av = row(emb, a);
        Var d_ap = euclidean_distance(av, row(emb, p));
        Var d_an = euclidean_distance(av, row(emb, g));
        terms.push_back(relu(d_ap - d_an + margin));
    }
    Var total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
    return mul_scalar(total, 1.0 / static_cast<double>(n));
}

// (1/N) sum over domains and samples of cos(f_i^k, domain centroid).
// Minimizing this spreads each domain's features apart.
inline Var intra_domain_scatter(const Var& emb, const std::vector<int>& domains) {
    if (emb.value().rank() != 2) throw DimensionError("intra_domain_scatter: expects rank-2 embeddings");
    int64_t n = emb.shape()[0];
    if (static_cast<int64_t>(domains.size()) != n)
        throw DimensionError("intra_domain_scatter: domain label count mismatch");
    if (n == 0) throw ContractError("intra_domain_scatter: empty batch");
    std::vector<int> uniq;
    for (int d : domains)
        if (std::find(uniq.begin(), uniq.end(), d) == uniq.end()) uniq.push_back(d);
    std::vector<Var> terms;
    for (int k : uniq) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < n; ++i)
            if (domains[static_cast<size_t>(i)] == k) idx.push_back(i);
        Var centroid = rows_mean(emb, idx);
        for (int64_t i : idx) terms.push_back(cosine_similarity(row(emb, i), centroid));
    }
    Var total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
    return mul_scalar(total, 1.0 / static_cast<double>(n));
}

// Mean over anchors of softplus(d(a, nearest inter-domain negative)
//                             - d(a, nearest intra-domain negative)).
inline Var inter_domain_shuffle(const Var& emb, const std::vector<int>& ids,
                                const std::vector<int>& domains) {
    if (emb.value().rank() != 2) throw DimensionError("inter_domain_shuffle: expects rank-2 embeddings");
    int64_t n = emb.shape()[0];
    if (static_cast<int64_t>(ids.size()) != n || static_cast<int64_t>(domains.size()) != n)
        throw DimensionError("inter_domain_shuffle: label count mismatch");
    std::vector<double> dist = detail::distance_values(emb.value());
    std::vector<Var> terms;
    terms.reserve(static_cast<size_t>(n));
    for (int64_t a = 0; a < n; ++a) {
        std::vector<int64_t> inter, intra;
        for (int64_t j = 0; j < n; ++j) {
            if (j == a || ids[static_cast<size_t>(j)] == ids[static_cast<size_t>(a)]) continue;
            (domains[static_cast<size_t>(j)] == domains[static_cast<size_t>(a)] ? intra : inter)
                .push_back(j);
        }
        if (inter.empty())
            throw BatchCompositionError("inter_domain_shuffle: anchor " + std::to_string(a) +
                                        " has no inter-domain negative");
        if (intra.empty())
            throw BatchCompositionError("inter_domain_shuffle: anchor " + std::to_string(a) +
                                        " has no intra-domain negative");
        int64_t nm = detail::select_extreme(dist, n, a, inter, /*want_max=*/false);
        int64_t np = detail::select_extreme(dist, n, a, intra, /*want_max=*/false);
        Var av = row(emb, a);
        Var d_inter = euclidean_distance(av, row(emb, nm));
        Var d_intra = euclidean_distance(av, row(emb, np));
        terms.push_back(softplus(d_inter - d_intra));
    }
    Var total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
    return mul_scalar(total, 1.0 / static_cast<double>(n));
}

// L_base = L_ce + L_tr
inline Var base_loss(const Var& logits, const Var& emb, const std::vector<int>& ids, double margin,
                     double eps) {
    return cross_entropy_smoothed(logits, ids, eps) + batch_hard_triplet(emb, ids, margin);
}

// L_mtr = L_scat + L_shuf + L_tr
inline Var meta_train_loss(const Var& emb, const std::vector<int>& ids,
                           const std::vector<int>& domains, double margin) {
    return intra_domain_scatter(emb, domains) + inter_domain_shuffle(emb, ids, domains) +
           batch_hard_triplet(emb, ids, margin);
}

}  // namespace metabin
