#pragma once

// Retrieval evaluation: embedding extraction, CMC Rank-k, and mAP.

#include <algorithm>
#include <numeric>
#include <vector>

#include "metabin/data.hpp"
#include "metabin/model.hpp"
#include "metabin/tensor.hpp"

namespace metabin {

struct RetrievalResult {
    double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
    double map = 0.0;
    std::vector<double> average_precision;  // per query
    int64_t n_query = 0, n_gallery = 0;
};

// Eval-mode pre-neck embeddings, processed in chunks. Eval-mode outputs are
// batch-independent, so chunking does not change results.
inline Tensor extract_embeddings(Backbone& model, const Tensor& images, int64_t chunk = 64) {
    if (images.rank() != 4) throw DimensionError("extract_embeddings: expects rank-4 images");
    int64_t n = images.shape()[0];
    int64_t d = model.config().d_emb;
    int64_t img = images.numel() / std::max<int64_t>(n, 1);
    Tensor out({std::max<int64_t>(n, 1), d});
    if (n == 0) return Tensor({0, d});
    for (int64_t start = 0; start < n; start += chunk) {
        int64_t count = std::min(chunk, n - start);
        Tensor part({count, images.shape()[1], images.shape()[2], images.shape()[3]});
        std::copy(images.data() + start * img, images.data() + (start + count) * img, part.data());
        Var emb = model.embed(Var::constant(std::move(part)), Mode::Eval);
        std::copy(emb.value().data(), emb.value().data() + count * d, out.data() + start * d);
    }
    return out;
}

// Euclidean ranking of the gallery per query; ties broken by gallery index.
// CMC Rank-k: fraction of queries with a correct identity in the top k.
// AP per query: mean over correct matches of precision at that match's rank.
inline RetrievalResult rank_and_score(const Tensor& query_emb, const std::vector<int>& query_labels,
                                      const Tensor& gallery_emb,
                                      const std::vector<int>& gallery_labels) {
    if (query_emb.rank() != 2 || gallery_emb.rank() != 2 ||
        query_emb.shape()[1] != gallery_emb.shape()[1])
        throw DimensionError("rank_and_score: embedding shape mismatch");
    int64_t nq = query_emb.shape()[0], ng = gallery_emb.shape()[0], d = query_emb.shape()[1];
    if (static_cast<int64_t>(query_labels.size()) != nq ||
        static_cast<int64_t>(gallery_labels.size()) != ng)
        throw DimensionError("rank_and_score: label count mismatch");
    for (int64_t q = 0; q < nq; ++q) {
        int lbl = query_labels[static_cast<size_t>(q)];
        if (std::find(gallery_labels.begin(), gallery_labels.end(), lbl) == gallery_labels.end())
            throw EvalError("rank_and_score: query identity " + std::to_string(lbl) +
                            " absent from gallery");
    }
    RetrievalResult res;
    res.n_query = nq;
    res.n_gallery = ng;
    int64_t hits1 = 0, hits5 = 0, hits10 = 0;
    for (int64_t q = 0; q < nq; ++q) {
        std::vector<std::pair<double, int64_t>> order(static_cast<size_t>(ng));
        for (int64_t g = 0; g < ng; ++g) {
            double s = 0.0;
            for (int64_t t = 0; t < d; ++t) {
                double x = query_emb[q * d + t] - gallery_emb[g * d + t];
                s += x * x;
            }
            order[static_cast<size_t>(g)] = {std::sqrt(s), g};
        }
        std::sort(order.begin(), order.end());
        int lbl = query_labels[static_cast<size_t>(q)];
        int64_t first_hit = -1;
        int64_t matches = 0;
        double ap = 0.0;
        for (int64_t r = 0; r < ng; ++r) {
            if (gallery_labels[static_cast<size_t>(order[static_cast<size_t>(r)].second)] == lbl) {
                ++matches;
                ap += static_cast<double>(matches) / static_cast<double>(r + 1);
                if (first_hit < 0) first_hit = r;
            }
        }
        ap /= static_cast<double>(matches);
        res.average_precision.push_back(ap);
        if (first_hit < 1) ++hits1;
        if (first_hit < 5) ++hits5;
        if (first_hit < 10) ++hits10;
    }
    res.rank1 = static_cast<double>(hits1) / static_cast<double>(nq);
    res.rank5 = static_cast<double>(hits5) / static_cast<double>(nq);
    res.rank10 = static_cast<double>(hits10) / static_cast<double>(nq);
    res.map = std::accumulate(res.average_precision.begin(), res.average_precision.end(), 0.0) /
              static_cast<double>(nq);
    return res;
}

// Pools every target domain into one retrieval task: the first image of each
// identity is the query, the rest form the gallery.
inline RetrievalResult evaluate_targets(Backbone& model, const DomainDataset& ds) {
    if (ds.target.empty()) throw EvalError("evaluate_targets: dataset has no target domains");
    int C = ds.channels, H = ds.height, W = ds.width;
    size_t img_elems = static_cast<size_t>(C * H * W);
    std::vector<double> qpix, gpix;
    std::vector<int> qlab, glab;
    for (const Domain& dom : ds.target) {
        std::vector<bool> seen(static_cast<size_t>(dom.num_identities), false);
        for (int i = 0; i < dom.num_images(); ++i) {
            int local = dom.image_identity[static_cast<size_t>(i)];
            int gid = dom.global_ids[static_cast<size_t>(local)];
            const float* src = dom.pixels.data() + static_cast<size_t>(i) * img_elems;
            bool is_query = !seen[static_cast<size_t>(local)];
            seen[static_cast<size_t>(local)] = true;
            auto& pix = is_query ? qpix : gpix;
            auto& lab = is_query ? qlab : glab;
            for (size_t t = 0; t < img_elems; ++t) pix.push_back(static_cast<double>(src[t]));
            lab.push_back(gid);
        }
    }
    Tensor qimg({static_cast<int64_t>(qlab.size()), C, H, W}, std::move(qpix));
    Tensor gimg({static_cast<int64_t>(glab.size()), C, H, W}, std::move(gpix));
    Tensor qe = extract_embeddings(model, qimg);
    Tensor ge = extract_embeddings(model, gimg);
    return rank_and_score(qe, qlab, ge, glab);
}

}  // namespace metabin
