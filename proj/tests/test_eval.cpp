#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "metabin/eval.hpp"

using namespace metabin;

namespace {

Tensor emb1d(const std::vector<double>& xs) {
    return Tensor({static_cast<int64_t>(xs.size()), 1}, xs);
}

// independent reference: explicit ranking + direct AP/CMC formulas
RetrievalResult oracle(const Tensor& qe, const std::vector<int>& ql, const Tensor& ge,
                       const std::vector<int>& gl) {
    int64_t nq = qe.shape()[0], ng = ge.shape()[0], d = qe.shape()[1];
    RetrievalResult res;
    res.n_query = nq;
    res.n_gallery = ng;
    double h1 = 0, h5 = 0, h10 = 0, msum = 0;
    for (int64_t q = 0; q < nq; ++q) {
        std::vector<int64_t> idx(static_cast<size_t>(ng));
        std::iota(idx.begin(), idx.end(), 0);
        auto dist = [&](int64_t g) {
            double s = 0;
            for (int64_t t = 0; t < d; ++t) {
                double x = qe[q * d + t] - ge[g * d + t];
                s += x * x;
            }
            return std::sqrt(s);
        };
        std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
            double da = dist(a), db = dist(b);
            return da != db ? da < db : a < b;
        });
        int matches = 0, first = -1;
        double ap = 0;
        for (int64_t r = 0; r < ng; ++r)
            if (gl[static_cast<size_t>(idx[static_cast<size_t>(r)])] == ql[static_cast<size_t>(q)]) {
                ++matches;
                ap += static_cast<double>(matches) / static_cast<double>(r + 1);
                if (first < 0) first = static_cast<int>(r);
            }
        ap /= matches;
        res.average_precision.push_back(ap);
        msum += ap;
        h1 += first < 1;
        h5 += first < 5;
        h10 += first < 10;
    }
    res.rank1 = h1 / nq;
    res.rank5 = h5 / nq;
    res.rank10 = h10 / nq;
    res.map = msum / nq;
    return res;
}

}  // namespace

TEST_CASE("AP of ranking [A, B, A] is 5/6") {
    Tensor qe = emb1d({0.0});
    Tensor ge = emb1d({1.0, 2.0, 3.0});
    RetrievalResult r = rank_and_score(qe, {0}, ge, {0, 1, 0});
    CHECK_THAT(r.map, Catch::Matchers::WithinAbs(0.833333, 1e-6));
    CHECK(r.rank1 == 1.0);
}

TEST_CASE("AP matches the formula for every order of a 3-item gallery") {
    // gallery at fixed distances 1 < 2 < 3; permute which items carry label A
    struct Case {
        std::vector<int> labels;
        double ap;
    };
    std::vector<Case> cases = {
        {{0, 0, 1}, (1.0 / 1 + 2.0 / 2) / 2}, {{0, 1, 0}, (1.0 / 1 + 2.0 / 3) / 2},
        {{1, 0, 0}, (1.0 / 2 + 2.0 / 3) / 2}, {{0, 1, 1}, 1.0},
        {{1, 0, 1}, 1.0 / 2},                 {{1, 1, 0}, 1.0 / 3}};
    Tensor qe = emb1d({0.0});
    Tensor ge = emb1d({1.0, 2.0, 3.0});
    for (const Case& c : cases) {
        RetrievalResult r = rank_and_score(qe, {0}, ge, c.labels);
        CHECK_THAT(r.average_precision[0], Catch::Matchers::WithinAbs(c.ap, 1e-15));
    }
}

TEST_CASE("rank-1 is perfect when the nearest item is always correct") {
    Tensor qe = emb1d({0.0, 10.0});
    Tensor ge = emb1d({1.0, 5.0, 11.0, 15.0});
    RetrievalResult r = rank_and_score(qe, {0, 1}, ge, {0, 1, 1, 0});
    CHECK(r.rank1 == 1.0);
}

TEST_CASE("evaluator agrees exactly with a brute-force oracle on small galleries") {
    std::mt19937_64 rng(301);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_int_distribution<int> gal(4, 8), idc(2, 4);
    for (int trial = 0; trial < 60; ++trial) {
        int64_t ng = gal(rng), nq = 3, d = 3;
        int nid = idc(rng);
        Tensor qe({nq, d}), ge({ng, d});
        for (int64_t i = 0; i < qe.numel(); ++i) qe[i] = u(rng);
        for (int64_t i = 0; i < ge.numel(); ++i) ge[i] = u(rng);
        std::vector<int> ql, gl;
        for (int64_t g = 0; g < ng; ++g)
            gl.push_back(static_cast<int>(g) % nid);  // every identity present
        std::uniform_int_distribution<int> ql_pick(0, nid - 1);
        for (int64_t q = 0; q < nq; ++q) ql.push_back(ql_pick(rng));
        RetrievalResult a = rank_and_score(qe, ql, ge, gl);
        RetrievalResult b = oracle(qe, ql, ge, gl);
        CHECK(a.rank1 == b.rank1);
        CHECK(a.rank5 == b.rank5);
        CHECK(a.rank10 == b.rank10);
        CHECK(a.map == b.map);
        CHECK(a.average_precision == b.average_precision);
    }
}

TEST_CASE("random balanced galleries score mAP near one half") {
    std::mt19937_64 rng(307);
    std::normal_distribution<double> gauss(0.0, 1.0);
    double total = 0.0;
    int trials = 1000;
    for (int t = 0; t < trials; ++t) {
        int64_t ng = 100, d = 4;
        Tensor qe({1, d}), ge({ng, d});
        for (int64_t i = 0; i < qe.numel(); ++i) qe[i] = gauss(rng);
        for (int64_t i = 0; i < ge.numel(); ++i) ge[i] = gauss(rng);
        std::vector<int> gl;
        for (int64_t g = 0; g < ng; ++g) gl.push_back(g < ng / 2 ? 0 : 1);
        total += rank_and_score(qe, {0}, ge, gl).map;
    }
    CHECK_THAT(total / trials, Catch::Matchers::WithinAbs(0.5, 0.05));
}

TEST_CASE("metrics are bounded and CMC is non-decreasing in k") {
    std::mt19937_64 rng(311);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor qe({6, 3}), ge({12, 3});
    for (int64_t i = 0; i < qe.numel(); ++i) qe[i] = u(rng);
    for (int64_t i = 0; i < ge.numel(); ++i) ge[i] = u(rng);
    std::vector<int> ql = {0, 1, 2, 0, 1, 2}, gl = {0, 0, 1, 1, 2, 2, 0, 1, 2, 0, 1, 2};
    RetrievalResult r = rank_and_score(qe, ql, ge, gl);
    CHECK(r.rank1 >= 0.0);
    CHECK(r.rank1 <= r.rank5);
    CHECK(r.rank5 <= r.rank10);
    CHECK(r.rank10 <= 1.0);
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
}

TEST_CASE("metrics survive gallery permutation and rigid translation") {
    std::mt19937_64 rng(313);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_int_distribution<int> grid(-6, 6);
    Tensor qe({4, 3}), ge({10, 3});
    for (int64_t i = 0; i < qe.numel(); ++i) qe[i] = grid(rng) + 0.5;  // exact grid, no ties
    for (int64_t i = 0; i < ge.numel(); ++i) ge[i] = grid(rng) + 0.25;
    std::vector<int> ql = {0, 1, 2, 3}, gl = {0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
    RetrievalResult base = rank_and_score(qe, ql, ge, gl);

    // permuted gallery
    std::vector<int64_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pg({10, 3});
    std::vector<int> pgl(10);
    for (int64_t i = 0; i < 10; ++i) {
        for (int64_t t = 0; t < 3; ++t) pg[i * 3 + t] = ge[perm[i] * 3 + t];
        pgl[static_cast<size_t>(i)] = gl[static_cast<size_t>(perm[i])];
    }
    RetrievalResult permuted = rank_and_score(qe, ql, pg, pgl);
    CHECK(permuted.rank1 == base.rank1);
    CHECK_THAT(permuted.map, Catch::Matchers::WithinAbs(base.map, 1e-12));

    // integer translation: distances are bit-identical
    Tensor tq = qe, tg = ge;
    for (int64_t i = 0; i < tq.numel(); ++i) tq[i] += (i % 3 == 0 ? 4.0 : -3.0);
    for (int64_t i = 0; i < tg.numel(); ++i) tg[i] += (i % 3 == 0 ? 4.0 : -3.0);
    RetrievalResult shifted = rank_and_score(tq, ql, tg, gl);
    CHECK(shifted.rank1 == base.rank1);
    CHECK(shifted.map == base.map);
}

TEST_CASE("a query identity missing from the gallery is reported") {
    Tensor qe = emb1d({0.0});
    Tensor ge = emb1d({1.0, 2.0});
    CHECK_THROWS_MATCHES(rank_and_score(qe, {7}, ge, {0, 1}), EvalError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("7")));
}

TEST_CASE("extract_embeddings is chunk-independent and deterministic") {
    ModelConfig cfg;
    cfg.channels = {4, 8};
    cfg.strides = {1, 2};
    cfg.d_emb = 8;
    cfg.num_classes = 6;
    cfg.image_size = 8;
    Backbone model(cfg);
    std::mt19937_64 rng(317);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor images({10, 3, 8, 8});
    for (int64_t i = 0; i < images.numel(); ++i) images[i] = u(rng);
    // duplicate row 0 into row 9
    int64_t per = images.numel() / 10;
    for (int64_t t = 0; t < per; ++t) images[9 * per + t] = images[t];

    Tensor big = extract_embeddings(model, images, 64);
    Tensor tiny = extract_embeddings(model, images, 1);
    REQUIRE(big.shape() == Shape{10, 8});
    for (int64_t i = 0; i < big.numel(); ++i) CHECK(big[i] == tiny[i]);
    for (int64_t j = 0; j < 8; ++j) CHECK(big.at2(0, j) == big.at2(9, j));
}

TEST_CASE("evaluate_targets pools target domains into one retrieval task") {
    GenConfig gen;
    gen.num_source_domains = 2;
    gen.num_target_domains = 2;
    gen.identities_per_domain = 5;
    gen.images_per_identity = 3;
    gen.image_size = 8;
    gen.seed = 21;
    DomainDataset ds = generate_dataset(gen);
    ModelConfig cfg;
    cfg.channels = {4, 8};
    cfg.strides = {1, 2};
    cfg.d_emb = 8;
    cfg.num_classes = ds.total_identities;
    cfg.image_size = 8;
    Backbone model(cfg);
    RetrievalResult r = evaluate_targets(model, ds);
    CHECK(r.n_query == 2 * 5);       // one query per target identity
    CHECK(r.n_gallery == 2 * 5 * 2); // remaining images
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);

    DomainDataset no_targets = ds;
    no_targets.target.clear();
    CHECK_THROWS_AS(evaluate_targets(model, no_targets), EvalError);
}
