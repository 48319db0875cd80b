#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "metabin/eval.hpp"
#include "metabin/trainer.hpp"

using namespace metabin;

namespace {

GenConfig tiny_gen() {
    GenConfig gen;
    gen.num_source_domains = 3;
    gen.num_target_domains = 1;
    gen.identities_per_domain = 6;
    gen.images_per_identity = 4;
    gen.image_size = 8;
    gen.seed = 5;
    return gen;
}

ModelConfig tiny_model(const DomainDataset& ds) {
    ModelConfig mc;
    mc.channels = {4, 8};
    mc.strides = {1, 2};
    mc.d_emb = 8;
    mc.image_size = 8;
    mc.num_classes = ds.total_identities;
    mc.init_seed = 3;
    return mc;
}

TrainConfig tiny_train() {
    TrainConfig tc;
    tc.samples_per_domain = 8;
    tc.k_inst = 4;
    tc.n_mtr = 2;
    tc.n_mte = 1;
    tc.epochs = 1;
    tc.seed = 9;
    return tc;
}

std::vector<Tensor> snapshot(const std::vector<Var>& vars) {
    std::vector<Tensor> out;
    for (const Var& v : vars) out.push_back(v.value());
    return out;
}

bool same(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        for (int64_t t = 0; t < a[i].numel(); ++t)
            if (a[i][t] != b[i][t]) return false;
    return true;
}

void restore(std::vector<Var>& vars, const std::vector<Tensor>& values) {
    for (size_t i = 0; i < vars.size(); ++i) vars[i].mutable_value() = values[i];
}

}  // namespace

TEST_CASE("cyclic beta follows the triangular schedule") {
    CHECK(cyclic_beta(0, 0.001, 0.1, 10) == 0.001);
    CHECK(cyclic_beta(10, 0.001, 0.1, 10) == 0.1);
    CHECK_THAT(cyclic_beta(5, 0.001, 0.1, 10), Catch::Matchers::WithinAbs(0.0505, 1e-15));
    for (int64_t i = 0; i < 100; ++i) {
        double b = cyclic_beta(i, 0.001, 0.1, 7);
        CHECK(b >= 0.001);
        CHECK(b <= 0.1);
        CHECK(cyclic_beta(i + 14, 0.001, 0.1, 7) == b);  // period 2*cycle
    }
    CHECK_THROWS_AS(cyclic_beta(0, 0.001, 0.1, 0), ConfigError);
}

TEST_CASE("domain_split partitions the domains") {
    std::mt19937_64 rng(1);
    MetaSplit s = domain_split(5, 3, 2, rng);
    REQUIRE(s.mtr_domains.size() == 3);
    REQUIRE(s.mte_domains.size() == 2);
    std::vector<int> all = s.mtr_domains;
    all.insert(all.end(), s.mte_domains.begin(), s.mte_domains.end());
    std::sort(all.begin(), all.end());
    CHECK(all == std::vector<int>{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(domain_split(5, 3, 3, rng), ConfigError);
    CHECK_THROWS_AS(domain_split(2, 2, 0, rng), ConfigError);
}

TEST_CASE("K=2 splits are uniform over the two partitions") {
    std::mt19937_64 rng(2);
    int first = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        MetaSplit s = domain_split(2, 1, 1, rng);
        first += s.mtr_domains[0] == 0;
    }
    CHECK_THAT(static_cast<double>(first) / trials, Catch::Matchers::WithinAbs(0.5, 0.05));
}

TEST_CASE("domain_split is deterministic under a fixed seed") {
    std::mt19937_64 r1(42), r2(42);
    for (int i = 0; i < 20; ++i) {
        MetaSplit a = domain_split(5, 3, 2, r1);
        MetaSplit b = domain_split(5, 3, 2, r2);
        CHECK(a.mtr_domains == b.mtr_domains);
        CHECK(a.mte_domains == b.mte_domains);
    }
}

TEST_CASE("SGD with momentum matches the hand recurrence") {
    Var p = Var::param(Tensor({1}, {2.0}));
    std::vector<Var> params = {p};
    SgdState sgd(params);
    double lr = 0.1, mu = 0.9, wd = 0.1;
    double hand_p = 2.0, hand_v = 0.0;
    for (int step = 0; step < 3; ++step) {
        Var loss = sum(square(p));  // grad = 2p
        backward(loss);
        double g = 2.0 * hand_p + wd * hand_p;
        hand_v = mu * hand_v + g;
        hand_p -= lr * hand_v;
        sgd.step(params, lr, mu, wd);
        p.zero_grad();
        CHECK_THAT(p.value()[0], Catch::Matchers::WithinAbs(hand_p, 1e-15));
    }
}

TEST_CASE("zero gradient and zero momentum leave only weight-decay shrinkage") {
    Var p = Var::param(Tensor({2}, {4.0, -2.0}));
    std::vector<Var> params = {p};
    SgdState sgd(params);
    sgd.step(params, 0.1, 0.0, 0.05);  // no backward ran: gradient is empty
    CHECK_THAT(p.value()[0], Catch::Matchers::WithinAbs(4.0 * (1.0 - 0.1 * 0.05), 1e-15));
    CHECK_THAT(p.value()[1], Catch::Matchers::WithinAbs(-2.0 * (1.0 - 0.1 * 0.05), 1e-15));
}

TEST_CASE("learning rate schedule: warmup then step decay") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tiny_train());
    CHECK_THAT(t.learning_rate(0), Catch::Matchers::WithinAbs(0.001, 1e-15));
    CHECK_THAT(t.learning_rate(4), Catch::Matchers::WithinAbs(0.005, 1e-15));
    CHECK_THAT(t.learning_rate(9), Catch::Matchers::WithinAbs(0.01, 1e-15));
    CHECK_THAT(t.learning_rate(15), Catch::Matchers::WithinAbs(0.01, 1e-15));
    CHECK_THAT(t.learning_rate(40), Catch::Matchers::WithinAbs(0.001, 1e-15));
    CHECK_THAT(t.learning_rate(70), Catch::Matchers::WithinAbs(0.0001, 1e-15));
}

TEST_CASE("base update leaves rho bit-identical and moves theta_f and phi") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tiny_train());
    ParameterPartition p = model.partition();
    auto rho_before = snapshot(p.theta_rho);
    auto f_before = snapshot(p.theta_f);
    auto phi_before = snapshot(p.phi);
    std::mt19937_64 rng(11);
    BatchData batch = sample_batch(ds, {0, 1, 2}, 8, 4, rng);
    t.base_update(batch, 0.01);
    CHECK(same(snapshot(p.theta_rho), rho_before));
    CHECK_FALSE(same(snapshot(p.theta_f), f_before));
    CHECK_FALSE(same(snapshot(p.phi), phi_before));
}

TEST_CASE("inner update returns a projected copy and spares the live parameters") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tiny_train());
    ParameterPartition p = model.partition();
    // start from an interior rho so the projection is inert
    for (Var& r : p.theta_rho)
        for (int64_t i = 0; i < r.numel(); ++i) r.mutable_value()[i] = 0.6;
    std::mt19937_64 rng(13);
    BatchData batch = sample_batch(ds, {0, 1}, 8, 4, rng);

    auto rho_before = snapshot(p.theta_rho);
    auto f_before = snapshot(p.theta_f);

    SECTION("zero step returns rho unchanged") {
        std::vector<Tensor> prime = t.inner_update(batch, 0.0);
        CHECK(same(prime, rho_before));
        CHECK(same(snapshot(p.theta_rho), rho_before));
    }

    SECTION("step matches a finite-difference gradient oracle") {
        double beta = 0.05, h = 1e-5;
        auto loss_at = [&](const std::vector<Tensor>& rho_values) {
            restore(p.theta_rho, rho_values);
            Var emb = model.embed(Var::constant(batch.images), Mode::Train);
            return (intra_domain_scatter(emb, batch.domain_labels) +
                    inter_domain_shuffle(emb, batch.identity_labels, batch.domain_labels) +
                    batch_hard_triplet(emb, batch.identity_labels, 0.3))
                .scalar_value();
        };
        std::vector<Tensor> expected = rho_before;
        for (size_t l = 0; l < rho_before.size(); ++l)
            for (int64_t i = 0; i < rho_before[l].numel(); ++i) {
                std::vector<Tensor> plus = rho_before, minus = rho_before;
                plus[l][i] += h;
                minus[l][i] -= h;
                double g = (loss_at(plus) - loss_at(minus)) / (2 * h);
                expected[l][i] = std::clamp(rho_before[l][i] - beta * g, 0.0, 1.0);
            }
        restore(p.theta_rho, rho_before);
        std::vector<Tensor> prime = t.inner_update(batch, beta);
        for (size_t l = 0; l < prime.size(); ++l)
            for (int64_t i = 0; i < prime[l].numel(); ++i)
                CHECK_THAT(prime[l][i], Catch::Matchers::WithinAbs(expected[l][i], 1e-8));
        // live parameters untouched, and only rho-sized storage was copied
        CHECK(same(snapshot(p.theta_rho), rho_before));
        CHECK(same(snapshot(p.theta_f), f_before));
        CHECK(t.last_episode_copied_elements() == t.rho_element_count());
    }
}

TEST_CASE("meta-test update applies the first-order gradient taken at rho-prime") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tiny_train());
    ParameterPartition p = model.partition();
    for (Var& r : p.theta_rho)
        for (int64_t i = 0; i < r.numel(); ++i) r.mutable_value()[i] = 0.6;
    std::mt19937_64 rng(17);
    BatchData mtr = sample_batch(ds, {0, 1}, 8, 4, rng);
    BatchData mte = sample_batch(ds, {2}, 8, 4, rng);

    std::vector<Tensor> prime = t.inner_update(mtr, 0.05);
    auto rho_before = snapshot(p.theta_rho);
    auto f_before = snapshot(p.theta_f);

    SECTION("gamma = 0 leaves rho unchanged") {
        t.meta_test_update(mte, prime, 0.0);
        CHECK(same(snapshot(p.theta_rho), rho_before));
    }

    SECTION("inactive triplets leave rho unchanged") {
        DomainDataset ds2 = generate_dataset(tiny_gen());
        Backbone model2(tiny_model(ds2));
        TrainConfig tc = tiny_train();
        tc.margin = -1e6;  // hinge can never activate: gradient identically zero
        Trainer t2(model2, ds2, tc);
        ParameterPartition p2 = model2.partition();
        auto before = snapshot(p2.theta_rho);
        std::vector<Tensor> pr = t2.inner_update(mtr, 0.0);
        t2.meta_test_update(mte, pr, 0.1);
        CHECK(same(snapshot(p2.theta_rho), before));
    }

    SECTION("update matches a two-stage oracle") {
        double gamma = 0.1, h = 1e-5;
        auto triplet_at = [&](const std::vector<Tensor>& rho_values) {
            restore(p.theta_rho, rho_values);
            Var emb = model.embed(Var::constant(mte.images), Mode::Train);
            return batch_hard_triplet(emb, mte.identity_labels, 0.3).scalar_value();
        };
        std::vector<Tensor> expected = rho_before;
        for (size_t l = 0; l < prime.size(); ++l)
            for (int64_t i = 0; i < prime[l].numel(); ++i) {
                std::vector<Tensor> plus = prime, minus = prime;
                plus[l][i] += h;
                minus[l][i] -= h;
                double g = (triplet_at(plus) - triplet_at(minus)) / (2 * h);
                expected[l][i] = std::clamp(rho_before[l][i] - gamma * g, 0.0, 1.0);
            }
        restore(p.theta_rho, rho_before);
        t.meta_test_update(mte, prime, gamma);
        auto rho_after = snapshot(p.theta_rho);
        for (size_t l = 0; l < rho_after.size(); ++l)
            for (int64_t i = 0; i < rho_after[l].numel(); ++i)
                CHECK_THAT(rho_after[l][i], Catch::Matchers::WithinAbs(expected[l][i], 1e-8));
        CHECK(same(snapshot(p.theta_f), f_before));
    }
}

TEST_CASE("rho gradient probe terms are additive") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tiny_train());
    ParameterPartition p = model.partition();
    for (Var& r : p.theta_rho)
        for (int64_t i = 0; i < r.numel(); ++i) r.mutable_value()[i] = 0.5;
    std::mt19937_64 rng(19);
    BatchData batch = sample_batch(ds, {0, 1, 2}, 8, 4, rng);
    RhoGradientProbe probe = t.rho_gradient_probe(batch);

    // gradient of the summed loss equals the sum of per-term gradients
    Var emb = model.embed(Var::constant(batch.images), Mode::Train);
    Var total = intra_domain_scatter(emb, batch.domain_labels) +
                inter_domain_shuffle(emb, batch.identity_labels, batch.domain_labels) +
                batch_hard_triplet(emb, batch.identity_labels, 0.3);
    backward(total);
    double sum = 0.0;
    int64_t n = 0;
    for (Var& r : p.theta_rho) {
        for (int64_t i = 0; i < r.numel(); ++i) sum += r.grad()[i];
        n += r.numel();
        r.zero_grad();
    }
    CHECK_THAT(probe.scat + probe.shuf + probe.triplet,
               Catch::Matchers::WithinAbs(sum / static_cast<double>(n), 1e-10));
}

TEST_CASE("episode separation holds across a full training run") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    TrainConfig tc = tiny_train();
    Trainer t(model, ds, tc);
    ParameterPartition p = model.partition();

    auto f_phi = [&] {
        auto v = snapshot(p.theta_f);
        auto w = snapshot(p.phi);
        v.insert(v.end(), w.begin(), w.end());
        return v;
    };
    std::vector<Tensor> cur_f = f_phi();
    std::vector<Tensor> cur_rho = snapshot(p.theta_rho);
    int checked = 0;
    t.train([&](Stage stage, int64_t) {
        switch (stage) {
            case Stage::BaseUpdate:
                CHECK(same(snapshot(p.theta_rho), cur_rho));  // base never touches rho
                cur_f = f_phi();
                break;
            case Stage::InnerUpdate:
                CHECK(same(f_phi(), cur_f));                  // episode spares theta_f/phi
                CHECK(same(snapshot(p.theta_rho), cur_rho));  // copy semantics
                break;
            case Stage::MetaTestUpdate:
                CHECK(same(f_phi(), cur_f));
                cur_rho = snapshot(p.theta_rho);
                break;
        }
        ++checked;
    });
    CHECK(checked == 3 * t.iterations_per_epoch());
}

TEST_CASE("training with meta disabled reduces to plain supervised SGD") {
    DomainDataset ds = generate_dataset(tiny_gen());
    TrainConfig tc = tiny_train();
    tc.enable_meta = false;
    tc.epochs = 2;

    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tc);
    std::vector<IterationLog> log = t.train();

    // standalone supervised loop with identical seeds
    Backbone ref(tiny_model(ds));
    ParameterPartition rp = ref.partition();
    std::vector<Var> params = rp.theta_f;
    params.insert(params.end(), rp.phi.begin(), rp.phi.end());
    SgdState sgd(params);
    std::mt19937_64 rng(tc.seed);
    size_t k = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        double lr = tc.alpha * (epoch < tc.warmup_epochs
                                    ? static_cast<double>(epoch + 1) / tc.warmup_epochs
                                    : 1.0);
        for (int it = 0; it < t.iterations_per_epoch(); ++it, ++k) {
            BatchData b = sample_batch(ds, {0, 1, 2}, tc.samples_per_domain, tc.k_inst, rng);
            Var emb = ref.embed(Var::constant(b.images), Mode::Train);
            Var logits = ref.classify(emb, Mode::Train);
            Var ce = cross_entropy_smoothed(logits, b.identity_labels, tc.epsilon);
            Var tr = batch_hard_triplet(emb, b.identity_labels, tc.margin);
            backward(ce + tr);
            sgd.step(params, lr, tc.momentum, tc.weight_decay);
            for (Var& v : params) v.zero_grad();
            REQUIRE(k < log.size());
            CHECK(log[k].l_ce == ce.scalar_value());
            CHECK(log[k].l_tr_base == tr.scalar_value());
        }
    }
    CHECK(k == log.size());
}

TEST_CASE("a fixed seed reproduces the loss log bit for bit") {
    DomainDataset ds = generate_dataset(tiny_gen());
    TrainConfig tc = tiny_train();
    tc.epochs = 2;
    Backbone m1(tiny_model(ds)), m2(tiny_model(ds));
    std::vector<IterationLog> a = Trainer(m1, ds, tc).train();
    std::vector<IterationLog> b = Trainer(m2, ds, tc).train();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].l_ce == b[i].l_ce);
        CHECK(a[i].l_tr_base == b[i].l_tr_base);
        CHECK(a[i].l_scat == b[i].l_scat);
        CHECK(a[i].l_shuf == b[i].l_shuf);
        CHECK(a[i].l_tr_mtr == b[i].l_tr_mtr);
        CHECK(a[i].l_tr_mte == b[i].l_tr_mte);
        CHECK(a[i].beta == b[i].beta);
        CHECK(a[i].mean_rho == b[i].mean_rho);
    }
}

TEST_CASE("frozen rho keeps the BN baseline at rho = 1 throughout") {
    DomainDataset ds = generate_dataset(tiny_gen());
    TrainConfig tc = tiny_train();
    tc.freeze_rho = true;
    Backbone model(tiny_model(ds));
    // pre-dirty rho; the trainer must reset and hold it at 1
    for (Var& r : model.partition().theta_rho)
        for (int64_t i = 0; i < r.numel(); ++i) r.mutable_value()[i] = 0.4;
    Trainer t(model, ds, tc);
    std::vector<IterationLog> log = t.train();
    for (const IterationLog& row : log) {
        CHECK(row.mean_rho == 1.0);
        CHECK(row.min_rho == 1.0);
    }
    for (Var& r : model.partition().theta_rho)
        for (int64_t i = 0; i < r.numel(); ++i) CHECK(r.value()[i] == 1.0);
}

TEST_CASE("training log serializes with full precision") {
    std::vector<IterationLog> rows(2);
    rows[0].iteration = 0;
    rows[0].epoch = 0;
    rows[0].l_ce = 1.0 / 3.0;
    rows[0].beta = 0.0505;
    rows[1].iteration = 1;
    rows[1].epoch = 0;
    rows[1].l_ce = 2.0 / 7.0;
    std::string path = "trainer_log.csv";
    write_log_csv(rows, path);
    std::ifstream in(path);
    std::string header, l0, l1;
    std::getline(in, header);
    std::getline(in, l0);
    std::getline(in, l1);
    CHECK(header ==
          "iteration,epoch,L_ce,L_tr_base,L_scat,L_shuf,L_tr_mtr,L_tr_mte,beta,gamma,"
          "mean_rho,min_rho,max_rho");
    // %.17g round-trips doubles exactly
    CHECK(std::stod(l0.substr(l0.find(",0,") + 3)) == 1.0 / 3.0);
    CHECK(std::stod(l1.substr(l1.find(",0,") + 3)) == 2.0 / 7.0);
    std::remove(path.c_str());
}

TEST_CASE("checkpoints are written on schedule") {
    namespace fs = std::filesystem;
    DomainDataset ds = generate_dataset(tiny_gen());
    TrainConfig tc = tiny_train();
    tc.epochs = 2;
    tc.checkpoint_every = 1;
    tc.out_dir = "trainer_ckpts";
    fs::create_directories(tc.out_dir);
    Backbone model(tiny_model(ds));
    Trainer(model, ds, tc).train();
    CHECK(fs::exists("trainer_ckpts/epoch_1.ckpt"));
    CHECK(fs::exists("trainer_ckpts/epoch_2.ckpt"));
    Backbone restored = load_checkpoint_model("trainer_ckpts/epoch_2.ckpt");
    Tensor probe({2, 3, 8, 8});
    for (int64_t i = 0; i < probe.numel(); ++i) probe[i] = 0.01 * static_cast<double>(i % 37);
    Tensor a = model.embed(Var::constant(probe), Mode::Eval).value();
    Tensor b = restored.embed(Var::constant(probe), Mode::Eval).value();
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    fs::remove_all(tc.out_dir);
}

TEST_CASE("a diverging run aborts with a checkpoint of the last good state") {
    namespace fs = std::filesystem;
    DomainDataset ds = generate_dataset(tiny_gen());
    TrainConfig tc = tiny_train();
    tc.alpha = 1e200;  // guaranteed blow-up
    tc.warmup_epochs = 0;
    tc.epochs = 3;
    tc.out_dir = "trainer_abort";
    fs::create_directories(tc.out_dir);
    Backbone model(tiny_model(ds));
    Trainer t(model, ds, tc);
    CHECK_THROWS_AS(t.train(), NumericError);
    CHECK(fs::exists("trainer_abort/last_good.ckpt"));
    CHECK_NOTHROW(load_checkpoint_model("trainer_abort/last_good.ckpt"));
    fs::remove_all(tc.out_dir);
}

TEST_CASE("invalid training configs are rejected") {
    DomainDataset ds = generate_dataset(tiny_gen());
    Backbone model(tiny_model(ds));
    TrainConfig tc = tiny_train();
    tc.n_mtr = 3;  // 3 + 1 != 3 domains
    CHECK_THROWS_AS(Trainer(model, ds, tc), ConfigError);
    tc = tiny_train();
    tc.beta_min = 0.2;  // min >= max
    CHECK_THROWS_AS(Trainer(model, ds, tc), ConfigError);
    tc = tiny_train();
    tc.epochs = 0;
    CHECK_THROWS_AS(Trainer(model, ds, tc), ConfigError);
    tc = tiny_train();
    tc.samples_per_domain = 9;
    CHECK_THROWS_AS(Trainer(model, ds, tc), ConfigError);
}
