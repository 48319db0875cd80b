#pragma once

// Alternating training loop: base-model SGD updates on (theta_f, phi) and a
// meta-learning episode (domain split, inner update of rho with a cyclic step
// size, first-order meta-test update of rho).

#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "metabin/data.hpp"
#include "metabin/losses.hpp"
#include "metabin/model.hpp"

namespace metabin {

struct TrainConfig {
    double alpha = 0.01;            // base LR
    int warmup_epochs = 10;         // linear warmup of alpha
    std::vector<int> decay_epochs = {40, 70};
    double decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;     // base optimizer only
    double beta_min = 0.001;        // inner step-size range (triangular)
    double beta_max = 0.1;
    int cycle_length = 0;           // iterations per half-cycle; 0 = one epoch
    bool cyclic_beta_enabled = true;
    double gamma = 0.1;             // meta-test step size
    double margin = 0.3;
    double epsilon = 0.1;           // label smoothing
    int epochs = 30;
    int samples_per_domain = 16;
    int k_inst = 4;
    int n_mtr = 3;
    int n_mte = 2;
    bool enable_meta = true;
    bool enable_scat = true;
    bool enable_shuf = true;
    bool freeze_rho = false;        // BN baseline: rho stays at its init
    uint64_t seed = 0;
    int checkpoint_every = 0;       // epochs; 0 disables
    std::string out_dir;            // for checkpoints and abort dumps

    void validate(int K) const {
        if (enable_meta && (n_mtr < 1 || n_mte < 1 || n_mtr + n_mte != K))
            throw ConfigError("TrainConfig: n_mtr + n_mte must equal K with both >= 1");
        if (beta_min <= 0.0 || beta_max <= 0.0 || beta_min >= beta_max)
            throw ConfigError("TrainConfig: beta range must satisfy 0 < min < max");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be positive");
        if (samples_per_domain < 1 || k_inst < 2 || samples_per_domain % k_inst != 0)
            throw ConfigError("TrainConfig: samples_per_domain must be a positive multiple of k_inst");
    }
};

// Triangular wave over [beta_min, beta_max], period 2*cycle_length, starting
// at the minimum.
inline double cyclic_beta(int64_t iteration, double beta_min, double beta_max,
                          int64_t cycle_length) {
    if (cycle_length < 1) throw ConfigError("cyclic_beta: cycle_length must be >= 1");
    int64_t pos = iteration % (2 * cycle_length);
    double frac = pos <= cycle_length ? static_cast<double>(pos) / static_cast<double>(cycle_length)
                                      : static_cast<double>(2 * cycle_length - pos) /
                                            static_cast<double>(cycle_length);
    return beta_min + (beta_max - beta_min) * frac;
}

struct MetaSplit {
    std::vector<int> mtr_domains;
    std::vector<int> mte_domains;
};

// Uniformly random partition of {0..K-1} into |mtr|=n_mtr and |mte|=n_mte.
inline MetaSplit domain_split(int K, int n_mtr, int n_mte, std::mt19937_64& rng) {
    if (n_mtr < 1 || n_mte < 1 || n_mtr + n_mte != K)
        throw ConfigError("domain_split: need n_mtr >= 1, n_mte >= 1, n_mtr + n_mte = K");
    std::vector<int> idx(static_cast<size_t>(K));
    for (int i = 0; i < K; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < K - 1; ++i) {
        std::uniform_int_distribution<int> pick(i, K - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
    }
    MetaSplit split;
    split.mtr_domains.assign(idx.begin(), idx.begin() + n_mtr);
    split.mte_domains.assign(idx.begin() + n_mtr, idx.end());
    std::sort(split.mtr_domains.begin(), split.mtr_domains.end());
    std::sort(split.mte_domains.begin(), split.mte_domains.end());
    return split;
}

// SGD with momentum and weight decay (decay folded into the gradient).
struct SgdState {
    std::vector<Tensor> velocity;

    explicit SgdState(const std::vector<Var>& params) {
        velocity.reserve(params.size());
        for (const Var& p : params) velocity.emplace_back(p.shape());
    }

    void step(std::vector<Var>& params, double lr, double momentum, double weight_decay) {
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& v = velocity[i];
            Tensor& p = params[i].mutable_value();
            const Tensor& g = params[i].grad();
            bool has_grad = g.numel() != 0;
            for (int64_t t = 0; t < p.numel(); ++t) {
                double grad = (has_grad ? g[t] : 0.0) + weight_decay * p[t];
                v[t] = momentum * v[t] + grad;
                p[t] -= lr * v[t];
            }
        }
    }
};

struct IterationLog {
    int64_t iteration = 0;
    int epoch = 0;
    double l_ce = 0.0, l_tr_base = 0.0;
    double l_scat = 0.0, l_shuf = 0.0, l_tr_mtr = 0.0, l_tr_mte = 0.0;
    double beta = 0.0, gamma = 0.0;
    double mean_rho = 0.0, min_rho = 0.0, max_rho = 0.0;
};

inline void write_log_csv(const std::vector<IterationLog>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("write_log_csv: cannot open " + path);
    f << "iteration,epoch,L_ce,L_tr_base,L_scat,L_shuf,L_tr_mtr,L_tr_mte,beta,gamma,"
         "mean_rho,min_rho,max_rho\n";
    char buf[512];
    for (const IterationLog& r : rows) {
        std::snprintf(buf, sizeof(buf),
                      "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.iteration), r.epoch, r.l_ce, r.l_tr_base, r.l_scat,
                      r.l_shuf, r.l_tr_mtr, r.l_tr_mte, r.beta, r.gamma, r.mean_rho, r.min_rho,
                      r.max_rho);
        f << buf;
    }
}

enum class Stage { BaseUpdate, InnerUpdate, MetaTestUpdate };

struct RhoGradientProbe {
    double scat = 0.0;  // mean over rho components of dL_scat/drho
    double shuf = 0.0;
    double triplet = 0.0;
};

class Trainer {
public:
    Trainer(Backbone& model, const DomainDataset& dataset, TrainConfig cfg)
        : model_(model), dataset_(dataset), cfg_(std::move(cfg)), rng_(cfg_.seed) {
        cfg_.validate(static_cast<int>(dataset.source.size()));
        partition_ = model_.partition();
        base_params_ = partition_.theta_f;
        base_params_.insert(base_params_.end(), partition_.phi.begin(), partition_.phi.end());
        sgd_ = std::make_unique<SgdState>(base_params_);
        if (cfg_.freeze_rho)
            for (Var& r : partition_.theta_rho)
                std::fill(r.mutable_value().values().begin(), r.mutable_value().values().end(), 1.0);
    }

    const TrainConfig& config() const { return cfg_; }
    std::mt19937_64& rng() { return rng_; }
    int iterations_per_epoch() const {
        int batch = static_cast<int>(dataset_.source.size()) * cfg_.samples_per_domain;
        return std::max(1, dataset_.total_source_images() / batch);
    }
    int64_t rho_element_count() const {
        int64_t n = 0;
        for (const Var& r : partition_.theta_rho) n += r.numel();
        return n;
    }
    // parameter elements duplicated by the most recent meta episode
    int64_t last_episode_copied_elements() const { return last_episode_copied_; }

    // One SGD-with-momentum step on (theta_f, phi); theta_rho untouched.
    void base_update(const BatchData& batch, double lr, IterationLog* log = nullptr) {
        Var x = Var::constant(batch.images);
        Var emb = model_.embed(x, Mode::Train);
        Var logits = model_.classify(emb, Mode::Train);
        Var ce = cross_entropy_smoothed(logits, batch.identity_labels, cfg_.epsilon);
        Var tr = batch_hard_triplet(emb, batch.identity_labels, cfg_.margin);
        Var loss = ce + tr;
        check_loss(loss);
        if (log) {
            log->l_ce = ce.scalar_value();
            log->l_tr_base = tr.scalar_value();
        }
        backward(loss);
        sgd_->step(base_params_, lr, cfg_.momentum, cfg_.weight_decay);
        zero_all_grads();
    }

    // theta_rho' = clamp(theta_rho - beta * grad L_mtr); the live rho is
    // left untouched, only the returned copy is new storage.
    std::vector<Tensor> inner_update(const BatchData& batch, double beta,
                                     IterationLog* log = nullptr) {
        if (batch.images.shape()[0] == 0) throw ContractError("inner_update: empty meta-train batch");
        Var emb = model_.embed(Var::constant(batch.images), Mode::Train);
        std::vector<Var> parts;
        Var scat, shuf;
        if (cfg_.enable_scat) {
            scat = intra_domain_scatter(emb, batch.domain_labels);
            parts.push_back(scat);
        }
        if (cfg_.enable_shuf) {
            shuf = inter_domain_shuffle(emb, batch.identity_labels, batch.domain_labels);
            parts.push_back(shuf);
        }
        Var tr = batch_hard_triplet(emb, batch.identity_labels, cfg_.margin);
        parts.push_back(tr);
        Var loss = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) loss = loss + parts[i];
        check_loss(loss);
        if (log) {
            log->l_scat = scat.defined() ? scat.scalar_value() : 0.0;
            log->l_shuf = shuf.defined() ? shuf.scalar_value() : 0.0;
            log->l_tr_mtr = tr.scalar_value();
        }
        backward(loss);
        std::vector<Tensor> rho_prime;
        rho_prime.reserve(partition_.theta_rho.size());
        last_episode_copied_ = 0;
        for (Var& r : partition_.theta_rho) {
            Tensor t = r.value();
            if (r.grad().numel() != 0)
                for (int64_t i = 0; i < t.numel(); ++i) t[i] -= beta * r.grad()[i];
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
            last_episode_copied_ += t.numel();
            rho_prime.push_back(std::move(t));
        }
        zero_all_grads();
        return rho_prime;
    }

    // First-order meta update: gradient of L_tr at theta_rho', applied to
    // theta_rho, then projected back into [0,1].
    void meta_test_update(const BatchData& batch, const std::vector<Tensor>& rho_prime,
                          double gamma, IterationLog* log = nullptr) {
        if (batch.images.shape()[0] == 0) throw ContractError("meta_test_update: empty meta-test batch");
        if (rho_prime.size() != partition_.theta_rho.size())
            throw ContractError("meta_test_update: rho copy count mismatch");
        // evaluate at theta_rho' by temporarily swapping values in
        std::vector<Tensor> saved;
        saved.reserve(rho_prime.size());
        for (size_t i = 0; i < rho_prime.size(); ++i) {
            saved.push_back(partition_.theta_rho[i].value());
            partition_.theta_rho[i].mutable_value() = rho_prime[i];
        }
        Var emb = model_.embed(Var::constant(batch.images), Mode::Train);
        Var tr = batch_hard_triplet(emb, batch.identity_labels, cfg_.margin);
        check_loss(tr);
        if (log) log->l_tr_mte = tr.scalar_value();
        backward(tr);
        for (size_t i = 0; i < rho_prime.size(); ++i) {
            Var& r = partition_.theta_rho[i];
            Tensor updated = saved[i];
            if (r.grad().numel() != 0)
                for (int64_t t = 0; t < updated.numel(); ++t) updated[t] -= gamma * r.grad()[t];
            for (int64_t t = 0; t < updated.numel(); ++t) updated[t] = std::clamp(updated[t], 0.0, 1.0);
            r.mutable_value() = std::move(updated);
        }
        zero_all_grads();
    }

    // Mean rho-gradient of each meta-train loss term, evaluated separately.
    RhoGradientProbe rho_gradient_probe(const BatchData& batch) {
        RhoGradientProbe probe;
        probe.scat = mean_rho_grad([&](const Var& emb) {
            return intra_domain_scatter(emb, batch.domain_labels);
        }, batch);
        probe.shuf = mean_rho_grad([&](const Var& emb) {
            return inter_domain_shuffle(emb, batch.identity_labels, batch.domain_labels);
        }, batch);
        probe.triplet = mean_rho_grad([&](const Var& emb) {
            return batch_hard_triplet(emb, batch.identity_labels, cfg_.margin);
        }, batch);
        return probe;
    }

    double learning_rate(int epoch) const {
        double lr = cfg_.alpha;
        if (cfg_.warmup_epochs > 0 && epoch < cfg_.warmup_epochs)
            lr *= static_cast<double>(epoch + 1) / static_cast<double>(cfg_.warmup_epochs);
        for (int de : cfg_.decay_epochs)
            if (epoch >= de) lr *= cfg_.decay_factor;
        return lr;
    }

    using StageHook = std::function<void(Stage, int64_t iteration)>;

    // Full alternating loop; returns the per-iteration log.
    std::vector<IterationLog> train(const StageHook& after_stage = nullptr) {
        int K = static_cast<int>(dataset_.source.size());
        std::vector<int> all_domains(static_cast<size_t>(K));
        for (int i = 0; i < K; ++i) all_domains[static_cast<size_t>(i)] = i;
        int iters = iterations_per_epoch();
        int64_t cycle = cfg_.cycle_length > 0 ? cfg_.cycle_length : iters;
        std::vector<IterationLog> logrows;
        int64_t iteration = 0;
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            double lr = learning_rate(epoch);
            for (int it = 0; it < iters; ++it, ++iteration) {
                IterationLog row;
                row.iteration = iteration;
                row.epoch = epoch;
                row.gamma = cfg_.gamma;
                try {
                    BatchData xb = sample_batch(dataset_, all_domains, cfg_.samples_per_domain,
                                                cfg_.k_inst, rng_);
                    base_update(xb, lr, &row);
                    if (after_stage) after_stage(Stage::BaseUpdate, iteration);
                    if (cfg_.enable_meta && !cfg_.freeze_rho) {
                        MetaSplit split = domain_split(K, cfg_.n_mtr, cfg_.n_mte, rng_);
                        double beta = cfg_.cyclic_beta_enabled
                                          ? cyclic_beta(iteration, cfg_.beta_min, cfg_.beta_max, cycle)
                                          : cfg_.beta_max;
                        row.beta = beta;
                        BatchData xs = sample_batch(dataset_, split.mtr_domains,
                                                    cfg_.samples_per_domain, cfg_.k_inst, rng_);
                        std::vector<Tensor> rho_prime = inner_update(xs, beta, &row);
                        if (after_stage) after_stage(Stage::InnerUpdate, iteration);
                        BatchData xt = sample_batch(dataset_, split.mte_domains,
                                                    cfg_.samples_per_domain, cfg_.k_inst, rng_);
                        meta_test_update(xt, rho_prime, cfg_.gamma, &row);
                        if (after_stage) after_stage(Stage::MetaTestUpdate, iteration);
                    }
                } catch (const NumericError&) {
                    if (!cfg_.out_dir.empty())
                        save_checkpoint(model_, cfg_.out_dir + "/last_good.ckpt");
                    throw;
                }
                rho_stats(row);
                logrows.push_back(row);
            }
            if (cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0 &&
                !cfg_.out_dir.empty())
                save_checkpoint(model_, cfg_.out_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt");
        }
        return logrows;
    }

private:
    void check_loss(const Var& loss) {
        if (!std::isfinite(loss.scalar_value()))
            throw NumericError("train: non-finite loss encountered");
    }

    void zero_all_grads() {
        for (Var& v : base_params_) v.zero_grad();
        for (Var& v : partition_.theta_rho) v.zero_grad();
    }

    void rho_stats(IterationLog& row) const {
        double sum = 0.0, mn = 1.0, mx = 0.0;
        int64_t n = 0;
        for (const Var& r : partition_.theta_rho)
            for (int64_t i = 0; i < r.numel(); ++i) {
                double v = r.value()[i];
                sum += v;
                mn = std::min(mn, v);
                mx = std::max(mx, v);
                ++n;
            }
        row.mean_rho = n ? sum / static_cast<double>(n) : 0.0;
        row.min_rho = mn;
        row.max_rho = mx;
    }

    double mean_rho_grad(const std::function<Var(const Var&)>& loss_fn, const BatchData& batch) {
        Var emb = model_.embed(Var::constant(batch.images), Mode::Train);
        Var loss = loss_fn(emb);
        backward(loss);
        double sum = 0.0;
        int64_t n = 0;
        for (Var& r : partition_.theta_rho) {
            if (r.grad().numel() != 0)
                for (int64_t i = 0; i < r.numel(); ++i) sum += r.grad()[i];
            n += r.numel();
        }
        zero_all_grads();
        return sum / static_cast<double>(n);
    }

    Backbone& model_;
    const DomainDataset& dataset_;
    TrainConfig cfg_;
    std::mt19937_64 rng_;
    ParameterPartition partition_;
    std::vector<Var> base_params_;
    std::unique_ptr<SgdState> sgd_;
    int64_t last_episode_copied_ = 0;
};

}  // namespace metabin
