// Command-line driver: dataset generation, training, retrieval evaluation,
// gradient checking, and rho diagnostics.

#include <cerrno>
#include <cstdio>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sys/stat.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "metabin/metabin.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// One writer per output directory; the lock file is removed on exit.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw metabin::ConfigError("output directory " + dir.string() +
                                       " is locked by another run (remove " + path_.string() +
                                       " if stale)");
        ::close(fd);
    }
    ~DirLock() { ::unlink(path_.c_str()); }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

metabin::RunConfig load_config(const std::string& config_path, uint64_t seed_override,
                               bool has_seed) {
    metabin::RunConfig rc = config_path.empty() ? metabin::RunConfig()
                                                : metabin::RunConfig::from_file(config_path);
    if (has_seed) rc.train.seed = seed_override;
    return rc;
}

metabin::ModelConfig model_config(const metabin::RunConfig& rc, const metabin::DomainDataset& ds) {
    metabin::ModelConfig mc = rc.model;
    mc.in_channels = ds.channels;
    mc.image_size = ds.height;
    mc.num_classes = ds.source_identities();
    mc.init_seed = rc.train.seed + 1;
    return mc;
}

int cmd_generate(const metabin::RunConfig& rc, const std::string& out_dir) {
    DirLock lock(out_dir);
    metabin::DomainDataset ds = metabin::generate_dataset(rc.gen);
    std::string base = rc.dataset_path.empty() ? out_dir + "/dataset" : rc.dataset_path;
    metabin::save_dataset(ds, base);
    rc.echo(out_dir + "/config.resolved");
    std::cout << "wrote " << base << ".bin / .json (" << ds.source.size() << " source + "
              << ds.target.size() << " target domains, " << ds.total_identities << " identities)\n";
    return 0;
}

int cmd_train(metabin::RunConfig rc, const std::string& out_dir, const std::string& dataset_path) {
    DirLock lock(out_dir);
    if (!dataset_path.empty()) rc.dataset_path = dataset_path;
    metabin::DomainDataset ds = rc.dataset_path.empty() ? metabin::generate_dataset(rc.gen)
                                                        : metabin::load_dataset(rc.dataset_path);
    rc.echo(out_dir + "/config.resolved");
    metabin::Backbone model(model_config(rc, ds));
    metabin::TrainConfig tc = rc.train;
    tc.out_dir = out_dir;
    if (tc.checkpoint_every == 0) tc.checkpoint_every = 1;
    metabin::Trainer trainer(model, ds, tc);
    std::vector<metabin::IterationLog> log = trainer.train();
    metabin::write_log_csv(log, out_dir + "/train_log.csv");
    metabin::save_checkpoint(model, out_dir + "/final.ckpt");
    std::cout << "trained " << log.size() << " iterations; final checkpoint " << out_dir
              << "/final.ckpt\n";
    return 0;
}

int cmd_eval(const metabin::RunConfig& rc, const std::string& checkpoint,
             const std::string& dataset_path, const std::string& out_dir) {
    DirLock lock(out_dir);
    std::string base = dataset_path.empty() ? rc.dataset_path : dataset_path;
    if (base.empty()) throw metabin::ConfigError("eval: a dataset path is required");
    metabin::DomainDataset ds = metabin::load_dataset(base);
    metabin::Backbone model = metabin::load_checkpoint_model(checkpoint);
    metabin::RetrievalResult res = metabin::evaluate_targets(model, ds);
    json j = {{"rank1", res.rank1},     {"rank5", res.rank5},         {"rank10", res.rank10},
              {"map", res.map},         {"n_query", res.n_query},     {"n_gallery", res.n_gallery},
              {"seed", rc.train.seed}};
    std::ofstream f(out_dir + "/metrics.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_gradcheck() {
    const double tol = 1e-4;
    auto results = metabin::run_gradient_suite(/*instances=*/20, tol, /*seed=*/12345);
    bool all_ok = true;
    std::printf("%-32s %-10s %-12s\n", "check", "status", "max_rel_err");
    for (const auto& r : results) {
        all_ok = all_ok && r.passed;
        std::printf("%-32s %-10s %.3e\n", r.name.c_str(), r.passed ? "pass" : "FAIL",
                    r.max_rel_error);
    }
    std::printf("%s (%zu checks, tolerance %.1e)\n", all_ok ? "all passed" : "FAILURES",
                results.size(), tol);
    return all_ok ? 0 : 2;
}

int cmd_dump_rho(const std::string& checkpoint, const std::string& out_dir) {
    DirLock lock(out_dir);
    metabin::Backbone model = metabin::load_checkpoint_model(checkpoint);
    std::ofstream f(out_dir + "/rho.csv");
    f << "layer_index,channel_index,rho\n";
    int layer = 0;
    for (auto& blk : model.blocks()) {
        const metabin::Tensor& rho = blk.bin.rho.value();
        for (int64_t c = 0; c < rho.numel(); ++c) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%lld,%.17g\n", layer, static_cast<long long>(c),
                          rho[c]);
            f << buf;
        }
        ++layer;
    }
    std::cout << "wrote " << out_dir << "/rho.csv\n";
    return 0;
}

int cmd_probe_rho_grad(const metabin::RunConfig& rc, const std::string& checkpoint,
                       const std::string& dataset_path, const std::string& out_dir, int batches) {
    DirLock lock(out_dir);
    metabin::DomainDataset ds = metabin::load_dataset(dataset_path);
    metabin::Backbone model = metabin::load_checkpoint_model(checkpoint);
    metabin::TrainConfig tc = rc.train;
    metabin::Trainer trainer(model, ds, tc);
    std::mt19937_64 rng(rc.train.seed);
    int K = static_cast<int>(ds.source.size());
    double scat = 0.0, shuf = 0.0, triplet = 0.0;
    for (int b = 0; b < batches; ++b) {
        metabin::MetaSplit split = metabin::domain_split(K, tc.n_mtr, tc.n_mte, rng);
        metabin::BatchData xs =
            metabin::sample_batch(ds, split.mtr_domains, tc.samples_per_domain, tc.k_inst, rng);
        metabin::RhoGradientProbe p = trainer.rho_gradient_probe(xs);
        scat += p.scat;
        shuf += p.shuf;
        triplet += p.triplet;
    }
    json j = {{"batches", batches},
              {"mean_scat_rho_grad", scat / batches},
              {"mean_shuf_rho_grad", shuf / batches},
              {"mean_triplet_rho_grad", triplet / batches}};
    std::ofstream f(out_dir + "/rho_grad.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MetaBIN: meta-learned batch-instance normalization on synthetic domains"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", checkpoint, dataset_path;
    uint64_t seed = 0;
    bool has_seed = false;

    auto add_common = [&](CLI::App* sub, bool need_checkpoint = false) {
        sub->add_option("--config", config_path, "run config file (key = value lines)");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
            has_seed = true;
        });
        if (need_checkpoint)
            sub->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
        sub->add_option("--dataset", dataset_path, "dataset basename (without .bin/.json)");
    };

    CLI::App* gen = app.add_subcommand("generate", "generate a synthetic multi-domain dataset");
    add_common(gen);
    CLI::App* train = app.add_subcommand("train", "run the alternating training loop");
    add_common(train);
    CLI::App* eval = app.add_subcommand("eval", "retrieval metrics on held-out target domains");
    add_common(eval, true);
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of ops and losses");
    (void)gradcheck;
    CLI::App* dump = app.add_subcommand("dump-rho", "export per-channel rho values as CSV");
    add_common(dump, true);
    CLI::App* probe = app.add_subcommand("probe-rho-grad", "per-loss mean rho-gradient on meta-train batches");
    add_common(probe, true);
    int probe_batches = 50;
    probe->add_option("--batches", probe_batches, "number of meta-train batches");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        metabin::RunConfig rc = load_config(config_path, seed, has_seed);
        if (gen->parsed()) return cmd_generate(rc, out_dir);
        if (train->parsed()) return cmd_train(rc, out_dir, dataset_path);
        if (eval->parsed()) return cmd_eval(rc, checkpoint, dataset_path, out_dir);
        if (gradcheck->parsed()) return cmd_gradcheck();
        if (dump->parsed()) return cmd_dump_rho(checkpoint, out_dir);
        if (probe->parsed()) return cmd_probe_rho_grad(rc, checkpoint, dataset_path, out_dir, probe_batches);
    } catch (const metabin::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
