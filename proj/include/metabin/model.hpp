#pragma once

// Small convolutional backbone with BIN layers, embedding head, a plain-BN
// neck, and a bias-free linear classifier. Owns the parameter partition
// (theta_f, theta_rho, phi) and the checkpoint format.

#include <cstdio>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "metabin/io.hpp"
#include "metabin/norm.hpp"
#include "metabin/tensor.hpp"

namespace metabin {

struct ModelConfig {
    int64_t in_channels = 3;
    int64_t image_size = 16;
    std::vector<int64_t> channels = {8, 16, 32};
    std::vector<int64_t> strides = {1, 2, 2};
    int64_t d_emb = 32;
    int64_t num_classes = 100;
    double eps = 1e-5;
    double momentum = 0.1;
    uint64_t init_seed = 1;
};

struct ConvBlock {
    Var weight;  // (Co,Ci,3,3)
    Var bias;    // (Co)
    BinLayerParams bin;
    int64_t stride = 1;
};

// Named parameter lists with stable ordering. theta_rho holds every rho
// vector; phi the classifier; theta_f everything else trainable.
struct ParameterPartition {
    std::vector<Var> theta_f, theta_rho, phi;

    std::vector<Var> all() const {
        std::vector<Var> v = theta_f;
        v.insert(v.end(), theta_rho.begin(), theta_rho.end());
        v.insert(v.end(), phi.begin(), phi.end());
        return v;
    }
};

class Backbone {
public:
    explicit Backbone(ModelConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.channels.size() != cfg_.strides.size())
            throw ConfigError("Backbone: channel and stride plans differ in length");
        int64_t down = 1;
        for (int64_t s : cfg_.strides) down *= s;
        if (cfg_.image_size < 2 * down)
            throw ConfigError("Backbone: image size too small for the stride plan");
        std::mt19937_64 rng(cfg_.init_seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        int64_t ci = cfg_.in_channels;
        for (size_t b = 0; b < cfg_.channels.size(); ++b) {
            int64_t co = cfg_.channels[b];
            Tensor w({co, ci, 3, 3});
            double scale = std::sqrt(2.0 / static_cast<double>(ci * 9));
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = scale * gauss(rng);
            ConvBlock blk;
            blk.weight = Var::param(std::move(w));
            blk.bias = Var::param(Tensor({co}));
            blk.bin = BinLayerParams(co, cfg_.eps, cfg_.momentum);
            blk.stride = cfg_.strides[b];
            blocks_.push_back(std::move(blk));
            ci = co;
        }
        Tensor ew({cfg_.d_emb, ci});
        double escale = std::sqrt(2.0 / static_cast<double>(ci));
        for (int64_t i = 0; i < ew.numel(); ++i) ew[i] = escale * gauss(rng);
        emb_w_ = Var::param(std::move(ew));
        emb_b_ = Var::param(Tensor({cfg_.d_emb}));
        neck_ = BatchNorm1dParams(cfg_.d_emb, cfg_.eps, cfg_.momentum);
        Tensor cw({cfg_.num_classes, cfg_.d_emb});
        for (int64_t i = 0; i < cw.numel(); ++i) cw[i] = 0.01 * gauss(rng);
        cls_w_ = Var::param(std::move(cw));
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<ConvBlock>& blocks() { return blocks_; }
    BatchNorm1dParams& neck() { return neck_; }
    const Var& classifier_weight() const { return cls_w_; }

    // Pre-neck embeddings (N, d_emb); these feed every metric loss.
    Var embed(const Var& x, Mode mode) {
        if (x.value().rank() != 4)
            throw DimensionError("embed: expects rank-4 input, got " + shape_str(x.shape()));
        if (x.shape()[1] != cfg_.in_channels)
            throw ConfigError("embed: input has " + std::to_string(x.shape()[1]) +
                              " channels, model configured for " +
                              std::to_string(cfg_.in_channels));
        Var h = x;
        for (ConvBlock& blk : blocks_) {
            h = conv2d(h, blk.weight, blk.bias, blk.stride);
            h = bin_forward(h, blk.bin, mode);
            h = relu(h);
        }
        h = global_avg_pool(h);
        return linear(h, emb_w_, emb_b_);
    }

    // Neck-normalized logits (N, M). The classifier reads post-neck features.
    Var classify(const Var& embeddings, Mode mode) {
        if (embeddings.value().rank() != 2 || embeddings.shape()[1] != cfg_.d_emb)
            throw ConfigError("classify: embedding dim mismatch, got " +
                              shape_str(embeddings.shape()));
        Var necked = batch_norm_1d(embeddings, neck_, mode);
        return linear_no_bias(necked, cls_w_);
    }

    ParameterPartition partition() {
        ParameterPartition p;
        for (ConvBlock& blk : blocks_) {
            p.theta_f.push_back(blk.weight);
            p.theta_f.push_back(blk.bias);
            p.theta_f.push_back(blk.bin.gamma_b);
            p.theta_f.push_back(blk.bin.beta_b);
            p.theta_f.push_back(blk.bin.gamma_i);
            p.theta_f.push_back(blk.bin.beta_i);
            p.theta_rho.push_back(blk.bin.rho);
        }
        p.theta_f.push_back(emb_w_);
        p.theta_f.push_back(emb_b_);
        p.theta_f.push_back(neck_.gamma);
        p.theta_f.push_back(neck_.beta);
        p.phi.push_back(cls_w_);
        return p;
    }

    // Running statistics, in a stable order, for checkpointing.
    std::vector<Tensor*> running_stats() {
        std::vector<Tensor*> v;
        for (ConvBlock& blk : blocks_) {
            v.push_back(&blk.bin.running_mean);
            v.push_back(&blk.bin.running_var);
        }
        v.push_back(&neck_.running_mean);
        v.push_back(&neck_.running_var);
        return v;
    }

    void project_all_rho() {
        for (ConvBlock& blk : blocks_) project_rho(blk.bin);
    }

private:
    ModelConfig cfg_;
    std::vector<ConvBlock> blocks_;
    Var emb_w_, emb_b_;
    BatchNorm1dParams neck_;
    Var cls_w_;
};

// ---------------------------------------------------------------------------
// checkpoint format: magic, version, shape plan, then parameters in partition
// order followed by running statistics, all little-endian doubles.

namespace detail {

constexpr uint32_t kCheckpointMagic = 0x4D42494E;  // "MBIN"
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline void save_checkpoint(Backbone& model, const std::string& path) {
    detail::FileHandle f(std::fopen(path.c_str(), "wb"));
    if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
    const ModelConfig& cfg = model.config();
    detail::write_u32(f.get(), detail::kCheckpointMagic);
    detail::write_u32(f.get(), detail::kCheckpointVersion);
    detail::write_u32(f.get(), static_cast<uint32_t>(cfg.in_channels));
    detail::write_u32(f.get(), static_cast<uint32_t>(cfg.image_size));
    detail::write_u32(f.get(), static_cast<uint32_t>(cfg.channels.size()));
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        detail::write_u32(f.get(), static_cast<uint32_t>(cfg.channels[i]));
        detail::write_u32(f.get(), static_cast<uint32_t>(cfg.strides[i]));
    }
    detail::write_u32(f.get(), static_cast<uint32_t>(cfg.d_emb));
    detail::write_u32(f.get(), static_cast<uint32_t>(cfg.num_classes));
    ParameterPartition p = model.partition();
    for (const Var& v : p.all())
        detail::write_f64(f.get(), v.value().data(), static_cast<size_t>(v.numel()));
    for (Tensor* t : model.running_stats())
        detail::write_f64(f.get(), t->data(), static_cast<size_t>(t->numel()));
}

// Reads the shape plan from a checkpoint header so a model can be rebuilt.
inline ModelConfig read_checkpoint_config(const std::string& path) {
    detail::FileHandle f(std::fopen(path.c_str(), "rb"));
    if (!f) throw FormatError("checkpoint: cannot open " + path);
    if (detail::read_u32(f.get()) != detail::kCheckpointMagic)
        throw FormatError("checkpoint: bad magic in " + path);
    uint32_t version = detail::read_u32(f.get());
    if (version != detail::kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    ModelConfig cfg;
    cfg.in_channels = detail::read_u32(f.get());
    cfg.image_size = detail::read_u32(f.get());
    uint32_t nblocks = detail::read_u32(f.get());
    cfg.channels.clear();
    cfg.strides.clear();
    for (uint32_t i = 0; i < nblocks; ++i) {
        cfg.channels.push_back(detail::read_u32(f.get()));
        cfg.strides.push_back(detail::read_u32(f.get()));
    }
    cfg.d_emb = detail::read_u32(f.get());
    cfg.num_classes = detail::read_u32(f.get());
    return cfg;
}

inline void load_checkpoint(Backbone& model, const std::string& path) {
    ModelConfig file_cfg = read_checkpoint_config(path);
    const ModelConfig& cfg = model.config();
    if (file_cfg.in_channels != cfg.in_channels || file_cfg.channels != cfg.channels ||
        file_cfg.strides != cfg.strides || file_cfg.d_emb != cfg.d_emb ||
        file_cfg.num_classes != cfg.num_classes)
        throw FormatError("checkpoint: shape plan in " + path + " does not match the model");
    detail::FileHandle f(std::fopen(path.c_str(), "rb"));
    if (!f) throw FormatError("checkpoint: cannot open " + path);
    size_t header = 4 * (7 + 2 * cfg.channels.size());
    if (std::fseek(f.get(), static_cast<long>(header), SEEK_SET) != 0)
        throw FormatError("checkpoint: truncated file");
    ParameterPartition p = model.partition();
    for (Var v : p.all()) detail::read_f64(f.get(), v.mutable_value().data(), static_cast<size_t>(v.numel()));
    for (Tensor* t : model.running_stats())
        detail::read_f64(f.get(), t->data(), static_cast<size_t>(t->numel()));
    // must be exactly at EOF
    unsigned char extra;
    if (std::fread(&extra, 1, 1, f.get()) == 1) throw FormatError("checkpoint: trailing bytes in " + path);
}

inline Backbone load_checkpoint_model(const std::string& path) {
    ModelConfig cfg = read_checkpoint_config(path);
    Backbone model(cfg);
    load_checkpoint(model, path);
    return model;
}

}  // namespace metabin
