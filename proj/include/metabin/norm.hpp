#pragma once

// Batch, instance, and batch-instance normalization with a learnable
// per-channel balancing parameter rho in [0,1].

#include <algorithm>

#include "metabin/tensor.hpp"

namespace metabin {

enum class Mode { Train, Eval };

struct BinLayerParams {
    int64_t channels = 0;
    double eps = 1e-5;
    double momentum = 0.1;

    Var gamma_b, beta_b, gamma_i, beta_i;  // (C) affine, both branches
    Var rho;                               // (C) in [0,1]
    Tensor running_mean, running_var;      // (C), BN branch only

    BinLayerParams() = default;
    explicit BinLayerParams(int64_t C, double eps_ = 1e-5, double momentum_ = 0.1)
        : channels(C),
          eps(eps_),
          momentum(momentum_),
          gamma_b(Var::param(Tensor::full({C}, 1.0))),
          beta_b(Var::param(Tensor({C}))),
          gamma_i(Var::param(Tensor::full({C}, 1.0))),
          beta_i(Var::param(Tensor({C}))),
          rho(Var::param(Tensor::full({C}, 1.0))),
          running_mean(Tensor({C})),
          running_var(Tensor::full({C}, 1.0)) {}
};

// Clamp every rho component into [0,1]; applied after each optimizer step.
inline void project_rho(BinLayerParams& p) {
    Tensor& r = p.rho.mutable_value();
    for (int64_t c = 0; c < r.numel(); ++c) r[c] = std::clamp(r[c], 0.0, 1.0);
}

namespace detail {

inline void check_norm_input(const char* op, const Var& x, const BinLayerParams& p) {
    if (x.value().rank() != 4)
        throw DimensionError(std::string(op) + ": expects rank-4 input, got " +
                             shape_str(x.shape()));
    if (x.shape()[1] != p.channels)
        throw DimensionError(std::string(op) + ": input has " + std::to_string(x.shape()[1]) +
                             " channels, layer has " + std::to_string(p.channels));
}

inline Var per_channel(const Var& v, const Shape& like) {
    return broadcast_to(reshape(v, {1, v.numel(), 1, 1}), like);
}

}  // namespace detail

// Channel-wise normalization over (N,H,W) with running statistics.
// Train mode uses biased batch variance and updates running stats in place.
inline Var batch_norm(const Var& x, BinLayerParams& p, Mode mode) {
    detail::check_norm_input("batch_norm", x, p);
    int64_t N = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    if (N == 0) throw DegenerateStatsError("batch_norm: empty batch (N=0)");
    const Shape& xs = x.shape();
    Var xhat;
    if (mode == Mode::Train) {
        if (N * H * W <= 1)
            throw DegenerateStatsError("batch_norm: N*H*W must exceed 1 in train mode");
        Var mu = mean_axes(x, {0, 2, 3});                        // (1,C,1,1)
        Var centered = x - broadcast_to(mu, xs);
        Var var = mean_axes(square(centered), {0, 2, 3});        // biased
        xhat = centered / broadcast_to(sqrt(var + p.eps), xs);
        // running stats track the batch statistics, outside the graph
        int64_t C = p.channels;
        for (int64_t c = 0; c < C; ++c) {
            p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * mu.value()[c];
            p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * var.value()[c];
        }
    } else {
        Var rm = Var::constant(Tensor({1, p.channels, 1, 1}, p.running_mean.values()));
        Tensor denom({1, p.channels, 1, 1});
        for (int64_t c = 0; c < p.channels; ++c) denom[c] = std::sqrt(p.running_var[c] + p.eps);
        xhat = (x - broadcast_to(rm, xs)) / broadcast_to(Var::constant(denom), xs);
    }
    return mul(xhat, detail::per_channel(p.gamma_b, xs)) + detail::per_channel(p.beta_b, xs);
}

// Per-(n,c) normalization over (H,W); identical in train and eval mode.
inline Var instance_norm(const Var& x, const BinLayerParams& p) {
    detail::check_norm_input("instance_norm", x, p);
    int64_t H = x.shape()[2], W = x.shape()[3];
    if (H * W <= 1) throw DegenerateStatsError("instance_norm: H*W must exceed 1");
    const Shape& xs = x.shape();
    Var mu = mean_axes(x, {2, 3});  // (N,C,1,1)
    Var centered = x - broadcast_to(mu, xs);
    Var var = mean_axes(square(centered), {2, 3});
    Var xhat = centered / broadcast_to(sqrt(var + p.eps), xs);
    return mul(xhat, detail::per_channel(p.gamma_i, xs)) + detail::per_channel(p.beta_i, xs);
}

// y = rho * BN(x) + (1 - rho) * IN(x), rho broadcast per channel.
inline Var bin_forward(const Var& x, BinLayerParams& p, Mode mode) {
    detail::check_norm_input("bin_forward", x, p);
    const Shape& xs = x.shape();
    Var bn = batch_norm(x, p, mode);
    Var in = instance_norm(x, p);
    Var rho_b = detail::per_channel(p.rho, xs);
    Var one_minus = detail::per_channel(add_scalar(neg(p.rho), 1.0), xs);
    return mul(rho_b, bn) + mul(one_minus, in);
}

// Plain BN over the feature axis of (N,d) vectors; used by the embedding neck.
struct BatchNorm1dParams {
    int64_t dim = 0;
    double eps = 1e-5;
    double momentum = 0.1;
    Var gamma, beta;
    Tensor running_mean, running_var;

    BatchNorm1dParams() = default;
    explicit BatchNorm1dParams(int64_t d, double eps_ = 1e-5, double momentum_ = 0.1)
        : dim(d),
          eps(eps_),
          momentum(momentum_),
          gamma(Var::param(Tensor::full({d}, 1.0))),
          beta(Var::param(Tensor({d}))),
          running_mean(Tensor({d})),
          running_var(Tensor::full({d}, 1.0)) {}
};

inline Var batch_norm_1d(const Var& x, BatchNorm1dParams& p, Mode mode) {
    if (x.value().rank() != 2 || x.shape()[1] != p.dim)
        throw DimensionError("batch_norm_1d: expects (N," + std::to_string(p.dim) + "), got " +
                             shape_str(x.shape()));
    int64_t N = x.shape()[0];
    if (N == 0) throw DegenerateStatsError("batch_norm_1d: empty batch");
    const Shape& xs = x.shape();
    Var xhat;
    if (mode == Mode::Train) {
        if (N <= 1) throw DegenerateStatsError("batch_norm_1d: N must exceed 1 in train mode");
        Var mu = mean_axes(x, {0});
        Var centered = x - broadcast_to(mu, xs);
        Var var = mean_axes(square(centered), {0});
        xhat = centered / broadcast_to(sqrt(var + p.eps), xs);
        for (int64_t j = 0; j < p.dim; ++j) {
            p.running_mean[j] = (1.0 - p.momentum) * p.running_mean[j] + p.momentum * mu.value()[j];
            p.running_var[j] = (1.0 - p.momentum) * p.running_var[j] + p.momentum * var.value()[j];
        }
    } else {
        Var rm = Var::constant(Tensor({1, p.dim}, p.running_mean.values()));
        Tensor denom({1, p.dim});
        for (int64_t j = 0; j < p.dim; ++j) denom[j] = std::sqrt(p.running_var[j] + p.eps);
        xhat = (x - broadcast_to(rm, xs)) / broadcast_to(Var::constant(denom), xs);
    }
    return mul(xhat, broadcast_to(reshape(p.gamma, {1, p.dim}), xs)) +
           broadcast_to(reshape(p.beta, {1, p.dim}), xs);
}

}  // namespace metabin
