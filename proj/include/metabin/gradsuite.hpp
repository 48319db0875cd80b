#pragma once

// Named finite-difference checks covering every differentiable op, the
// normalization layers (including d/drho), and every loss. Shared by the
// gradcheck CLI command and the acceptance suite.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "metabin/gradcheck.hpp"
#include "metabin/losses.hpp"
#include "metabin/norm.hpp"
#include "metabin/tensor.hpp"

namespace metabin {

struct GradCheckCase {
    std::string name;
    std::function<GradCheckResult(std::mt19937_64&)> run;
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
    return t;
}

inline std::vector<int> random_labels(int64_t n, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, classes - 1);
    std::vector<int> out(static_cast<size_t>(n));
    for (int& v : out) v = u(rng);
    return out;
}

// PK-style labels guaranteeing triplet/shuffle feasibility: 2 domains x 2 ids
// x 2 instances = 8 samples.
struct MetaLabels {
    std::vector<int> ids, domains;
};
inline MetaLabels pk_labels() {
    MetaLabels m;
    for (int dom = 0; dom < 2; ++dom)
        for (int id = 0; id < 2; ++id)
            for (int inst = 0; inst < 2; ++inst) {
                m.ids.push_back(dom * 2 + id);
                m.domains.push_back(dom);
            }
    return m;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradient_suite() {
    using detail::random_tensor;
    std::vector<GradCheckCase> cases;
    auto add_case = [&](std::string name, std::function<GradCheckResult(std::mt19937_64&)> run) {
        cases.push_back({std::move(name), std::move(run)});
    };

    // --- elementwise and scalar ops, reduced through sum-of-squares so the
    //     scalar output exercises the whole tensor
    auto unary = [&](const char* name, auto op, double lo, double hi) {
        add_case(name, [op, lo, hi](std::mt19937_64& rng) {
            Tensor x = random_tensor({2, 3, 4, 4}, rng, lo, hi);
            return finite_diff_check([op](const Var& v) { return sum(square(op(v))); }, x);
        });
    };
    unary("op.relu", [](const Var& v) { return relu(v); }, -2.0, 2.0);
    unary("op.exp", [](const Var& v) { return metabin::exp(v); }, -2.0, 2.0);
    unary("op.log", [](const Var& v) { return metabin::log(v); }, 0.5, 3.0);
    unary("op.sqrt", [](const Var& v) { return metabin::sqrt(v); }, 0.5, 3.0);
    unary("op.softplus", [](const Var& v) { return softplus(v); }, -2.0, 2.0);
    unary("op.pow", [](const Var& v) { return metabin::pow(v, 1.7); }, 0.5, 3.0);

    add_case("op.add_mul_div", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 5}, rng, 0.5, 2.0);
        Tensor other = random_tensor({3, 5}, rng, 0.5, 2.0);
        return finite_diff_check(
            [other](const Var& v) {
                Var o = Var::constant(other);
                return sum(div(mul(add(v, o), sub(v, o)), add_scalar(square(o), 1.0)));
            },
            x);
    });
    add_case("op.div_denominator", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 5}, rng, 0.7, 2.0);
        Tensor num = random_tensor({3, 5}, rng, -2.0, 2.0);
        return finite_diff_check([num](const Var& v) { return sum(div(Var::constant(num), v)); }, x);
    });
    add_case("op.scalar_ops", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({7}, rng);
        return finite_diff_check(
            [](const Var& v) { return sum(square(mul_scalar(add_scalar(v, 0.3), -1.7))); }, x);
    });

    // --- reductions / broadcasting / structure
    add_case("op.sum_axes", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        return finite_diff_check(
            [](const Var& v) { return sum(square(sum_axes(v, {0, 2, 3}))); }, x);
    });
    add_case("op.mean_axes", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        return finite_diff_check([](const Var& v) { return sum(square(mean_axes(v, {2, 3}))); }, x);
    });
    add_case("op.broadcast_to", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({1, 3, 1, 1}, rng);
        Tensor w = random_tensor({2, 3, 4, 4}, rng);
        return finite_diff_check(
            [w](const Var& v) {
                return sum(square(mul(broadcast_to(v, {2, 3, 4, 4}), Var::constant(w))));
            },
            x);
    });
    add_case("op.reshape_concat_row", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 4}, rng);
        return finite_diff_check(
            [](const Var& v) {
                Var stacked = concat0({v, mul_scalar(v, 2.0)});
                return sum(square(row(stacked, 4))) + sum(square(reshape(stacked, {24})));
            },
            x);
    });
    add_case("op.rows_mean", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({5, 3}, rng);
        return finite_diff_check(
            [](const Var& v) { return sum(square(rows_mean(v, {0, 2, 4}))); }, x);
    });

    // --- linear algebra
    add_case("op.linear_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({4, 5}, rng);
        Tensor w = random_tensor({3, 5}, rng);
        Tensor b = random_tensor({3}, rng);
        return finite_diff_check(
            [w, b](const Var& v) {
                return sum(square(linear(v, Var::constant(w), Var::constant(b))));
            },
            x);
    });
    add_case("op.linear_w", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({4, 5}, rng);
        Tensor w = random_tensor({3, 5}, rng);
        Tensor b = random_tensor({3}, rng);
        return finite_diff_check(
            [x, b](const Var& v) {
                return sum(square(linear(Var::constant(x), v, Var::constant(b))));
            },
            w);
    });
    add_case("op.dot_norm_cosine", [](std::mt19937_64& rng) {
        Tensor a = random_tensor({6}, rng, 0.5, 2.0);
        Tensor b = random_tensor({6}, rng, 0.5, 2.0);
        return finite_diff_check(
            [b](const Var& v) {
                Var o = Var::constant(b);
                return dot(v, o) + l2_norm(v) + cosine_similarity(v, o);
            },
            a);
    });
    add_case("op.euclidean_distance", [](std::mt19937_64& rng) {
        Tensor a = random_tensor({6}, rng);
        Tensor b = random_tensor({6}, rng);
        return finite_diff_check(
            [b](const Var& v) { return euclidean_distance(v, Var::constant(b)); }, a);
    });
    add_case("op.pairwise_distances", [](std::mt19937_64& rng) {
        Tensor e = random_tensor({5, 3}, rng);
        return finite_diff_check([](const Var& v) { return sum(square(pairwise_distances(v))); }, e);
    });

    // --- neural-net ops
    add_case("op.conv2d_stride1_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 2, 5, 5}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor b = random_tensor({3}, rng);
        return finite_diff_check(
            [w, b](const Var& v) {
                return sum(square(conv2d(v, Var::constant(w), Var::constant(b), 1)));
            },
            x);
    });
    add_case("op.conv2d_stride2_w", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 2, 6, 6}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor b = random_tensor({3}, rng);
        return finite_diff_check(
            [x, b](const Var& v) {
                return sum(square(conv2d(Var::constant(x), v, Var::constant(b), 2)));
            },
            w);
    });
    add_case("op.global_avg_pool", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        return finite_diff_check([](const Var& v) { return sum(square(global_avg_pool(v))); }, x);
    });
    add_case("op.log_softmax", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({4, 6}, rng);
        return finite_diff_check([](const Var& v) { return sum(square(log_softmax(v))); }, x);
    });
    add_case("op.max_min_select", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({9}, rng);
        return finite_diff_check(
            [](const Var& v) {
                return square(max_element(v).value) + square(min_element(v).value);
            },
            x);
    });

    // --- normalization layers
    add_case("norm.batch_norm_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        return finite_diff_check(
            [](const Var& v) {
                BinLayerParams p(2);
                return sum(square(batch_norm(v, p, Mode::Train)));
            },
            x);
    });
    add_case("norm.batch_norm_affine", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        Tensor affine = random_tensor({4}, rng, 0.5, 1.5);  // gamma_b(2) ++ beta_b(2)
        return finite_diff_check(
            [x](const Var& v) {
                BinLayerParams p(2);
                p.gamma_b = row(reshape(v, {2, 2}), 0);
                p.beta_b = row(reshape(v, {2, 2}), 1);
                return sum(square(batch_norm(Var::constant(x), p, Mode::Train)));
            },
            affine);
    });
    add_case("norm.instance_norm_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        return finite_diff_check(
            [](const Var& v) {
                BinLayerParams p(3);
                return sum(square(instance_norm(v, p)));
            },
            x);
    });
    add_case("norm.bin_forward_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        Tensor rho = random_tensor({2}, rng, 0.2, 0.8);
        return finite_diff_check(
            [rho](const Var& v) {
                BinLayerParams p(2);
                p.rho = Var::constant(rho);
                return sum(square(bin_forward(v, p, Mode::Train)));
            },
            x);
    });
    add_case("norm.bin_forward_rho", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        Tensor rho = random_tensor({2}, rng, 0.2, 0.8);
        return finite_diff_check(
            [x](const Var& v) {
                BinLayerParams p(2);
                p.rho = Var(v.node());
                return sum(square(bin_forward(Var::constant(x), p, Mode::Train)));
            },
            rho);
    });
    add_case("norm.bin_forward_in_affine", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        Tensor affine = random_tensor({4}, rng, 0.5, 1.5);
        return finite_diff_check(
            [x](const Var& v) {
                BinLayerParams p(2);
                p.rho = Var::constant(Tensor::full({2}, 0.4));
                p.gamma_i = reshape(row(reshape(v, {2, 2}), 0), {2});
                p.beta_i = reshape(row(reshape(v, {2, 2}), 1), {2});
                return sum(square(bin_forward(Var::constant(x), p, Mode::Train)));
            },
            affine);
    });
    add_case("norm.batch_norm_1d_x", [](std::mt19937_64& rng) {
        Tensor x = random_tensor({5, 3}, rng);
        return finite_diff_check(
            [](const Var& v) {
                BatchNorm1dParams p(3);
                return sum(square(batch_norm_1d(v, p, Mode::Train)));
            },
            x);
    });

    // --- losses
    add_case("loss.cross_entropy_smoothed", [](std::mt19937_64& rng) {
        Tensor logits = random_tensor({6, 5}, rng);
        std::vector<int> labels = detail::random_labels(6, 5, rng);
        return finite_diff_check(
            [labels](const Var& v) { return cross_entropy_smoothed(v, labels, 0.1); }, logits);
    });
    add_case("loss.batch_hard_triplet", [](std::mt19937_64& rng) {
        Tensor emb = random_tensor({8, 4}, rng);
        auto labels = detail::pk_labels();
        return finite_diff_check(
            [labels](const Var& v) { return batch_hard_triplet(v, labels.ids, 0.3); }, emb);
    });
    add_case("loss.intra_domain_scatter", [](std::mt19937_64& rng) {
        Tensor emb = random_tensor({8, 4}, rng, 0.3, 2.0);
        auto labels = detail::pk_labels();
        return finite_diff_check(
            [labels](const Var& v) { return intra_domain_scatter(v, labels.domains); }, emb);
    });
    add_case("loss.inter_domain_shuffle", [](std::mt19937_64& rng) {
        Tensor emb = random_tensor({8, 4}, rng);
        auto labels = detail::pk_labels();
        return finite_diff_check(
            [labels](const Var& v) { return inter_domain_shuffle(v, labels.ids, labels.domains); },
            emb);
    });
    add_case("loss.composites_rho", [](std::mt19937_64& rng) {
        // both composite losses fed by a BIN layer, differentiated w.r.t. rho
        Tensor x = random_tensor({8, 2, 3, 3}, rng);
        Tensor w = random_tensor({4, 2}, rng, -0.5, 0.5);
        Tensor cw = random_tensor({4, 4}, rng, -0.5, 0.5);
        Tensor rho = random_tensor({2}, rng, 0.2, 0.8);
        auto labels = detail::pk_labels();
        return finite_diff_check(
            [x, w, cw, labels](const Var& v) {
                BinLayerParams p(2);
                p.rho = Var(v.node());
                Var feat = global_avg_pool(bin_forward(Var::constant(x), p, Mode::Train));
                Var emb = linear_no_bias(reshape(feat, {8, 2}), Var::constant(w));
                Var logits = linear_no_bias(emb, Var::constant(cw));
                return base_loss(logits, emb, labels.ids, 0.3, 0.1) +
                       meta_train_loss(emb, labels.ids, labels.domains, 0.3);
            },
            rho);
    });
    add_case("loss.meta_train_composite", [](std::mt19937_64& rng) {
        Tensor emb = random_tensor({8, 4}, rng, 0.3, 2.0);
        auto labels = detail::pk_labels();
        return finite_diff_check(
            [labels](const Var& v) {
                return meta_train_loss(v, labels.ids, labels.domains, 0.3);
            },
            emb);
    });

    return cases;
}

struct GradSuiteEntry {
    std::string name;
    double max_rel_error = 0.0;
    int instances = 0;
    bool passed = false;
};

// Runs every case on `instances` non-degenerate random points each.
inline std::vector<GradSuiteEntry> run_gradient_suite(int instances, double tol, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GradSuiteEntry> results;
    for (const GradCheckCase& c : gradient_suite()) {
        GradSuiteEntry e;
        e.name = c.name;
        int done = 0, attempts = 0;
        while (done < instances && attempts < instances * 50) {
            ++attempts;
            GradCheckResult r = c.run(rng);
            if (r.excluded) continue;  // near a kink or tie; redraw
            e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
            ++done;
        }
        e.instances = done;
        e.passed = done == instances && e.max_rel_error < tol;
        results.push_back(std::move(e));
    }
    return results;
}

}  // namespace metabin
