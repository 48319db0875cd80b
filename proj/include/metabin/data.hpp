#pragma once

// Synthetic multi-domain retrieval dataset: identity-specific spatial content
// plus domain-specific channel-global style, with PK-style batch sampling and
// binary + JSON-sidecar persistence.

#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "metabin/errors.hpp"
#include "metabin/io.hpp"
#include "metabin/tensor.hpp"

namespace metabin {

struct StyleSpec {
    std::vector<double> gain;  // per channel, > 0
    std::vector<double> bias;  // per channel
    double smoothing = 0.0;    // blend weight toward a 3x3 box blur
    double contrast = 1.0;     // sign-preserving power
    double noise = 0.0;        // additive noise level
};

struct Domain {
    int domain_id = 0;
    uint64_t seed = 0;
    StyleSpec style;
    int num_identities = 0;
    int images_per_identity = 0;
    std::vector<int> global_ids;      // one per local identity
    std::vector<int> image_identity;  // local identity per image
    std::vector<float> pixels;        // images * C*H*W, row-major

    int num_images() const { return static_cast<int>(image_identity.size()); }
};

struct GenConfig {
    int num_source_domains = 5;
    int num_target_domains = 2;
    int identities_per_domain = 20;
    int images_per_identity = 8;
    int image_size = 16;
    int channels = 3;
    double jitter_noise = 0.05;  // per-image pixel noise before style
    double illum_gain = 1.6;     // per-image global gain drawn from exp(U(-ln g, ln g))
    double illum_bias = 0.4;     // per-image global offset drawn from U(-b, b)
    bool style_enabled = true;
    uint64_t seed = 0;
};

struct DomainDataset {
    GenConfig gen;
    int channels = 3;
    int height = 16;
    int width = 16;
    std::vector<Domain> source;
    std::vector<Domain> target;
    int total_identities = 0;  // across source and target (disjoint spaces)

    int source_identities() const {
        int m = 0;
        for (const Domain& d : source) m += d.num_identities;
        return m;
    }
    int total_source_images() const {
        int n = 0;
        for (const Domain& d : source) n += d.num_images();
        return n;
    }
};

namespace detail {

inline std::vector<double> box_blur(const std::vector<double>& img, int C, int H, int W) {
    std::vector<double> out(img.size(), 0.0);
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double s = 0.0;
                int cnt = 0;
                for (int dh = -1; dh <= 1; ++dh)
                    for (int dw = -1; dw <= 1; ++dw) {
                        int hh = h + dh, ww = w + dw;
                        if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                        s += img[static_cast<size_t>((c * H + hh) * W + ww)];
                        ++cnt;
                    }
                out[static_cast<size_t>((c * H + h) * W + w)] = s / cnt;
            }
    return out;
}

inline StyleSpec draw_style(std::mt19937_64& rng, int channels, bool enabled) {
    StyleSpec s;
    s.gain.assign(static_cast<size_t>(channels), 1.0);
    s.bias.assign(static_cast<size_t>(channels), 0.0);
    if (!enabled) return s;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int c = 0; c < channels; ++c) {
        s.gain[static_cast<size_t>(c)] = std::exp((u01(rng) * 2.0 - 1.0) * std::log(4.0));
        s.bias[static_cast<size_t>(c)] = (u01(rng) * 2.0 - 1.0) * 2.5;
    }
    s.smoothing = u01(rng) * 0.3;
    s.contrast = 0.8 + u01(rng) * 0.45;  // in [0.8, 1.25]
    s.noise = 0.01 + u01(rng) * 0.03;
    return s;
}

inline Domain generate_domain(int domain_id, uint64_t seed, int first_global_id,
                              const GenConfig& cfg, const StyleSpec& style) {
    Domain dom;
    dom.domain_id = domain_id;
    dom.seed = seed;
    dom.style = style;
    dom.num_identities = cfg.identities_per_domain;
    dom.images_per_identity = cfg.images_per_identity;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> shift(-1, 1);
    int C = cfg.channels, H = cfg.image_size, W = cfg.image_size;
    size_t img_elems = static_cast<size_t>(C * H * W);
    dom.pixels.reserve(static_cast<size_t>(cfg.identities_per_domain) * cfg.images_per_identity *
                       img_elems);
    for (int id = 0; id < cfg.identities_per_domain; ++id) {
        dom.global_ids.push_back(first_global_id + id);
        // identity content: smoothed random spatial template
        std::vector<double> tmpl(img_elems);
        for (double& v : tmpl) v = gauss(rng);
        tmpl = box_blur(tmpl, C, H, W);
        for (int img = 0; img < cfg.images_per_identity; ++img) {
            dom.image_identity.push_back(id);
            int dx = shift(rng), dy = shift(rng);
            std::vector<double> px(img_elems);
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        int sh = std::clamp(h + dy, 0, H - 1);
                        int sw = std::clamp(w + dx, 0, W - 1);
                        px[static_cast<size_t>((c * H + h) * W + w)] =
                            tmpl[static_cast<size_t>((c * H + sh) * W + sw)] +
                            cfg.jitter_noise * gauss(rng);
                    }
            // per-image illumination: a global affine nuisance every image carries
            double ig = std::exp((u01(rng) * 2.0 - 1.0) * std::log(cfg.illum_gain));
            double ib = (u01(rng) * 2.0 - 1.0) * cfg.illum_bias;
            for (double& v : px) v = ig * v + ib;
            // style: smooth, contrast, channel gain/bias, noise
            if (style.smoothing > 0.0) {
                std::vector<double> blurred = box_blur(px, C, H, W);
                for (size_t i = 0; i < px.size(); ++i)
                    px[i] = (1.0 - style.smoothing) * px[i] + style.smoothing * blurred[i];
            }
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H * W; ++i) {
                    double& v = px[static_cast<size_t>(c * H * W + i)];
                    if (style.contrast != 1.0)
                        v = (v < 0 ? -1.0 : 1.0) * std::pow(std::abs(v), style.contrast);
                    v = style.gain[static_cast<size_t>(c)] * v + style.bias[static_cast<size_t>(c)];
                    if (style.noise > 0.0) v += style.noise * gauss(rng);
                }
            for (double v : px) dom.pixels.push_back(static_cast<float>(v));
        }
    }
    return dom;
}

}  // namespace detail

// Source domains plus held-out target domains with fresh styles and fresh
// identities; identity label spaces are globally disjoint.
inline DomainDataset generate_dataset(const GenConfig& cfg) {
    if (cfg.num_source_domains < 2) throw ConfigError("generate: need at least 2 source domains");
    if (cfg.identities_per_domain < 4) throw ConfigError("generate: need at least 4 identities per domain");
    if (cfg.images_per_identity < 2) throw ConfigError("generate: need at least 2 images per identity");
    if (cfg.image_size < 8) throw ConfigError("generate: image size must be at least 8");
    if (cfg.channels < 1) throw ConfigError("generate: need at least 1 channel");
    if (cfg.illum_gain < 1.0) throw ConfigError("generate: illum_gain must be >= 1");
    if (cfg.illum_bias < 0.0) throw ConfigError("generate: illum_bias must be >= 0");
    DomainDataset ds;
    ds.gen = cfg;
    ds.channels = cfg.channels;
    ds.height = ds.width = cfg.image_size;
    std::mt19937_64 master(cfg.seed);
    int next_global = 0;
    int total = cfg.num_source_domains + cfg.num_target_domains;
    for (int k = 0; k < total; ++k) {
        uint64_t dom_seed = master();
        StyleSpec style = detail::draw_style(master, cfg.channels, cfg.style_enabled);
        Domain dom = detail::generate_domain(k, dom_seed, next_global, cfg, style);
        next_global += dom.num_identities;
        (k < cfg.num_source_domains ? ds.source : ds.target).push_back(std::move(dom));
    }
    ds.total_identities = next_global;
    return ds;
}

struct BatchData {
    Tensor images;  // (N, C, H, W)
    std::vector<int> identity_labels;  // global ids
    std::vector<int> domain_labels;
};

// PK sampling: per selected domain, P = samples_per_domain / k_inst identities
// with k_inst images each.
inline BatchData sample_batch(const DomainDataset& ds, const std::vector<int>& domain_indices,
                              int samples_per_domain, int k_inst, std::mt19937_64& rng) {
    if (domain_indices.empty()) throw SamplingError("sample_batch: no domains selected");
    if (k_inst < 2 || samples_per_domain % k_inst != 0)
        throw SamplingError("sample_batch: samples_per_domain must be a multiple of k_inst >= 2");
    int P = samples_per_domain / k_inst;
    int C = ds.channels, H = ds.height, W = ds.width;
    size_t img_elems = static_cast<size_t>(C * H * W);
    int64_t N = static_cast<int64_t>(domain_indices.size()) * samples_per_domain;
    BatchData batch;
    batch.images = Tensor({N, C, H, W});
    int64_t row = 0;
    for (int di : domain_indices) {
        if (di < 0 || di >= static_cast<int>(ds.source.size()))
            throw SamplingError("sample_batch: domain index " + std::to_string(di) + " out of range");
        const Domain& dom = ds.source[static_cast<size_t>(di)];
        if (dom.num_identities < P)
            throw SamplingError("sample_batch: domain " + std::to_string(di) + " has only " +
                                std::to_string(dom.num_identities) + " identities, need " +
                                std::to_string(P));
        if (dom.images_per_identity < k_inst)
            throw SamplingError("sample_batch: domain " + std::to_string(di) + " has only " +
                                std::to_string(dom.images_per_identity) +
                                " images per identity, need " + std::to_string(k_inst));
        // choose P identities without replacement
        std::vector<int> ids(static_cast<size_t>(dom.num_identities));
        for (int i = 0; i < dom.num_identities; ++i) ids[static_cast<size_t>(i)] = i;
        for (int i = 0; i < P; ++i) {
            std::uniform_int_distribution<int> pick(i, dom.num_identities - 1);
            std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(pick(rng))]);
        }
        for (int i = 0; i < P; ++i) {
            int local = ids[static_cast<size_t>(i)];
            std::vector<int> imgs(static_cast<size_t>(dom.images_per_identity));
            for (int j = 0; j < dom.images_per_identity; ++j) imgs[static_cast<size_t>(j)] = j;
            for (int j = 0; j < k_inst; ++j) {
                std::uniform_int_distribution<int> pick(j, dom.images_per_identity - 1);
                std::swap(imgs[static_cast<size_t>(j)], imgs[static_cast<size_t>(pick(rng))]);
            }
            for (int j = 0; j < k_inst; ++j) {
                int img_index = local * dom.images_per_identity + imgs[static_cast<size_t>(j)];
                const float* src = dom.pixels.data() + static_cast<size_t>(img_index) * img_elems;
                double* dst = batch.images.data() + static_cast<size_t>(row) * img_elems;
                for (size_t t = 0; t < img_elems; ++t) dst[t] = static_cast<double>(src[t]);
                batch.identity_labels.push_back(dom.global_ids[static_cast<size_t>(local)]);
                batch.domain_labels.push_back(dom.domain_id);
                ++row;
            }
        }
    }
    return batch;
}

// All images of one domain (for evaluation), as a tensor plus labels.
inline BatchData domain_images(const Domain& dom, int C, int H, int W) {
    size_t img_elems = static_cast<size_t>(C * H * W);
    BatchData out;
    out.images = Tensor({static_cast<int64_t>(dom.num_images()), C, H, W});
    for (int i = 0; i < dom.num_images(); ++i) {
        const float* src = dom.pixels.data() + static_cast<size_t>(i) * img_elems;
        double* dst = out.images.data() + static_cast<size_t>(i) * img_elems;
        for (size_t t = 0; t < img_elems; ++t) dst[t] = static_cast<double>(src[t]);
        out.identity_labels.push_back(dom.global_ids[static_cast<size_t>(dom.image_identity[static_cast<size_t>(i)])]);
        out.domain_labels.push_back(dom.domain_id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence: <path>.bin (pixels, float32 LE) + <path>.json (metadata)

namespace detail {

constexpr uint32_t kDatasetMagic = 0x4D424453;  // "MBDS"
constexpr uint32_t kDatasetVersion = 1;

inline nlohmann::json style_to_json(const StyleSpec& s) {
    return {{"gain", s.gain},     {"bias", s.bias},         {"smoothing", s.smoothing},
            {"contrast", s.contrast}, {"noise", s.noise}};
}

inline StyleSpec style_from_json(const nlohmann::json& j) {
    StyleSpec s;
    s.gain = j.at("gain").get<std::vector<double>>();
    s.bias = j.at("bias").get<std::vector<double>>();
    s.smoothing = j.at("smoothing").get<double>();
    s.contrast = j.at("contrast").get<double>();
    s.noise = j.at("noise").get<double>();
    return s;
}

inline nlohmann::json domain_to_json(const Domain& d) {
    return {{"domain_id", d.domain_id},
            {"seed", d.seed},
            {"style", style_to_json(d.style)},
            {"num_identities", d.num_identities},
            {"images_per_identity", d.images_per_identity},
            {"global_ids", d.global_ids},
            {"image_identity", d.image_identity}};
}

inline Domain domain_from_json(const nlohmann::json& j) {
    Domain d;
    d.domain_id = j.at("domain_id").get<int>();
    d.seed = j.at("seed").get<uint64_t>();
    d.style = style_from_json(j.at("style"));
    d.num_identities = j.at("num_identities").get<int>();
    d.images_per_identity = j.at("images_per_identity").get<int>();
    d.global_ids = j.at("global_ids").get<std::vector<int>>();
    d.image_identity = j.at("image_identity").get<std::vector<int>>();
    return d;
}

}  // namespace detail

inline void save_dataset(const DomainDataset& ds, const std::string& path) {
    nlohmann::json meta;
    meta["format_version"] = detail::kDatasetVersion;
    meta["channels"] = ds.channels;
    meta["height"] = ds.height;
    meta["width"] = ds.width;
    meta["total_identities"] = ds.total_identities;
    meta["gen"] = {{"num_source_domains", ds.gen.num_source_domains},
                   {"num_target_domains", ds.gen.num_target_domains},
                   {"identities_per_domain", ds.gen.identities_per_domain},
                   {"images_per_identity", ds.gen.images_per_identity},
                   {"image_size", ds.gen.image_size},
                   {"channels", ds.gen.channels},
                   {"jitter_noise", ds.gen.jitter_noise},
                   {"illum_gain", ds.gen.illum_gain},
                   {"illum_bias", ds.gen.illum_bias},
                   {"style_enabled", ds.gen.style_enabled},
                   {"seed", ds.gen.seed}};
    meta["source"] = nlohmann::json::array();
    meta["target"] = nlohmann::json::array();
    for (const Domain& d : ds.source) meta["source"].push_back(detail::domain_to_json(d));
    for (const Domain& d : ds.target) meta["target"].push_back(detail::domain_to_json(d));
    {
        std::ofstream js(path + ".json");
        if (!js) throw FormatError("save_dataset: cannot open " + path + ".json");
        js << meta.dump(2) << "\n";
    }
    detail::FileHandle f(std::fopen((path + ".bin").c_str(), "wb"));
    if (!f) throw FormatError("save_dataset: cannot open " + path + ".bin");
    detail::write_u32(f.get(), detail::kDatasetMagic);
    detail::write_u32(f.get(), detail::kDatasetVersion);
    auto write_pixels = [&](const Domain& d) {
        detail::write_u32(f.get(), static_cast<uint32_t>(d.pixels.size()));
        if (std::fwrite(d.pixels.data(), sizeof(float), d.pixels.size(), f.get()) != d.pixels.size())
            throw FormatError("save_dataset: write failed");
    };
    for (const Domain& d : ds.source) write_pixels(d);
    for (const Domain& d : ds.target) write_pixels(d);
}

inline DomainDataset load_dataset(const std::string& path) {
    nlohmann::json meta;
    {
        std::ifstream js(path + ".json");
        if (!js) throw FormatError("load_dataset: cannot open " + path + ".json");
        try {
            js >> meta;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("load_dataset: bad metadata: ") + e.what());
        }
    }
    try {
        if (meta.at("format_version").get<uint32_t>() != detail::kDatasetVersion)
            throw FormatError("load_dataset: unsupported format version");
        DomainDataset ds;
        ds.channels = meta.at("channels").get<int>();
        ds.height = meta.at("height").get<int>();
        ds.width = meta.at("width").get<int>();
        ds.total_identities = meta.at("total_identities").get<int>();
        const auto& g = meta.at("gen");
        ds.gen.num_source_domains = g.at("num_source_domains").get<int>();
        ds.gen.num_target_domains = g.at("num_target_domains").get<int>();
        ds.gen.identities_per_domain = g.at("identities_per_domain").get<int>();
        ds.gen.images_per_identity = g.at("images_per_identity").get<int>();
        ds.gen.image_size = g.at("image_size").get<int>();
        ds.gen.channels = g.at("channels").get<int>();
        ds.gen.jitter_noise = g.at("jitter_noise").get<double>();
        ds.gen.illum_gain = g.at("illum_gain").get<double>();
        ds.gen.illum_bias = g.at("illum_bias").get<double>();
        ds.gen.style_enabled = g.at("style_enabled").get<bool>();
        ds.gen.seed = g.at("seed").get<uint64_t>();
        for (const auto& dj : meta.at("source")) ds.source.push_back(detail::domain_from_json(dj));
        for (const auto& dj : meta.at("target")) ds.target.push_back(detail::domain_from_json(dj));

        detail::FileHandle f(std::fopen((path + ".bin").c_str(), "rb"));
        if (!f) throw FormatError("load_dataset: cannot open " + path + ".bin");
        if (detail::read_u32(f.get()) != detail::kDatasetMagic)
            throw FormatError("load_dataset: bad magic");
        if (detail::read_u32(f.get()) != detail::kDatasetVersion)
            throw FormatError("load_dataset: unsupported pixel-file version");
        auto read_pixels = [&](Domain& d) {
            uint32_t n = detail::read_u32(f.get());
            size_t expected = static_cast<size_t>(d.num_images()) *
                              static_cast<size_t>(ds.channels * ds.height * ds.width);
            if (n != expected) throw FormatError("load_dataset: pixel count mismatch");
            d.pixels.resize(n);
            if (std::fread(d.pixels.data(), sizeof(float), n, f.get()) != n)
                throw FormatError("load_dataset: truncated pixel file");
        };
        for (Domain& d : ds.source) read_pixels(d);
        for (Domain& d : ds.target) read_pixels(d);
        unsigned char extra;
        if (std::fread(&extra, 1, 1, f.get()) == 1)
            throw FormatError("load_dataset: trailing bytes in pixel file");
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_dataset: bad metadata: ") + e.what());
    }
}

}  // namespace metabin
