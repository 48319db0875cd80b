#pragma once

// Flat key-value run configuration: `key = value` lines, '#' comments.
// Unknown keys are rejected; missing keys take documented defaults; the
// resolved config is echoed into the output directory.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "metabin/data.hpp"
#include "metabin/model.hpp"
#include "metabin/trainer.hpp"

namespace metabin {

struct RunConfig {
    TrainConfig train;
    GenConfig gen;
    ModelConfig model;
    std::string dataset_path;  // basename; .bin/.json appended

    // keeps the documented key order for the resolved-config echo
    std::map<std::string, std::string> resolved() const;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_map(const std::map<std::string, std::string>& kv);
    void echo(const std::string& path) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out;
    is >> out;
    if (is.fail() || !is.eof())
        throw ConfigError("config: key '" + key + "' has invalid value '" + v + "'");
    return out;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

inline std::map<std::string, std::string> RunConfig::resolved() const {
    std::map<std::string, std::string> kv;
    using detail::fmt;
    kv["alpha"] = fmt(train.alpha);
    kv["warmup_epochs"] = std::to_string(train.warmup_epochs);
    {
        std::string s;
        for (int e : train.decay_epochs) s += (s.empty() ? "" : ",") + std::to_string(e);
        kv["decay_epochs"] = s;
    }
    kv["decay_factor"] = fmt(train.decay_factor);
    kv["momentum"] = fmt(train.momentum);
    kv["weight_decay"] = fmt(train.weight_decay);
    kv["beta_min"] = fmt(train.beta_min);
    kv["beta_max"] = fmt(train.beta_max);
    kv["cycle_length"] = std::to_string(train.cycle_length);
    kv["cyclic_beta"] = train.cyclic_beta_enabled ? "true" : "false";
    kv["gamma"] = fmt(train.gamma);
    kv["margin"] = fmt(train.margin);
    kv["epsilon"] = fmt(train.epsilon);
    kv["epochs"] = std::to_string(train.epochs);
    kv["samples_per_domain"] = std::to_string(train.samples_per_domain);
    kv["k_inst"] = std::to_string(train.k_inst);
    kv["n_mtr"] = std::to_string(train.n_mtr);
    kv["n_mte"] = std::to_string(train.n_mte);
    kv["enable_meta"] = train.enable_meta ? "true" : "false";
    kv["enable_scat"] = train.enable_scat ? "true" : "false";
    kv["enable_shuf"] = train.enable_shuf ? "true" : "false";
    kv["freeze_rho"] = train.freeze_rho ? "true" : "false";
    kv["seed"] = std::to_string(train.seed);
    kv["checkpoint_every"] = std::to_string(train.checkpoint_every);
    kv["num_source_domains"] = std::to_string(gen.num_source_domains);
    kv["num_target_domains"] = std::to_string(gen.num_target_domains);
    kv["identities_per_domain"] = std::to_string(gen.identities_per_domain);
    kv["images_per_identity"] = std::to_string(gen.images_per_identity);
    kv["image_size"] = std::to_string(gen.image_size);
    kv["image_channels"] = std::to_string(gen.channels);
    kv["jitter_noise"] = fmt(gen.jitter_noise);
    kv["illum_gain"] = fmt(gen.illum_gain);
    kv["illum_bias"] = fmt(gen.illum_bias);
    kv["style_enabled"] = gen.style_enabled ? "true" : "false";
    kv["dataset_seed"] = std::to_string(gen.seed);
    kv["d_emb"] = std::to_string(model.d_emb);
    kv["model_init_seed"] = std::to_string(model.init_seed);
    kv["dataset"] = dataset_path;
    return kv;
}

inline RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv) {
    RunConfig rc;
    std::map<std::string, std::string> defaults = rc.resolved();
    for (const auto& [key, value] : kv)
        if (!defaults.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        return it != kv.end() ? it->second : defaults.at(key);
    };
    using detail::parse_bool;
    using detail::parse_num;
    rc.train.alpha = parse_num<double>("alpha", get("alpha"));
    rc.train.warmup_epochs = parse_num<int>("warmup_epochs", get("warmup_epochs"));
    {
        rc.train.decay_epochs.clear();
        std::istringstream is(get("decay_epochs"));
        std::string tok;
        while (std::getline(is, tok, ','))
            if (!detail::trim(tok).empty())
                rc.train.decay_epochs.push_back(parse_num<int>("decay_epochs", detail::trim(tok)));
    }
    rc.train.decay_factor = parse_num<double>("decay_factor", get("decay_factor"));
    rc.train.momentum = parse_num<double>("momentum", get("momentum"));
    rc.train.weight_decay = parse_num<double>("weight_decay", get("weight_decay"));
    rc.train.beta_min = parse_num<double>("beta_min", get("beta_min"));
    rc.train.beta_max = parse_num<double>("beta_max", get("beta_max"));
    rc.train.cycle_length = parse_num<int>("cycle_length", get("cycle_length"));
    rc.train.cyclic_beta_enabled = parse_bool("cyclic_beta", get("cyclic_beta"));
    rc.train.gamma = parse_num<double>("gamma", get("gamma"));
    rc.train.margin = parse_num<double>("margin", get("margin"));
    rc.train.epsilon = parse_num<double>("epsilon", get("epsilon"));
    rc.train.epochs = parse_num<int>("epochs", get("epochs"));
    rc.train.samples_per_domain = parse_num<int>("samples_per_domain", get("samples_per_domain"));
    rc.train.k_inst = parse_num<int>("k_inst", get("k_inst"));
    rc.train.n_mtr = parse_num<int>("n_mtr", get("n_mtr"));
    rc.train.n_mte = parse_num<int>("n_mte", get("n_mte"));
    rc.train.enable_meta = parse_bool("enable_meta", get("enable_meta"));
    rc.train.enable_scat = parse_bool("enable_scat", get("enable_scat"));
    rc.train.enable_shuf = parse_bool("enable_shuf", get("enable_shuf"));
    rc.train.freeze_rho = parse_bool("freeze_rho", get("freeze_rho"));
    rc.train.seed = parse_num<uint64_t>("seed", get("seed"));
    rc.train.checkpoint_every = parse_num<int>("checkpoint_every", get("checkpoint_every"));
    rc.gen.num_source_domains = parse_num<int>("num_source_domains", get("num_source_domains"));
    rc.gen.num_target_domains = parse_num<int>("num_target_domains", get("num_target_domains"));
    rc.gen.identities_per_domain =
        parse_num<int>("identities_per_domain", get("identities_per_domain"));
    rc.gen.images_per_identity = parse_num<int>("images_per_identity", get("images_per_identity"));
    rc.gen.image_size = parse_num<int>("image_size", get("image_size"));
    rc.gen.channels = parse_num<int>("image_channels", get("image_channels"));
    rc.gen.jitter_noise = parse_num<double>("jitter_noise", get("jitter_noise"));
    rc.gen.illum_gain = parse_num<double>("illum_gain", get("illum_gain"));
    rc.gen.illum_bias = parse_num<double>("illum_bias", get("illum_bias"));
    rc.gen.style_enabled = parse_bool("style_enabled", get("style_enabled"));
    rc.gen.seed = parse_num<uint64_t>("dataset_seed", get("dataset_seed"));
    rc.model.d_emb = parse_num<int64_t>("d_emb", get("d_emb"));
    rc.model.init_seed = parse_num<uint64_t>("model_init_seed", get("model_init_seed"));
    rc.model.in_channels = rc.gen.channels;
    rc.model.image_size = rc.gen.image_size;
    rc.dataset_path = get("dataset");
    return rc;
}

inline RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = detail::trim(s.substr(0, eq));
        std::string value = detail::trim(s.substr(eq + 1));
        if (kv.count(key))
            throw ConfigError("config: duplicate key '" + key + "' at line " + std::to_string(lineno));
        kv[key] = value;
    }
    return from_map(kv);
}

inline void RunConfig::echo(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ConfigError("config: cannot write " + path);
    for (const auto& [key, value] : resolved()) f << key << " = " << value << "\n";
}

}  // namespace metabin
