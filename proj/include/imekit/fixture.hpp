#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/reference_model.hpp"

namespace imekit {

/// Text fixture of a seeded reference model: the config, per-tensor
/// checksums with the first values, and the logits of a short prompt.
/// Another implementation of the same PRNG and forward pass should
/// reproduce it.
inline nlohmann::json model_fixture(const ModelConfig & cfg, std::string_view prompt = "abc") {
    const ReferenceModel model(cfg);
    const auto & w = model.weights();
    auto summary = [](const std::vector<float> & t) {
        double sum = 0.0, sum_abs = 0.0;
        for (float v : t) {
            sum += v;
            sum_abs += std::fabs(v);
        }
        std::vector<float> head(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(8, t.size())));
        return nlohmann::json{{"size", t.size()}, {"sum", sum}, {"sum_abs", sum_abs}, {"head", head}};
    };
    nlohmann::json tensors = nlohmann::json::object();
    tensors["tok_embd"] = summary(w.tok_embd);
    tensors["output"] = summary(w.lm_head);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto & L = w.layers[l];
        const auto p = "blk." + std::to_string(l) + ".";
        tensors[p + "attn_q"] = summary(L.wq);
        tensors[p + "attn_k"] = summary(L.wk);
        tensors[p + "attn_v"] = summary(L.wv);
        tensors[p + "attn_output"] = summary(L.wo);
        tensors[p + "ffn_up"] = summary(L.w_up);
        tensors[p + "ffn_down"] = summary(L.w_down);
    }
    const auto tokens = model.tokenizer().encode(prompt);
    KvStore kv(cfg.kv_layout(), tokens.size(), 2, cfg.rope_base);
    const auto logits = model.prefill(kv, tokens, 0, 0);
    return {{"format", "imekit-model-fixture"},
            {"version", 1},
            {"prng", "key = splitmix64(seed ^ splitmix64(layer ^ fnv1a64(name))); bits_i = splitmix64(key ^ splitmix64(i)); w_i = -0.08 + 0.16 * (bits_i >> 11) * 2^-53"},
            {"config",
             {{"n_layers", cfg.n_layers}, {"d_model", cfg.d_model}, {"n_heads", cfg.n_heads}, {"head_dim", cfg.head_dim},
              {"vocab_size", cfg.vocab_size}, {"ffn_dim", cfg.ffn()}, {"rope_base", cfg.rope_base},
              {"max_positions", cfg.max_positions}, {"weight_seed", cfg.weight_seed}}},
            {"tensors", tensors},
            {"prompt", prompt},
            {"logits", logits.values}};
}

inline ModelConfig fixture_config(const nlohmann::json & fx) {
    const auto & c = fx.at("config");
    ModelConfig cfg;
    cfg.n_layers = c.at("n_layers");
    cfg.d_model = c.at("d_model");
    cfg.n_heads = c.at("n_heads");
    cfg.head_dim = c.at("head_dim");
    cfg.vocab_size = c.at("vocab_size");
    cfg.ffn_dim = c.at("ffn_dim");
    cfg.rope_base = c.at("rope_base");
    cfg.max_positions = c.at("max_positions");
    cfg.weight_seed = c.at("weight_seed");
    return cfg;
}

inline void write_fixture(const std::string & path, const nlohmann::json & fx) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error(ErrorCode::io, "cannot open " + path);
    os << fx.dump(1) << '\n';
}

inline nlohmann::json read_fixture(const std::string & path) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::io, "cannot open " + path);
    return nlohmann::json::parse(is);
}

/// Largest absolute difference between a stored fixture and a fresh rebuild
/// (tensor heads, checksums and logits).
inline double fixture_max_diff(const nlohmann::json & stored) {
    const auto fresh = model_fixture(fixture_config(stored), stored.at("prompt").get<std::string>());
    double worst = 0.0;
    for (const auto & [name, t] : stored.at("tensors").items()) {
        const auto & f = fresh.at("tensors").at(name);
        if (t.at("size") != f.at("size")) return INFINITY;
        worst = std::max(worst, std::fabs(t.at("sum").get<double>() - f.at("sum").get<double>()));
        worst = std::max(worst, std::fabs(t.at("sum_abs").get<double>() - f.at("sum_abs").get<double>()));
        for (std::size_t i = 0; i < t.at("head").size(); ++i) {
            worst = std::max(worst, std::fabs(t["head"][i].get<double>() - f["head"][i].get<double>()));
        }
    }
    const auto & a = stored.at("logits");
    const auto & b = fresh.at("logits");
    if (a.size() != b.size()) return INFINITY;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i].get<double>() - b[i].get<double>()));
    return worst;
}

} // namespace imekit
