#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "imekit/model.hpp"
#include "imekit/rng.hpp"

namespace imekit {

/// Seeded weights of the toy pre-norm RoPE transformer. Matrices are
/// row-major (out x in); every entry is uniform(-0.08, 0.08) from
/// CounterRng(seed, layer, tensor name). Global tensors use layer 0.
struct ReferenceWeights {
    struct Layer {
        std::vector<float> attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down;
    };

    std::vector<float> tok_embd;
    std::vector<Layer> layers;
    std::vector<float> out_norm;
    std::vector<float> lm_head;

    static constexpr double init_range = 0.08;

    static std::vector<float> tensor(const ModelConfig & cfg, int layer, std::string_view name, std::size_t n) {
        const CounterRng rng(cfg.weight_seed, static_cast<std::uint64_t>(layer), name);
        std::vector<float> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = rng.uniform(i, -init_range, init_range);
        return out;
    }

    static ReferenceWeights generate(const ModelConfig & cfg) {
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto f = static_cast<std::size_t>(cfg.ffn());
        const auto v = static_cast<std::size_t>(cfg.vocab_size);
        ReferenceWeights w;
        w.tok_embd = tensor(cfg, 0, "tok_embd", v * d);
        for (int l = 0; l < cfg.n_layers; ++l) {
            Layer L;
            L.attn_norm.assign(d, 1.0f);
            L.wq = tensor(cfg, l, "attn_q", d * d);
            L.wk = tensor(cfg, l, "attn_k", d * d);
            L.wv = tensor(cfg, l, "attn_v", d * d);
            L.wo = tensor(cfg, l, "attn_output", d * d);
            L.ffn_norm.assign(d, 1.0f);
            L.w_up = tensor(cfg, l, "ffn_up", f * d);
            L.w_down = tensor(cfg, l, "ffn_down", d * f);
            w.layers.push_back(std::move(L));
        }
        w.out_norm.assign(d, 1.0f);
        w.lm_head = tensor(cfg, 0, "output", v * d);
        return w;
    }
};

namespace detail {

inline void matvec(std::span<const float> w, std::span<const float> x, std::span<float> y) {
    const std::size_t in = x.size();
    for (std::size_t i = 0; i < y.size(); ++i) {
        const float * row = w.data() + i * in;
        float acc = 0.0f;
        for (std::size_t j = 0; j < in; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
}

inline void rmsnorm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
    float ss = 0.0f;
    for (float v : x) ss += v * v;
    const float scale = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + 1e-6f);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gain[i];
}

} // namespace detail

/// Deterministic toy transformer used to verify the KV mechanics exactly.
class ReferenceModel final : public LanguageModel {
public:
    explicit ReferenceModel(ModelConfig cfg)
        : LanguageModel(cfg.vocab_size), cfg_((cfg.validate(), cfg)), w_(ReferenceWeights::generate(cfg_)) {}

    const ModelConfig & config() const override { return cfg_; }
    std::string_view name() const override { return "reference"; }
    const ReferenceWeights & weights() const { return w_; }

    /// Greedy continuation of an extraction prompt. The toy weights are
    /// untrained, so this mostly yields malformed output; it exists so the
    /// curation path runs identically on both backends.
    std::string extract_memory(std::string_view trace) const override {
        const auto & tok = tokenizer();
        TokenSequence prompt = tok.encode("[EXTRACT]\n");
        const auto body = tok.encode(trace);
        const std::size_t budget = 48;
        const std::size_t room = static_cast<std::size_t>(cfg_.max_positions) - prompt.size() - budget - 1;
        prompt.insert(prompt.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(std::min(room, body.size())));
        prompt.push_back('\n');

        KvStore kv(cfg_.kv_layout(), prompt.size() + budget + 1, 2, cfg_.rope_base);
        auto logits = prefill(kv, prompt, 0, 0);
        std::string out;
        auto pos = static_cast<Pos>(prompt.size());
        for (std::size_t i = 0; i < budget; ++i) {
            const auto it = std::max_element(logits.values.begin(), logits.values.end());
            const auto next = static_cast<Token>(std::distance(logits.values.begin(), it));
            if (next == '\n') break;
            tok.append(out, next);
            logits = *decode_one(kv, next, pos++, 0, true);
        }
        return out;
    }

protected:
    std::optional<Logits> forward(KvStore & kv, std::span<const KvStore::CellId> new_cells, SeqId seq,
                                  bool want_logits) const override {
        const auto d = static_cast<std::size_t>(cfg_.d_model);
        const auto hd = static_cast<std::size_t>(cfg_.head_dim);
        const auto n_heads = static_cast<std::size_t>(cfg_.n_heads);
        const auto f = static_cast<std::size_t>(cfg_.ffn());
        const std::size_t T = new_cells.size();
        const Pos last_pos = kv.cell_pos(new_cells.back());

        // Context in position order; the prefix with pos <= p is what token p attends to.
        std::vector<KvStore::CellId> ctx;
        std::vector<Pos> ctx_pos;
        for (const auto & [pos, cell] : kv.view(seq)) {
            if (pos > last_pos) break;
            ctx.push_back(cell);
            ctx_pos.push_back(pos);
        }

        std::vector<float> x(T * d);
        for (std::size_t t = 0; t < T; ++t) {
            const auto tok = static_cast<std::size_t>(kv.cell_token(new_cells[t]));
            std::copy_n(w_.tok_embd.begin() + static_cast<std::ptrdiff_t>(tok * d), d, x.begin() + static_cast<std::ptrdiff_t>(t * d));
        }

        std::vector<float> h(d), q(T * d), attn(d), proj(d), up(f), scores;
        const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

        for (int l = 0; l < cfg_.n_layers; ++l) {
            const auto & L = w_.layers[static_cast<std::size_t>(l)];
            for (std::size_t t = 0; t < T; ++t) {
                const auto cell = new_cells[t];
                const Pos pos = kv.cell_pos(cell);
                std::span<float> xt(x.data() + t * d, d);
                std::span<float> qt(q.data() + t * d, d);
                detail::rmsnorm(xt, L.attn_norm, h);
                detail::matvec(L.wq, h, qt);
                auto kt = kv.key(cell, l);
                detail::matvec(L.wk, h, kt);
                detail::matvec(L.wv, h, kv.value(cell, l));
                for (std::size_t hh = 0; hh < n_heads; ++hh) {
                    rope_rotate_inplace(qt.subspan(hh * hd, hd), pos, cfg_.rope_base);
                    rope_rotate_inplace(kt.subspan(hh * hd, hd), pos, cfg_.rope_base);
                }
            }
            for (std::size_t t = 0; t < T; ++t) {
                const Pos pos = kv.cell_pos(new_cells[t]);
                const auto n_ctx = static_cast<std::size_t>(
                    std::distance(ctx_pos.begin(), std::upper_bound(ctx_pos.begin(), ctx_pos.end(), pos)));
                scores.resize(n_ctx);
                std::span<const float> qt(q.data() + t * d, d);
                for (std::size_t hh = 0; hh < n_heads; ++hh) {
                    const auto qh = qt.subspan(hh * hd, hd);
                    float mx = -INFINITY;
                    for (std::size_t c = 0; c < n_ctx; ++c) {
                        const auto kc = kv.key(ctx[c], l).subspan(hh * hd, hd);
                        float s = 0.0f;
                        for (std::size_t i = 0; i < hd; ++i) s += qh[i] * kc[i];
                        scores[c] = s * inv_sqrt;
                        mx = std::max(mx, scores[c]);
                    }
                    float sum = 0.0f;
                    for (auto & s : scores) {
                        s = std::exp(s - mx);
                        sum += s;
                    }
                    auto out = std::span<float>(attn).subspan(hh * hd, hd);
                    std::fill(out.begin(), out.end(), 0.0f);
                    for (std::size_t c = 0; c < n_ctx; ++c) {
                        const float p = scores[c] / sum;
                        const auto vc = kv.value(ctx[c], l).subspan(hh * hd, hd);
                        for (std::size_t i = 0; i < hd; ++i) out[i] += p * vc[i];
                    }
                }
                std::span<float> xt(x.data() + t * d, d);
                detail::matvec(L.wo, attn, proj);
                for (std::size_t i = 0; i < d; ++i) xt[i] += proj[i];

                detail::rmsnorm(xt, L.ffn_norm, h);
                detail::matvec(L.w_up, h, up);
                for (auto & u : up) u = u / (1.0f + std::exp(-u));
                detail::matvec(L.w_down, up, proj);
                for (std::size_t i = 0; i < d; ++i) xt[i] += proj[i];
            }
        }

        if (!want_logits) return std::nullopt;
        Logits out;
        out.values.resize(static_cast<std::size_t>(cfg_.vocab_size));
        detail::rmsnorm(std::span<const float>(x.data() + (T - 1) * d, d), w_.out_norm, h);
        detail::matvec(w_.lm_head, h, out.values);
        return out;
    }

private:
    ModelConfig cfg_;
    ReferenceWeights w_;
};

inline ModelHandle build_reference_model(const ModelConfig & config) {
    return std::make_shared<const ReferenceModel>(config);
}

} // namespace imekit
