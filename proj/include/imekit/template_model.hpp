#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/model.hpp"
#include "imekit/synthetic.hpp"

namespace imekit {

/// A fact-to-phrase rule: when the composing line ends in `cue`, the model
/// either asks for retrieval (no memory in context) or continues with one of
/// `phrases` filled with the remembered entity.
struct TemplateRule {
    std::string key;
    std::string cue;
    std::string query;                // {S} = subject
    std::vector<std::string> phrases; // {E} = entity
};

inline std::vector<TemplateRule> default_template_rules() {
    std::vector<TemplateRule> rules;
    for (const auto & r : synthetic::relations()) {
        rules.push_back({r.key, r.cue, r.query, {"{E}", "{E}, I think", "{E} of course", "{E} for sure"}});
    }
    return rules;
}

inline std::string default_corpus_text() {
    std::string text;
    for (const auto & line : synthetic::corpus()) {
        text += line;
        text += '\n';
    }
    return text;
}

/// Parsed "[MEM k=v; k=v] text" line.
struct MemoryLine {
    std::map<std::string, std::string> fields;
    std::string text;
};

inline std::string render_memory_line(const std::map<std::string, std::string> & fields, std::string_view text) {
    std::string out = "[MEM";
    bool first = true;
    for (const auto & [k, v] : fields) {
        out += first ? " " : "; ";
        out += k + "=" + v;
        first = false;
    }
    out += "] ";
    out.append(text);
    out += '\n';
    return out;
}

inline std::optional<MemoryLine> parse_memory_line(std::string_view line) {
    if (!line.starts_with("[MEM")) return std::nullopt;
    const auto close = line.find(']');
    if (close == std::string_view::npos) return std::nullopt;
    MemoryLine m;
    std::string_view body = line.substr(4, close - 4);
    while (!body.empty()) {
        const auto sep = body.find(';');
        auto item = trim(body.substr(0, sep));
        const auto eq = item.find('=');
        if (eq != std::string_view::npos) m.fields.emplace(std::string(trim(item.substr(0, eq))), std::string(trim(item.substr(eq + 1))));
        if (sep == std::string_view::npos) break;
        body.remove_prefix(sep + 1);
    }
    m.text = std::string(trim(line.substr(close + 1)));
    return m;
}

/// Order-3 byte n-gram model with rule-driven retrieval triggers and
/// memory-grounded phrase templates. The full context is read back from the
/// KV store's cell tokens, so it plugs into the same cache machinery as the
/// transformer while holding no K/V payload.
class TemplateModel final : public LanguageModel {
public:
    static constexpr float script_boost = 12.0f;

    TemplateModel(std::string_view corpus, std::vector<TemplateRule> rules, int max_positions = 4096)
        : LanguageModel(256), rules_(std::move(rules)) {
        if (corpus.empty()) throw Error(ErrorCode::configuration, "template model needs a non-empty corpus");
        cfg_.n_layers = 0;
        cfg_.d_model = 0;
        cfg_.n_heads = 0;
        cfg_.head_dim = 0;
        cfg_.vocab_size = 256;
        cfg_.max_positions = max_positions;
        train(corpus);
    }

    const ModelConfig & config() const override { return cfg_; }
    std::string_view name() const override { return "template"; }
    const std::vector<TemplateRule> & rules() const { return rules_; }

    /// Rule-driven extraction: a declarative "<Subject><cue><entity>" statement
    /// becomes JSON; questions and everything else become <NO_MEM>.
    std::string extract_memory(std::string_view trace) const override {
        std::string_view text = trim(trace);
        if (text.find('?') == std::string_view::npos) {
            for (const auto & rule : rules_) {
                const auto at = text.find(rule.cue);
                if (at == std::string_view::npos) continue;
                const auto subject = word_before(text, at);
                if (subject.empty() || !std::isupper(static_cast<unsigned char>(subject.front()))) continue;
                std::string_view rest = text.substr(at + rule.cue.size());
                const auto end = rest.find_first_of(".!,;\n");
                const auto entity = trim(rest.substr(0, end));
                if (entity.empty()) continue;
                nlohmann::json j = {{"subject", subject}, {"relation", rule.key}, {"entity", entity}};
                return "<think>" + rule.key + " fact about " + std::string(subject) + "</think>" + j.dump();
            }
        }
        return "<think>no durable fact</think><NO_MEM>";
    }

    /// Next-byte logits for a raw context string (exposed for tests).
    std::vector<float> logits_for(std::string_view text) const {
        std::vector<float> logits(256);
        const unsigned a = text.size() >= 2 ? static_cast<unsigned char>(text[text.size() - 2]) : 0u;
        const unsigned b = text.empty() ? 0u : static_cast<unsigned char>(text.back());
        const bool have2 = text.size() >= 2;
        const bool have1 = !text.empty();
        const auto & tri = have2 ? lookup(trigram_, a << 8 | b) : empty_;
        const auto & bi = have1 ? lookup(bigram_, b) : empty_;
        const double n3 = have2 ? total(trigram_, a << 8 | b) : 0.0;
        const double n2 = have1 ? total(bigram_, b) : 0.0;
        for (int c = 0; c < 256; ++c) {
            const double p1 = (unigram_[static_cast<std::size_t>(c)] + 1.0 / 256.0) / (unigram_total_ + 1.0);
            const double p2 = (bi[static_cast<std::size_t>(c)] + p1) / (n2 + 1.0);
            const double p3 = (tri[static_cast<std::size_t>(c)] + p2) / (n3 + 1.0);
            logits[static_cast<std::size_t>(c)] = static_cast<float>(std::log(p3));
        }
        const auto script = scripted_next(text);
        if (!script.empty()) {
            const float top = *std::max_element(logits.begin(), logits.end());
            for (unsigned char c : script) logits[c] = top + script_boost;
        }
        return logits;
    }

    /// Bytes the rules want to emit next; empty when the n-gram model decides.
    std::string scripted_next(std::string_view text) const {
        const auto nl = text.rfind('\n');
        const std::string_view line = nl == std::string_view::npos ? text : text.substr(nl + 1);
        std::string_view prev;
        if (nl != std::string_view::npos) {
            const auto before = text.substr(0, nl);
            const auto pnl = before.rfind('\n');
            prev = pnl == std::string_view::npos ? before : before.substr(pnl + 1);
        }

        const TemplateRule * rule = nullptr;
        std::size_t cue_at = 0;
        for (const auto & r : rules_) {
            const auto at = line.rfind(r.cue);
            if (at != std::string_view::npos && (rule == nullptr || at > cue_at)) {
                rule = &r;
                cue_at = at;
            }
        }
        if (rule == nullptr) return {};
        const auto subject = word_before(line, cue_at);
        if (subject.empty()) return {};
        const std::string_view generated = line.substr(cue_at + rule->cue.size());

        std::vector<std::string> phrases;
        if (const auto mem = parse_memory_line(prev)) {
            const auto rel = mem->fields.find("relation");
            const auto ent = mem->fields.find("entity");
            if (rel == mem->fields.end() || ent == mem->fields.end() || rel->second != rule->key) return {};
            const auto suffix = synthetic::style_suffix(style_of(text));
            for (const auto & p : rule->phrases) phrases.push_back(synthetic::fill(p, subject, ent->second) + std::string(suffix));
        } else {
            phrases.push_back(std::string(control::mem_open_text) + synthetic::fill(rule->query, subject) +
                              std::string(control::mem_close_text));
        }

        std::string next;
        for (const auto & p : phrases) {
            if (!p.starts_with(generated)) continue;
            const char c = generated.size() < p.size() ? p[generated.size()] : '\n';
            if (next.find(c) == std::string::npos) next.push_back(c);
        }
        return next;
    }

    static std::string_view style_of(std::string_view text) {
        if (!text.starts_with("[STYLE:")) return {};
        const auto close = text.find(']');
        if (close == std::string_view::npos) return {};
        return text.substr(7, close - 7);
    }

protected:
    std::optional<Logits> forward(KvStore & kv, std::span<const KvStore::CellId> new_cells, SeqId seq,
                                  bool want_logits) const override {
        if (!want_logits) return std::nullopt;
        const Pos last = kv.cell_pos(new_cells.back());
        std::string text;
        for (const auto & [pos, cell] : kv.view(seq)) {
            if (pos > last) break;
            tokenizer().append(text, kv.cell_token(cell));
        }
        Logits out;
        out.values = logits_for(text);
        return out;
    }

private:
    using Counts = std::array<double, 256>;

    static std::string_view word_before(std::string_view text, std::size_t at) {
        std::size_t b = at;
        while (b > 0 && (std::isalnum(static_cast<unsigned char>(text[b - 1])) || text[b - 1] == '-')) --b;
        return text.substr(b, at - b);
    }

    void train(std::string_view corpus) {
        unigram_.fill(0.0);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto c = static_cast<unsigned char>(corpus[i]);
            unigram_[c] += 1.0;
            unigram_total_ += 1.0;
            if (i >= 1) bump(bigram_, static_cast<unsigned char>(corpus[i - 1]), c);
            if (i >= 2) {
                const unsigned key = static_cast<unsigned>(static_cast<unsigned char>(corpus[i - 2])) << 8 |
                                     static_cast<unsigned char>(corpus[i - 1]);
                bump(trigram_, key, c);
            }
        }
    }

    static void bump(std::unordered_map<unsigned, Counts> & table, unsigned key, unsigned char c) {
        auto [it, inserted] = table.try_emplace(key);
        if (inserted) it->second.fill(0.0);
        it->second[c] += 1.0;
    }

    const Counts & lookup(const std::unordered_map<unsigned, Counts> & table, unsigned key) const {
        auto it = table.find(key);
        return it == table.end() ? empty_ : it->second;
    }

    static double total(const std::unordered_map<unsigned, Counts> & table, unsigned key) {
        auto it = table.find(key);
        if (it == table.end()) return 0.0;
        double s = 0.0;
        for (double v : it->second) s += v;
        return s;
    }

    ModelConfig cfg_;
    std::vector<TemplateRule> rules_;
    Counts unigram_{};
    double unigram_total_ = 0.0;
    std::unordered_map<unsigned, Counts> bigram_;
    std::unordered_map<unsigned, Counts> trigram_;
    Counts empty_{};
};

inline ModelHandle build_template_model(std::string_view corpus, std::vector<TemplateRule> templates,
                                        int max_positions = 4096) {
    return std::make_shared<const TemplateModel>(corpus, std::move(templates), max_positions);
}

inline ModelHandle build_default_template_model(int max_positions = 4096) {
    return build_template_model(default_corpus_text(), default_template_rules(), max_positions);
}

} // namespace imekit
