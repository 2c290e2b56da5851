#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/kv_splice.hpp"
#include "imekit/orchestrator.hpp"
#include "imekit/radix_cache.hpp"
#include "imekit/reference_model.hpp"
#include "imekit/rng.hpp"
#include "imekit/synthetic.hpp"
#include "imekit/template_model.hpp"

namespace imekit {

// ---------------------------------------------------------------- bench

struct BenchConfig {
    std::vector<std::size_t> lengths = {64, 128, 256, 384, 512};
    int repetitions = 3;
    int decode_tokens = 64;
    std::size_t memory_tokens = 16;
    std::size_t suffix_tokens = 16;
    std::uint64_t seed = 1;
    ModelConfig model = default_model();

    /// Wide FFN so per-token cost is dominated by the fixed-size projections
    /// rather than attention, which keeps decode speed flat across lengths.
    static ModelConfig default_model() {
        ModelConfig m;
        m.n_layers = 2;
        m.d_model = 256;
        m.n_heads = 4;
        m.head_dim = 64;
        m.ffn_dim = 4096;
        m.max_positions = 1024;
        return m;
    }
};

struct BenchRow {
    std::size_t length = 0;
    double prefill_tps = 0.0;
    double decode_tps = 0.0;
    double cold_ttfc_ms = 0.0;
    double warm_ttfc_ms = 0.0;
    std::uint64_t warm_forward_calls = 0;
    std::uint64_t warm_tokens = 0;
    std::uint64_t splice_tokens = 0;
    std::uint64_t splice_forward_calls = 0;
    std::uint64_t baseline_tokens = 0;
    std::uint64_t baseline_forward_calls = 0;
    double splice_token_ratio = 0.0;
    std::size_t kv_cells = 0;
    std::size_t kv_bytes = 0;

    nlohmann::json to_json() const {
        return {{"length", length},
                {"prefill_tps", prefill_tps},
                {"decode_tps", decode_tps},
                {"cold_ttfc_ms", cold_ttfc_ms},
                {"warm_ttfc_ms", warm_ttfc_ms},
                {"warm_forward_calls", warm_forward_calls},
                {"warm_tokens", warm_tokens},
                {"splice_tokens", splice_tokens},
                {"splice_forward_calls", splice_forward_calls},
                {"baseline_tokens", baseline_tokens},
                {"baseline_forward_calls", baseline_forward_calls},
                {"splice_token_ratio", splice_token_ratio},
                {"kv_cells", kv_cells},
                {"kv_bytes", kv_bytes}};
    }
};

struct BenchReport {
    std::vector<BenchRow> rows;
    ModelConfig model;

    /// (max - min) / mean of decode throughput across lengths.
    double decode_spread() const {
        if (rows.empty()) return 0.0;
        double lo = rows.front().decode_tps, hi = lo, sum = 0.0;
        for (const auto & r : rows) {
            lo = std::min(lo, r.decode_tps);
            hi = std::max(hi, r.decode_tps);
            sum += r.decode_tps;
        }
        return (hi - lo) / (sum / static_cast<double>(rows.size()));
    }

    std::string table() const {
        std::ostringstream os;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%6s %12s %12s %10s %10s %6s %8s %8s %7s %10s\n", "len", "prefill t/s", "decode t/s",
                      "cold ms", "warm ms", "warm#", "splice", "base", "ratio", "kv bytes");
        os << buf;
        for (const auto & r : rows) {
            std::snprintf(buf, sizeof buf, "%6zu %12.1f %12.1f %10.3f %10.3f %6llu %8llu %8llu %7.3f %10zu\n", r.length,
                          r.prefill_tps, r.decode_tps, r.cold_ttfc_ms, r.warm_ttfc_ms,
                          static_cast<unsigned long long>(r.warm_forward_calls),
                          static_cast<unsigned long long>(r.splice_tokens),
                          static_cast<unsigned long long>(r.baseline_tokens), r.splice_token_ratio, r.kv_bytes);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "decode throughput spread: %.1f%%\n", 100.0 * decode_spread());
        os << buf;
        return os.str();
    }

    std::vector<std::string> plot_lines() const {
        std::vector<std::string> out;
        for (const auto & r : rows) out.push_back(r.to_json().dump());
        return out;
    }
};

namespace detail {

inline TokenSequence random_text_tokens(StreamRng & rng, std::size_t n) {
    static constexpr std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz      ,.";
    TokenSequence t(n);
    for (auto & x : t) x = static_cast<unsigned char>(alphabet[rng.below(alphabet.size())]);
    return t;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? 0.0 : v[v.size() / 2];
}

} // namespace detail

inline BenchReport bench(const BenchConfig & cfg) {
    using clock = std::chrono::steady_clock;
    const auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
    const auto model = build_reference_model(cfg.model);
    const auto layout = cfg.model.kv_layout();
    StreamRng rng(cfg.seed);
    BenchReport rep;
    rep.model = cfg.model;

    for (const auto L : cfg.lengths) {
        if (L + static_cast<std::size_t>(cfg.decode_tokens) + cfg.memory_tokens + 2 > static_cast<std::size_t>(cfg.model.max_positions)) {
            throw Error(ErrorCode::range, "bench length exceeds the model's max_positions");
        }
        const auto ctx = detail::random_text_tokens(rng, L);
        const auto mem = detail::random_text_tokens(rng, cfg.memory_tokens);
        std::vector<double> prefill_ms, decode_ms, cold_ms, warm_ms;
        BenchRow row;
        row.length = L;
        for (int rep_i = 0; rep_i < std::max(1, cfg.repetitions); ++rep_i) {
            KvStore kv(layout, 4 * L + 4 * cfg.memory_tokens + static_cast<std::size_t>(cfg.decode_tokens) * 2 + 64);
            RadixCache radix({1, 2, 3, 4});

            auto t0 = clock::now();
            auto logits = radix.resume_prefill(*model, kv, ctx, 0);
            StreamRng unused(0);
            const Token first = sample_token(logits.values, 0.0f, unused);
            const auto cold = clock::now() - t0;
            cold_ms.push_back(ms(cold));
            prefill_ms.push_back(ms(cold));

            const auto s0 = kv.stats();
            t0 = clock::now();
            logits = radix.resume_prefill(*model, kv, ctx, 0);
            (void)sample_token(logits.values, 0.0f, unused);
            warm_ms.push_back(ms(clock::now() - t0));
            row.warm_forward_calls = kv.stats().forward_calls - s0.forward_calls;
            row.warm_tokens = kv.stats().tokens_computed - s0.tokens_computed;

            Token t = first;
            auto pos = static_cast<Pos>(L);
            t0 = clock::now();
            for (int i = 0; i < cfg.decode_tokens; ++i) {
                logits = *model->decode_one(kv, t, pos++, 0, true);
                t = sample_token(logits.values, 0.0f, unused);
            }
            decode_ms.push_back(ms(clock::now() - t0));
            row.kv_cells = kv.seq_length(0);
            kv.seq_rm(0, static_cast<Pos>(L), KvStore::to_end);

            // Splice of a memory block before the last suffix_tokens of the context
            // versus a full prefill of the spliced context.
            const auto split = L - std::min(cfg.suffix_tokens, L);
            const std::span<const Token> P(ctx.data(), split);
            const std::span<const Token> S(ctx.data() + split, L - split);
            SpliceOptions opt;
            opt.K = 1;
            opt.sampling.max_tokens = 1;
            auto sp = kv_splice(*model, kv, 0, P, mem, S, opt);
            row.splice_tokens = sp.trace.tokens_computed;
            row.splice_forward_calls = sp.trace.forward_calls;
            auto fb = fallback_baseline(*model, kv, P, mem, S, opt);
            row.baseline_tokens = fb.trace.tokens_computed;
            row.baseline_forward_calls = fb.trace.forward_calls;
        }
        row.prefill_tps = static_cast<double>(L) / (detail::median(prefill_ms) / 1000.0);
        row.decode_tps = static_cast<double>(cfg.decode_tokens) / (detail::median(decode_ms) / 1000.0);
        row.cold_ttfc_ms = detail::median(cold_ms);
        row.warm_ttfc_ms = detail::median(warm_ms);
        row.splice_token_ratio = row.baseline_tokens == 0 ? 0.0 : static_cast<double>(row.splice_tokens) / static_cast<double>(row.baseline_tokens);
        row.kv_cells = L;
        row.kv_bytes = kv_bytes_estimate(L, layout);
        rep.rows.push_back(row);
    }
    return rep;
}

// ---------------------------------------------------------------- dataset

struct TriggerCase {
    std::string prefix;
    bool expect_trigger = false;
};

struct ProcessingCase {
    std::string text;
    bool normal = true; // normal cases carry a gold extraction; refusal cases expect <NO_MEM>
    std::map<std::string, std::string> gold;
};

struct RetrievalFact {
    std::string key; // stable identifier "fact-N"
    std::string text;
    std::map<std::string, std::string> fields;
};

struct RetrievalCase {
    std::string query;
    std::size_t fact = 0; // index into Dataset::facts
};

struct GroundedCase {
    std::string prefix;
    std::string entity;
    std::size_t fact = 0;
};

struct DatasetCounts {
    std::size_t trigger = 343;
    std::size_t normal = 169;
    std::size_t refusal = 122;
    std::size_t retrieval = 200;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::vector<TriggerCase> trigger;
    std::vector<ProcessingCase> normal;
    std::vector<ProcessingCase> refusal;
    std::vector<RetrievalFact> facts;
    std::vector<RetrievalCase> retrieval;
    std::vector<GroundedCase> grounded;

    std::size_t total_cases() const {
        return trigger.size() + normal.size() + refusal.size() + retrieval.size() + grounded.size();
    }
};

inline Dataset gen_dataset(std::uint64_t seed, DatasetCounts counts = {}) {
    using namespace synthetic;
    StreamRng rng(seed);
    const auto & rels = relations();
    const auto & people = names();
    auto pick = [&](const auto & v) -> const auto & { return v[rng.below(v.size())]; };
    Dataset ds;
    ds.seed = seed;

    // Trigger: about 60% fact-seeking prefixes ending in a relation cue.
    for (std::size_t i = 0; i < counts.trigger; ++i) {
        TriggerCase c;
        c.expect_trigger = rng.uniform() < 0.6;
        if (c.expect_trigger) {
            c.prefix = pick(people) + pick(rels).cue;
        } else {
            const auto & line = rng.below(2) ? pick(corpus()) : pick(noise_lines());
            c.prefix = line.substr(0, std::max<std::size_t>(3, rng.below(line.size()) + 1));
        }
        ds.trigger.push_back(std::move(c));
    }

    // Processing (normal): one stated fact, sometimes padded with chatter,
    // sometimes in a phrasing the extraction rules do not cover.
    for (std::size_t i = 0; i < counts.normal; ++i) {
        const auto & r = pick(rels);
        const auto & s = pick(people);
        const auto & e = pick(r.entities);
        ProcessingCase c;
        const bool alt = rng.uniform() < 0.25;
        c.text = synthetic::fill(alt ? r.alt_statement : r.declarative, s, e);
        if (rng.below(3) == 0) c.text = pick(noise_lines()) + ", " + c.text;
        c.gold = {{"subject", s}, {"relation", r.key}, {"entity", e}};
        ds.normal.push_back(std::move(c));
    }

    // Processing (refusal): chatter and questions that carry no durable fact.
    for (std::size_t i = 0; i < counts.refusal; ++i) {
        ProcessingCase c;
        c.normal = false;
        switch (rng.below(3)) {
            case 0: c.text = pick(noise_lines()); break;
            case 1: c.text = pick(corpus()); break;
            default: {
                const auto & r = pick(rels);
                c.text = "do you know " + synthetic::fill(r.query, pick(people)) + "?";
            }
        }
        ds.refusal.push_back(std::move(c));
    }

    // Retrieval: distinct (subject, relation) facts, one paraphrase query each.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t p = 0; p < people.size(); ++p) {
        for (std::size_t r = 0; r < rels.size(); ++r) pairs.emplace_back(p, r);
    }
    for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[rng.below(i)]);
    const auto n_facts = std::min(counts.retrieval, pairs.size());
    for (std::size_t i = 0; i < n_facts; ++i) {
        const auto & person = people[pairs[i].first];
        const auto & r = rels[pairs[i].second];
        const auto & e = pick(r.entities);
        RetrievalFact f;
        f.key = "fact-" + std::to_string(i);
        f.text = synthetic::fill(r.declarative, person, e);
        f.fields = {{"subject", person}, {"relation", r.key}, {"entity", e}};
        ds.facts.push_back(std::move(f));
        ds.retrieval.push_back({synthetic::fill(pick(r.paraphrases), person), i});
        ds.grounded.push_back({person + r.cue, e, i});
    }
    return ds;
}

namespace detail {

inline void write_lines(const std::filesystem::path & p, const std::vector<nlohmann::json> & rows) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw Error(ErrorCode::io, "cannot open " + p.string());
    for (const auto & r : rows) os << r.dump() << '\n';
}

inline std::vector<nlohmann::json> read_lines(const std::filesystem::path & p) {
    std::ifstream is(p);
    if (!is) throw Error(ErrorCode::io, "cannot open " + p.string());
    std::vector<nlohmann::json> out;
    for (std::string line; std::getline(is, line);) {
        if (!trim(line).empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

} // namespace detail

/// One line-delimited JSON file per stage under `dir`.
inline void write_dataset(const Dataset & ds, const std::string & dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<nlohmann::json> rows;
    for (const auto & c : ds.trigger) rows.push_back({{"prefix", c.prefix}, {"expect_trigger", c.expect_trigger}});
    detail::write_lines(fs::path(dir) / "trigger.jsonl", rows);
    rows.clear();
    for (const auto & c : ds.normal) rows.push_back({{"text", c.text}, {"gold", c.gold}});
    detail::write_lines(fs::path(dir) / "processing_normal.jsonl", rows);
    rows.clear();
    for (const auto & c : ds.refusal) rows.push_back({{"text", c.text}});
    detail::write_lines(fs::path(dir) / "processing_refusal.jsonl", rows);
    rows.clear();
    for (const auto & f : ds.facts) rows.push_back({{"key", f.key}, {"text", f.text}, {"fields", f.fields}});
    detail::write_lines(fs::path(dir) / "retrieval_facts.jsonl", rows);
    rows.clear();
    for (const auto & c : ds.retrieval) rows.push_back({{"query", c.query}, {"fact", c.fact}});
    detail::write_lines(fs::path(dir) / "retrieval_queries.jsonl", rows);
    rows.clear();
    for (const auto & c : ds.grounded) rows.push_back({{"prefix", c.prefix}, {"entity", c.entity}, {"fact", c.fact}});
    detail::write_lines(fs::path(dir) / "grounded.jsonl", rows);
    detail::write_lines(fs::path(dir) / "manifest.json", {{{"seed", ds.seed}, {"total_cases", ds.total_cases()}}});
}

inline Dataset read_dataset(const std::string & dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.seed = detail::read_lines(fs::path(dir) / "manifest.json").at(0).at("seed");
    for (const auto & j : detail::read_lines(fs::path(dir) / "trigger.jsonl")) ds.trigger.push_back({j.at("prefix"), j.at("expect_trigger")});
    for (const auto & j : detail::read_lines(fs::path(dir) / "processing_normal.jsonl")) {
        ds.normal.push_back({j.at("text"), true, j.at("gold").get<std::map<std::string, std::string>>()});
    }
    for (const auto & j : detail::read_lines(fs::path(dir) / "processing_refusal.jsonl")) ds.refusal.push_back({j.at("text"), false, {}});
    for (const auto & j : detail::read_lines(fs::path(dir) / "retrieval_facts.jsonl")) {
        ds.facts.push_back({j.at("key"), j.at("text"), j.at("fields").get<std::map<std::string, std::string>>()});
    }
    for (const auto & j : detail::read_lines(fs::path(dir) / "retrieval_queries.jsonl")) ds.retrieval.push_back({j.at("query"), j.at("fact")});
    for (const auto & j : detail::read_lines(fs::path(dir) / "grounded.jsonl")) ds.grounded.push_back({j.at("prefix"), j.at("entity"), j.at("fact")});
    return ds;
}

// ---------------------------------------------------------------- eval

struct ReportRow {
    std::string name;
    std::size_t success = 0;
    std::size_t total = 0;

    double rate() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(success) / static_cast<double>(total); }
};

struct PipelineReport {
    std::vector<ReportRow> rows;
    double mean_processing_reward = 0.0;

    const ReportRow * row(std::string_view name) const {
        for (const auto & r : rows) {
            if (r.name == name) return &r;
        }
        return nullptr;
    }

    std::string table() const {
        std::ostringstream os;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-28s %9s %7s\n", "Stage", "Success", "Rate");
        os << buf;
        for (const auto & r : rows) {
            const auto frac = std::to_string(r.success) + " / " + std::to_string(r.total);
            std::snprintf(buf, sizeof buf, "%-28s %9s %6.1f%%\n", r.name.c_str(), frac.c_str(), r.rate());
            os << buf;
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json rs = nlohmann::json::array();
        for (const auto & r : rows) rs.push_back({{"name", r.name}, {"success", r.success}, {"total", r.total}, {"rate", r.rate()}});
        return {{"rows", rs}, {"mean_processing_reward", mean_processing_reward}};
    }
};

inline constexpr std::string_view row_trigger = "Memory Trigger";
inline constexpr std::string_view row_normal = "Processing (Normal)";
inline constexpr std::string_view row_refusal = "Processing (Refusal)";
inline constexpr std::string_view row_retrieval = "Retrieval@4";
inline constexpr std::string_view row_grounded = "Grounded Generation";

/// Runs each stage through the engine on the given backend (template model by
/// default). Grounded Generation is evaluated only on cases whose Retrieval@4
/// query found the gold fact.
inline PipelineReport eval_pipeline(const Dataset & ds, ModelHandle model = nullptr) {
    if (!model) model = build_default_template_model();
    PipelineReport rep;

    EngineConfig ec;
    ec.K = 4;
    Engine trig_engine(model, ec);
    trig_engine.handle_sync({"eval-trigger", {}, "casual"});
    ReportRow trig{std::string(row_trigger), 0, ds.trigger.size()};
    for (const auto & c : ds.trigger) {
        const auto cs = trig_engine.generate_candidates("eval-trigger", c.prefix);
        if (cs.retrieval_triggered == c.expect_trigger) ++trig.success;
    }
    rep.rows.push_back(trig);

    double reward_sum = 0.0;
    ReportRow normal{std::string(row_normal), 0, ds.normal.size()};
    for (const auto & c : ds.normal) {
        const auto out = parse_output(model->extract_memory(c.text));
        reward_sum += total_reward(out, TaskClass::C1).total();
        if (!out.json) continue;
        bool match = true;
        for (const auto & [k, v] : c.gold) {
            const auto it = out.json->find(k);
            if (it == out.json->end() || !it->is_string() || it->get<std::string>() != v) match = false;
        }
        if (match) ++normal.success;
    }
    rep.rows.push_back(normal);

    ReportRow refusal{std::string(row_refusal), 0, ds.refusal.size()};
    for (const auto & c : ds.refusal) {
        const auto out = parse_output(model->extract_memory(c.text));
        reward_sum += total_reward(out, TaskClass::C2).total();
        if (out.no_mem == NoMemFlag::pure) ++refusal.success;
    }
    rep.rows.push_back(refusal);
    const auto n_proc = ds.normal.size() + ds.refusal.size();
    rep.mean_processing_reward = n_proc == 0 ? 0.0 : reward_sum / static_cast<double>(n_proc);

    Engine mem_engine(model, ec);
    std::vector<std::uint64_t> ids;
    for (const auto & f : ds.facts) ids.push_back(mem_engine.insert_fact(f.text, f.fields, "dataset:" + f.key).id);
    ReportRow retrieval{std::string(row_retrieval), 0, ds.retrieval.size()};
    std::vector<bool> hit(ds.facts.size(), false);
    for (const auto & c : ds.retrieval) {
        const auto hits = mem_engine.snapshot().search(c.query, 4);
        const bool found = std::any_of(hits.begin(), hits.end(), [&](const auto & h) { return h.record.id == ids.at(c.fact); });
        if (found) {
            ++retrieval.success;
            hit[c.fact] = true;
        }
    }
    rep.rows.push_back(retrieval);

    ReportRow grounded{std::string(row_grounded), 0, 0};
    mem_engine.handle_sync({"eval-grounded", {}, "casual"});
    for (const auto & c : ds.grounded) {
        if (!hit.at(c.fact)) continue;
        ++grounded.total;
        const auto cs = mem_engine.generate_candidates("eval-grounded", c.prefix);
        const bool ok = std::any_of(cs.candidates.begin(), cs.candidates.end(), [&](const CandidateEntry & e) {
            return e.record_id && e.text.find(c.entity) != std::string::npos;
        });
        if (ok) ++grounded.success;
    }
    rep.rows.push_back(grounded);
    return rep;
}

} // namespace imekit
