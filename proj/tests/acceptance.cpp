#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "imekit/imekit.hpp"
#include "oracles.hpp"

using namespace imekit;

namespace {

// Tolerances.
constexpr double splice_tol = 1e-4;
constexpr double splice_seconds = 10.0;
constexpr double rope_tol = 1e-6;
constexpr double radix_tol = 1e-5;
constexpr double recall_floor = 0.95;
constexpr double advantage_tol = 1e-9;
constexpr std::size_t min_eval_cases = 300;

struct Outcome {
    bool pass = true;
    std::string detail;
};

ModelConfig splice_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 64;
    c.n_heads = 4;
    c.head_dim = 16;
    c.vocab_size = 256;
    return c;
}

TokenSequence random_text(StreamRng & rng, std::size_t n) {
    static constexpr std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz ,.\n";
    TokenSequence t(n);
    for (auto & x : t) x = static_cast<unsigned char>(alphabet[rng.below(alphabet.size())]);
    return t;
}

TokenSequence concat(std::initializer_list<std::span<const Token>> parts) {
    TokenSequence out;
    for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

std::string fmt(const char * f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Outcome splice_exactness() {
    const ReferenceModel model(splice_config());
    StreamRng rng(2024);
    double worst = 0.0, oracle_worst = 0.0;
    double seconds = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto P = random_text(rng, 8 + rng.below(57));
        const auto M = random_text(rng, 4 + rng.below(13));
        KvStore kv(model.config().kv_layout(), 512, 8);
        model.prefill(kv, P, 0, 0);
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = kv_splice(model, kv, 0, P, M, {});
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (r.trace.fallback) return {false, "trial " + std::to_string(trial) + " fell back: " + r.trace.fallback_reason};
        const auto full = concat({P, M});
        KvStore cold(model.config().kv_layout(), 256);
        const auto want = model.prefill(cold, full, 0, 0);
        worst = std::max(worst, oracle::max_abs_diff(r.logits.values, want.values));
        if (trial % 10 == 0) {
            // The full-prefill reference itself agrees with an uncached double-precision forward pass.
            const std::vector<int> toks(full.begin(), full.end());
            oracle_worst = std::max(oracle_worst, oracle::max_abs_diff(want.values, oracle::logits(model.config(), toks)));
        }
    }
    Outcome o;
    o.pass = worst <= splice_tol && oracle_worst <= splice_tol && seconds < splice_seconds;
    o.detail = fmt("max|diff|=%.3g", worst) + fmt(" oracle=%.3g", oracle_worst) + fmt(" time=%.2fs", seconds);
    return o;
}

Outcome splice_structure() {
    const ReferenceModel model(splice_config());
    StreamRng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const auto P = random_text(rng, 4 + rng.below(40));
        const auto M = random_text(rng, 1 + rng.below(16));
        const auto S = random_text(rng, trial % 5 == 0 ? 0 : 1 + rng.below(24));
        KvStore kv(model.config().kv_layout(), 1024, 8);
        model.prefill(kv, concat({P, S}), 0, 0);
        const auto r = kv_splice(model, kv, 0, P, M, S);
        if (r.trace.fallback) return {false, "trial " + std::to_string(trial) + " fell back: " + r.trace.fallback_reason};
        if (r.work_tokens != concat({P, M, S})) return {false, "trial " + std::to_string(trial) + ": work sequence does not spell P||M||S"};
        if (!r.work_consecutive) return {false, "trial " + std::to_string(trial) + ": positions not consecutive"};
    }
    // Corruption: drop a cell from the work sequence after the overlay.
    int fallbacks = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto P = random_text(rng, 6 + rng.below(20));
        const auto M = random_text(rng, 2 + rng.below(8));
        const auto S = random_text(rng, 2 + rng.below(8));
        KvStore kv(model.config().kv_layout(), 1024, 8);
        model.prefill(kv, concat({P, S}), 0, 0);
        SpliceOptions opt;
        opt.after_overlay = [](KvStore & k, const SplicePlan & plan) { k.seq_rm(plan.work_seq, plan.insert_pos, plan.insert_pos + 1); };
        const auto r = kv_splice(model, kv, 0, P, M, S, opt);
        if (!r.trace.fallback) return {false, "corruption did not trigger fallback"};
        KvStore cold(model.config().kv_layout(), 256);
        const auto want = model.prefill(cold, concat({P, M, S}), 0, 0);
        if (r.logits.values != want.values) return {false, "fallback logits differ from cold prefill"};
        ++fallbacks;
    }
    return {true, "50 trials exact, " + std::to_string(fallbacks) + " corruption fallbacks bit-identical"};
}

Outcome rope_shift_law() {
    StreamRng rng(31);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<float> v(16);
        for (auto & x : v) x = static_cast<float>(rng.normal());
        const auto p = static_cast<Pos>(rng.below(512));
        const auto a = static_cast<Pos>(rng.below(256)) - 128;
        const auto b = static_cast<Pos>(rng.below(256)) - 128;
        worst = std::max(worst, oracle::max_abs_diff(rope_rotate(v, 0, 10000.0), v));
        worst = std::max(worst, oracle::max_abs_diff(rope_rotate(rope_rotate(v, a, 10000.0), b, 10000.0), rope_rotate(v, a + b, 10000.0)));
        const auto at_p = apply_rope(v, p, 10000.0);
        worst = std::max(worst, oracle::max_abs_diff(rope_rotate(at_p, a + 128, 10000.0), apply_rope(v, p + a + 128, 10000.0)));
        const std::vector<double> vd(v.begin(), v.end());
        worst = std::max(worst, oracle::max_abs_diff(rope_rotate(at_p, a + 128, 10000.0), oracle::rope(vd, static_cast<double>(p + a + 128), 10000.0)));
    }
    return {worst <= rope_tol, fmt("max|diff|=%.3g over 1000 vectors", worst)};
}

Outcome radix_reuse() {
    const ReferenceModel model(splice_config());
    StreamRng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        KvStore kv(model.config().kv_layout(), 2048, 8);
        RadixCache radix({1, 2, 3, 4});
        const auto base = random_text(rng, 8 + rng.below(120));
        radix.resume_prefill(model, kv, base, 0);
        auto ctx = base;
        const auto k = 1 + rng.below(20);
        const auto extra = random_text(rng, k);
        ctx.insert(ctx.end(), extra.begin(), extra.end());
        auto s0 = kv.stats();
        const auto lg = radix.resume_prefill(model, kv, ctx, 0);
        if (kv.stats().tokens_computed - s0.tokens_computed != k) {
            return {false, "trial " + std::to_string(trial) + ": append of " + std::to_string(k) + " computed " +
                               std::to_string(kv.stats().tokens_computed - s0.tokens_computed)};
        }
        s0 = kv.stats();
        const auto again = radix.resume_prefill(model, kv, ctx, 0);
        if (kv.stats().tokens_computed - s0.tokens_computed != 1) return {false, "identical resubmission did not recompute exactly 1 token"};
        KvStore cold(model.config().kv_layout(), 256);
        const auto want = model.prefill(cold, ctx, 0, 0);
        worst = std::max({worst, oracle::max_abs_diff(lg.values, want.values), oracle::max_abs_diff(again.values, want.values)});
    }
    return {worst <= radix_tol, fmt("100 appends exact; max|diff|=%.3g", worst)};
}

Outcome hnsw_recall() {
    StreamRng rng(8);
    auto unit = [&](std::size_t dim) {
        std::vector<float> v(dim);
        double n = 0.0;
        for (auto & x : v) {
            x = static_cast<float>(rng.normal());
            n += static_cast<double>(x) * x;
        }
        for (auto & x : v) x = static_cast<float>(x / std::sqrt(n));
        return v;
    };
    std::vector<std::vector<float>> data;
    HnswIndex idx(64);
    for (std::size_t i = 0; i < 200; ++i) {
        data.push_back(unit(64));
        idx.insert(i, data.back());
    }
    std::size_t hit = 0;
    for (int q = 0; q < 100; ++q) {
        const auto query = unit(64);
        const auto truth = oracle::top_k(data, query, 4);
        for (const auto & r : idx.search(query, 4)) hit += std::count(truth.begin(), truth.end(), r.id);
    }
    const double recall = static_cast<double>(hit) / 400.0;
    return {recall >= recall_floor && idx.check_invariants(), fmt("recall@4=%.4f", recall)};
}

double score(std::string_view raw, TaskClass c) { return total_reward(parse_output(raw), c).total(); }

Outcome reward_engine() {
    const std::string t120 = "<think>" + std::string(120, 'r') + "</think>";
    const std::string t301 = "<think>" + std::string(301, 'r') + "</think>";
    // (output, class, expected think tenths, expected task tenths)
    const std::vector<std::tuple<std::string, TaskClass, int, int>> table = {
        {t120 + "ok", TaskClass::A, 2, 15},
        {t301 + "ok", TaskClass::A, -2, 15},
        {"<think>ok", TaskClass::A, -5, 15},
        {"no think", TaskClass::A, 0, 15},
        {"", TaskClass::A, -2, 0},
        {"<MEM_RETRIEVAL>q</MEM_RETRIEVAL>", TaskClass::A, 0, -15},
        {"a b c a b c a b c", TaskClass::A, 0, 10},
        {"<MEM_RETRIEVAL>alice dog</MEM_RETRIEVAL>", TaskClass::B, 0, 30},
        {"x <MEM_RETRIEVAL>q</MEM_RETRIEVAL>", TaskClass::B, 0, 20},
        {"<MEM_RETRIEVAL>q", TaskClass::B, 0, 8},
        {"<MEM_RETRIEVAL>", TaskClass::B, 0, -10},
        {"plain text", TaskClass::B, 0, -20},
        {"<NO_MEM>", TaskClass::C1, 0, -15},
        {"{broken", TaskClass::C1, 0, -10},
        {R"({"s":"A","r":"city","e":"Lisbon"})", TaskClass::C1, 0, 21},
        {"<NO_MEM>", TaskClass::C2, 0, 15},
        {R"({"s":"A"})", TaskClass::C2, 0, -10},
        {"<NO_MEM> sorry", TaskClass::C2, 0, 0},
    };
    std::set<std::string> branches;
    for (const auto & [raw, cls, th, ta] : table) {
        const auto r = total_reward(parse_output(raw), cls);
        if (r.think.tenths != th || r.task.tenths != ta) {
            return {false, "case '" + raw + "' gave " + std::to_string(r.think.tenths) + "/" + std::to_string(r.task.tenths)};
        }
        branches.insert(r.think.branch);
        branches.insert(std::string(to_string(cls)) + ":" + r.task.branch);
    }
    const bool examples = score(R"({"a":1,"b":2,"c":3})", TaskClass::C1) == 2.1 && score("<MEM_RETRIEVAL>x</MEM_RETRIEVAL>", TaskClass::A) == -1.5 &&
                          score("<MEM_RETRIEVAL>x</MEM_RETRIEVAL>", TaskClass::B) == 3.0 && score("<NO_MEM>", TaskClass::C2) == 1.5;
    if (!examples) return {false, "worked examples mismatch"};
    StreamRng rng(12);
    double worst = 0.0;
    for (int g = 0; g < 200; ++g) {
        std::vector<double> rs(2 + rng.below(15));
        for (auto & x : rs) x = static_cast<double>(static_cast<int>(rng.below(60)) - 30) / 10.0;
        rs[0] = rs[1] + 0.1;
        const auto adv = group_advantages(rs);
        double mean = 0.0, var = 0.0;
        for (double a : adv) mean += a;
        mean /= static_cast<double>(adv.size());
        for (double a : adv) var += (a - mean) * (a - mean);
        worst = std::max({worst, std::fabs(mean), std::fabs(std::sqrt(var / static_cast<double>(adv.size())) - 1.0)});
    }
    return {worst <= advantage_tol, std::to_string(table.size()) + " fixtures, " + std::to_string(branches.size()) + " branches; advantage err " + fmt("%.2g", worst)};
}

std::set<std::tuple<std::string, std::map<std::string, std::string>, std::string>> fact_set(Engine & e) {
    std::set<std::tuple<std::string, std::map<std::string, std::string>, std::string>> out;
    for (const auto & r : e.memory_list()) out.emplace(r.text, r.fields, r.source_trace);
    return out;
}

Outcome preemption() {
    DatasetCounts counts{0, 60, 40, 0};
    const auto ds = gen_dataset(11, counts);
    std::vector<ChatMessage> msgs;
    for (std::size_t i = 0; i < 60; ++i) {
        msgs.push_back({"user", ds.normal[i].text});
        if (i < 40) msgs.push_back({"user", ds.refusal[i].text});
    }
    const auto model = build_default_template_model();
    Engine ref(model);
    ref.handle_sync({"s", msgs, "casual"});
    ref.run_curation();
    const auto want = fact_set(ref);

    StreamRng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t point = 1 + rng.below(99);
        Engine * self = nullptr;
        bool armed = true;
        EngineConfig cfg;
        cfg.curation_hooks.after_trace = [&](std::size_t n) {
            if (armed && n == point && self) self->preempt();
        };
        Engine e(model, cfg);
        self = &e;
        e.handle_sync({"s", msgs, "casual"});
        const auto first = e.run_curation();
        if (!first.preempted || first.processed != point) {
            return {false, "preempt at " + std::to_string(point) + " stopped after " + std::to_string(first.processed)};
        }
        armed = false;
        const auto second = e.run_curation();
        if (first.processed + second.processed != msgs.size()) return {false, "trace count mismatch after resume"};
        if (fact_set(e) != want) return {false, "fact set differs after preemption at " + std::to_string(point)};
        if (e.worker().trajectories().get().size() != msgs.size()) return {false, "trajectory log not exactly-once"};
    }
    return {true, std::to_string(msgs.size()) + " traces, 20 preemption points, " + std::to_string(want.size()) + " facts each"};
}

Outcome pipeline_report() {
    const auto ds = gen_dataset(7);
    if (ds.total_cases() < min_eval_cases) return {false, "dataset too small"};
    const auto a = eval_pipeline(ds);
    const auto b = eval_pipeline(ds);
    if (a.rows.size() != 5) return {false, "expected five rows"};
    const std::vector<std::pair<std::string_view, std::size_t>> denom = {
        {row_trigger, ds.trigger.size()}, {row_normal, ds.normal.size()}, {row_refusal, ds.refusal.size()}, {row_retrieval, ds.retrieval.size()}};
    for (const auto & [name, n] : denom) {
        const auto * r = a.row(name);
        if (!r || r->total != n) return {false, "bad denominator for " + std::string(name)};
    }
    if (a.row(row_grounded)->total != a.row(row_retrieval)->success) return {false, "grounded denominator != retrieval successes"};
    if (a.to_json() != b.to_json()) return {false, "rerun differs"};
    std::string d = std::to_string(ds.total_cases()) + " cases;";
    for (const auto & r : a.rows) d += " " + std::to_string(r.success) + "/" + std::to_string(r.total);
    return {true, d};
}

Outcome bench_report() {
    BenchConfig cfg;
    cfg.repetitions = 1;
    cfg.decode_tokens = 16;
    const auto rep = bench(cfg);
    if (rep.rows.size() != cfg.lengths.size() || rep.rows.back().length != 512) return {false, "missing rows"};
    for (const auto & r : rep.rows) {
        if (r.warm_forward_calls != 1) return {false, "warm forward calls " + std::to_string(r.warm_forward_calls) + " at length " + std::to_string(r.length)};
        if (!(r.prefill_tps > 0 && r.decode_tps > 0 && r.kv_bytes > 0)) return {false, "empty measurements"};
    }
    return {true, fmt("5 lengths to 512, warm#=1; decode spread %.1f%%", 100.0 * rep.decode_spread())};
}

} // namespace

int main() {
    const std::vector<std::pair<const char *, std::function<Outcome()>>> criteria = {
        {"splice-exactness-empty-suffix", splice_exactness},
        {"splice-token-structure", splice_structure},
        {"rope-shift-law", rope_shift_law},
        {"radix-reuse", radix_reuse},
        {"hnsw-recall", hnsw_recall},
        {"reward-engine", reward_engine},
        {"preemption-exactly-once", preemption},
        {"pipeline-report", pipeline_report},
        {"bench-report", bench_report},
    };
    int failed = 0;
    for (const auto & [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception & e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %-32s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
