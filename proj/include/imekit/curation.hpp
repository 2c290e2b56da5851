#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/memory.hpp"
#include "imekit/model.hpp"
#include "imekit/reward.hpp"
#include "imekit/synthetic.hpp"
#include "imekit/template_model.hpp"

namespace imekit {

/// One cached interaction event awaiting curation. The id is stable across
/// retries, which is what makes insertion exactly-once.
struct Trace {
    std::string id;
    std::string text;
    std::optional<std::string> style;
};

struct CurationReport {
    std::size_t processed = 0;
    std::size_t skipped = 0; // already curated in an earlier run
    std::size_t extracted = 0;
    std::size_t refused = 0;
    std::size_t inserted = 0;
    std::size_t remaining = 0;
    std::size_t compiled_blobs = 0;
    bool preempted = false;
    std::vector<std::uint64_t> new_fact_ids;

    nlohmann::json to_json() const {
        return {{"processed", processed}, {"skipped", skipped},   {"extracted", extracted},
                {"refused", refused},     {"inserted", inserted}, {"remaining", remaining},
                {"compiled_blobs", compiled_blobs}, {"preempted", preempted}};
    }
};

/// Concise declarative sentence for an extraction.
inline std::string declarative_text(const std::map<std::string, std::string> & fields) {
    const auto get = [&](const char * k) {
        auto it = fields.find(k);
        return it == fields.end() ? std::string{} : it->second;
    };
    const auto subject = get("subject");
    const auto relation = get("relation");
    const auto entity = get("entity");
    if (const auto * rel = synthetic::find_relation(relation); rel && !subject.empty() && !entity.empty()) {
        return synthetic::fill(rel->declarative, subject, entity);
    }
    std::string out;
    for (const auto & [k, v] : fields) {
        if (!out.empty()) out += "; ";
        out += k + ": " + v;
    }
    return out.empty() ? out : out + ".";
}

/// Token text a memory-grounded splice inserts for a record.
inline std::string memory_line_for(const MemoryRecord & r) { return render_memory_line(r.fields, r.text); }

/// Background curation: extraction or refusal per trace, reward scoring into
/// L3, declarative facts into L2, and L1 compilation of frequently used facts.
/// Cancellation is checked before each trace, so a preempt takes effect
/// within one trace.
class Curator {
public:
    struct Hooks {
        /// Called after each fully processed trace with the running count.
        std::function<void(std::size_t)> after_trace;
    };

    Curator(ModelHandle model, FactStore & facts, TrajectoryLog & log, std::size_t l1_hit_threshold = 3)
        : model_(std::move(model)), facts_(facts), log_(log), l1_threshold_(l1_hit_threshold) {}

    /// Processes `pending` front to back, popping each finished trace.
    CurationReport run(std::deque<Trace> & pending, const std::atomic<bool> & cancel, const Hooks & hooks = {}) {
        CurationReport rep;
        while (!pending.empty()) {
            if (cancel.load(std::memory_order_acquire)) {
                rep.preempted = true;
                break;
            }
            process(pending.front(), rep);
            pending.pop_front();
            if (hooks.after_trace) hooks.after_trace(rep.processed + rep.skipped);
        }
        rep.remaining = pending.size();
        if (!rep.preempted) compile_hot(rep);
        return rep;
    }

    /// Retrieval hits reported by the foreground.
    void record_hit(std::uint64_t fact_id) { ++hits_[fact_id]; }

    const std::map<std::uint64_t, L1Blob> & blobs() const { return blobs_; }
    void drop_blob(std::uint64_t fact_id) { blobs_.erase(fact_id); }

private:
    void process(const Trace & t, CurationReport & rep) {
        if (log_.has_trace(t.id) || facts_.has_trace(t.id)) {
            ++rep.skipped;
            return;
        }
        const std::string output = model_->extract_memory(t.text);
        const auto parsed = parse_output(output);
        const TaskClass cls = parsed.json_attempted ? TaskClass::C1 : TaskClass::C2;
        const auto reward = total_reward(parsed, cls);

        std::optional<std::map<std::string, std::string>> fields;
        if (cls == TaskClass::C1 && parsed.json) {
            std::map<std::string, std::string> f;
            for (const auto & [k, v] : parsed.json->items()) f[k] = v.is_string() ? v.get<std::string>() : v.dump();
            if (!f.empty()) fields = std::move(f);
        }

        // L2 first: both writes are keyed by the trace id, so a crash between
        // them is repaired by the skip check above on the next run.
        if (fields) {
            const auto text = declarative_text(*fields);
            if (!text.empty()) {
                const bool fresh = !facts_.has_trace(t.id);
                const auto rec = facts_.insert_fact(text, *fields, t.id, t.style);
                if (fresh) {
                    ++rep.inserted;
                    rep.new_fact_ids.push_back(rec.id);
                }
            }
            ++rep.extracted;
        } else {
            ++rep.refused;
        }

        TrajectoryEntry e;
        e.trace_id = t.id;
        e.prompt = t.text;
        e.output = output;
        e.task = cls;
        e.reward = reward.total();
        e.think_branch = reward.think.branch;
        e.task_branch = reward.task.branch;
        log_.log_trajectory(std::move(e));
        ++rep.processed;
    }

    void compile_hot(CurationReport & rep) {
        for (const auto & [id, n] : hits_) {
            if (n < l1_threshold_ || blobs_.contains(id)) continue;
            const auto * r = facts_.get(id);
            if (!r) continue;
            const auto tokens = model_->tokenizer().encode(memory_line_for(*r));
            blobs_.emplace(id, compile_l1_blob(*model_, tokens, r->style_tag.value_or(""), "fact-" + std::to_string(id)));
            ++rep.compiled_blobs;
        }
    }

    ModelHandle model_;
    FactStore & facts_;
    TrajectoryLog & log_;
    std::size_t l1_threshold_;
    std::map<std::uint64_t, std::size_t> hits_;
    std::map<std::uint64_t, L1Blob> blobs_;
};

} // namespace imekit
