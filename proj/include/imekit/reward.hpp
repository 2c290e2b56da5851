#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/common.hpp"
#include "imekit/tokenizer.hpp"

namespace imekit {

/// A: direct completion, B: memory retrieval, C1: memory extraction,
/// C2: invalid-information refusal.
enum class TaskClass { A, B, C1, C2 };

inline std::string_view to_string(TaskClass c) {
    switch (c) {
        case TaskClass::A: return "A";
        case TaskClass::B: return "B";
        case TaskClass::C1: return "C1";
        case TaskClass::C2: return "C2";
    }
    return "?";
}

inline TaskClass parse_task_class(std::string_view s) {
    if (s == "A") return TaskClass::A;
    if (s == "B") return TaskClass::B;
    if (s == "C1") return TaskClass::C1;
    if (s == "C2") return TaskClass::C2;
    throw Error(ErrorCode::validation, "unknown task class '" + std::string(s) + "'");
}

enum class TagIntegrity { intact, broken };
enum class NoMemFlag { absent, pure, noisy };
enum class RetrievalFormat { none, perfect, partial, wrong };

struct PolicyOutput {
    std::string raw;
    std::optional<std::string> think;
    std::size_t think_length = 0; // code points of the trimmed think content
    TagIntegrity tags = TagIntegrity::intact;
    std::string body;             // raw minus the think block, trimmed
    bool retrieval_tag = false;
    RetrievalFormat retrieval_format = RetrievalFormat::none;
    std::optional<std::string> query;
    bool text_outside_tags = false;
    bool json_attempted = false;
    std::optional<nlohmann::json> json; // set only for a well-formed object body
    std::size_t n_fields = 0;
    NoMemFlag no_mem = NoMemFlag::absent;
};

namespace detail {

inline std::string erase_all(std::string s, std::string_view needle) {
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p)) s.erase(p, needle.size());
    return s;
}

inline std::string strip_fences(std::string_view body) {
    std::string_view s = trim(body);
    if (s.starts_with("```")) {
        const auto nl = s.find('\n');
        s = nl == std::string_view::npos ? std::string_view{} : s.substr(nl + 1);
        s = trim(s);
        if (s.ends_with("```")) s.remove_suffix(3);
    }
    return std::string(trim(s));
}

} // namespace detail

/// Total parser: every string yields a PolicyOutput; malformed pieces only set flags.
inline PolicyOutput parse_output(std::string_view raw) {
    using namespace control;
    PolicyOutput out;
    out.raw = std::string(raw);

    const auto opens = count_occurrences(raw, think_open_text);
    const auto closes = count_occurrences(raw, think_close_text);
    if (opens == 0 && closes == 0) {
        out.body = std::string(trim(raw));
    } else if (opens == 1 && closes == 1 && raw.find(think_open_text) < raw.find(think_close_text)) {
        const auto o = raw.find(think_open_text);
        const auto c = raw.find(think_close_text);
        const auto inner = raw.substr(o + think_open_text.size(), c - o - think_open_text.size());
        out.think = std::string(trim(inner));
        out.think_length = utf8_length(*out.think);
        std::string rest(raw.substr(0, o));
        rest.append(raw.substr(c + think_close_text.size()));
        out.body = std::string(trim(rest));
    } else {
        out.tags = TagIntegrity::broken;
        out.body = std::string(trim(detail::erase_all(detail::erase_all(std::string(raw), think_open_text), think_close_text)));
    }

    const std::string_view body = out.body;
    const auto mo = count_occurrences(body, mem_open_text);
    const auto mc = count_occurrences(body, mem_close_text);
    out.retrieval_tag = mo > 0 || mc > 0;
    if (mo == 1 && mc == 1 && body.find(mem_open_text) < body.find(mem_close_text)) {
        const auto o = body.find(mem_open_text);
        const auto c = body.find(mem_close_text);
        out.retrieval_format = RetrievalFormat::perfect;
        out.query = std::string(trim(body.substr(o + mem_open_text.size(), c - o - mem_open_text.size())));
        std::string outside(body.substr(0, o));
        outside.append(body.substr(c + mem_close_text.size()));
        out.text_outside_tags = !trim(outside).empty();
    } else if (mo >= 1) {
        const auto o = body.find(mem_open_text);
        auto after = body.substr(o + mem_open_text.size());
        const auto c = after.find(mem_close_text);
        std::string q(after.substr(0, c));
        q = std::string(trim(detail::erase_all(detail::erase_all(q, mem_open_text), mem_close_text)));
        out.query = q;
        out.retrieval_format = q.empty() ? RetrievalFormat::wrong : RetrievalFormat::partial;
        std::string outside(body.substr(0, o));
        if (c != std::string_view::npos) outside.append(after.substr(c + mem_close_text.size()));
        outside = detail::erase_all(detail::erase_all(outside, mem_open_text), mem_close_text);
        out.text_outside_tags = !trim(outside).empty();
    } else if (mc >= 1) {
        out.retrieval_format = RetrievalFormat::wrong;
        out.text_outside_tags = !trim(detail::erase_all(std::string(body), mem_close_text)).empty();
    } else {
        out.text_outside_tags = !body.empty();
    }
    if (out.query && out.query->empty()) out.query.reset();

    out.json_attempted = body.find('{') != std::string_view::npos;
    const auto candidate = detail::strip_fences(body);
    if (candidate.starts_with('{')) {
        auto j = nlohmann::json::parse(candidate, nullptr, false);
        if (!j.is_discarded() && j.is_object()) {
            out.n_fields = j.size();
            out.json = std::move(j);
        }
    }

    if (trim(body) == no_mem_text) {
        out.no_mem = NoMemFlag::pure;
    } else if (body.find(no_mem_text) != std::string_view::npos) {
        out.no_mem = NoMemFlag::noisy;
    }
    return out;
}

/// One reward term in tenths of a point, so sums and comparisons are exact.
struct RewardTerm {
    int tenths = 0;
    std::string branch;

    double value() const { return tenths / 10.0; }
};

struct RewardBreakdown {
    RewardTerm think;
    RewardTerm task;

    double r_think() const { return think.value(); }
    double r_task() const { return task.value(); }
    double total() const { return (think.tenths + task.tenths) / 10.0; }

    nlohmann::json to_json() const {
        return {{"r_think", r_think()}, {"r_task", r_task()}, {"total", total()},
                {"think_branch", think.branch}, {"task_branch", task.branch}};
    }
};

/// Cases are tested in order; the first that holds wins.
inline RewardTerm r_think(const PolicyOutput & out) {
    if (out.think && out.tags == TagIntegrity::intact && out.think_length > 0 && out.think_length <= 300) {
        return {2, "valid_think"};
    }
    if (out.think_length > 300 || out.body.empty()) return {-2, "overlong_think_or_no_body"};
    if (out.tags == TagIntegrity::broken) return {-5, "broken_tags"};
    return {0, "otherwise"};
}

/// Quality penalty for direct completions, in tenths, clamped to [0, 1.5]:
/// 1.5 for an empty body, 0.5 for more than 32 words, 0.5 when any word
/// trigram occurs three or more times.
inline int quality_penalty_tenths(std::string_view body) {
    std::vector<std::string> words;
    std::istringstream is{std::string(body)};
    for (std::string w; is >> w;) words.push_back(w);
    int p = 0;
    if (trim(body).empty()) p += 15;
    if (words.size() > 32) p += 5;
    std::map<std::string, int> grams;
    for (std::size_t i = 0; i + 3 <= words.size(); ++i) {
        if (++grams[words[i] + '\x1f' + words[i + 1] + '\x1f' + words[i + 2]] >= 3) {
            p += 5;
            break;
        }
    }
    return std::clamp(p, 0, 15);
}

inline RewardTerm r_task(const PolicyOutput & out, TaskClass cls) {
    switch (cls) {
        case TaskClass::A:
            if (out.retrieval_tag) return {-15, "retrieval_emitted"};
            return {15 - quality_penalty_tenths(out.body), "completion"};
        case TaskClass::B: {
            int fmt = -10;
            std::string label = "format_wrong";
            if (out.retrieval_format == RetrievalFormat::perfect) {
                fmt = 25;
                label = "format_perfect";
            } else if (out.retrieval_format == RetrievalFormat::partial) {
                fmt = 3;
                label = "format_partial";
            }
            const int q = out.query ? 5 : 0;
            const int stray = out.text_outside_tags ? -10 : 0;
            if (q) label += "+query";
            if (stray) label += "+stray_text";
            return {fmt + q + stray, label};
        }
        case TaskClass::C1:
            if (out.no_mem == NoMemFlag::pure) return {-15, "pure_no_mem"};
            if (!out.json) return {-10, "invalid_json"};
            return {15 + 2 * static_cast<int>(out.n_fields), "valid_json"};
        case TaskClass::C2:
            if (out.no_mem == NoMemFlag::pure) return {15, "pure_no_mem"};
            if (out.json_attempted) return {-10, "json_generated"};
            if (out.no_mem == NoMemFlag::noisy) return {0, "noisy_no_mem"};
            return {0, "other"};
    }
    return {0, "other"};
}

inline RewardBreakdown total_reward(const PolicyOutput & out, TaskClass cls) {
    return {r_think(out), r_task(out, cls)};
}

/// (r - mean) / population std; all zeros for a degenerate group.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
    std::vector<double> out(rewards.size(), 0.0);
    if (rewards.empty()) return out;
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
    if (sd < 1e-8) return out;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
    return out;
}

/// Scores one line-delimited record {"class": "...", "output": "..."}.
inline nlohmann::json score_record(const nlohmann::json & rec) {
    const auto cls = parse_task_class(rec.at("class").get<std::string>());
    const auto out = parse_output(rec.at("output").get<std::string>());
    auto j = total_reward(out, cls).to_json();
    j["class"] = std::string(to_string(cls));
    return j;
}

} // namespace imekit
