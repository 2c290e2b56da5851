#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "imekit/common.hpp"
#include "imekit/rng.hpp"

namespace imekit {

struct HnswParams {
    std::size_t M = 16;
    std::size_t ef_construction = 128;
    std::size_t ef_search = 64;
    std::uint64_t seed = 7;
};

struct ScoredId {
    std::uint64_t id = 0;
    float score = 0.0f; // dot product; vectors are unit norm so this is cosine similarity
};

inline float dot(std::span<const float> a, std::span<const float> b) {
    float s = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Exact top-k by full scan, ties broken by lower index. Test oracle.
inline std::vector<std::size_t> brute_force_search(std::span<const std::vector<float>> vectors,
                                                   std::span<const float> query, std::size_t k) {
    std::vector<std::pair<float, std::size_t>> all;
    all.reserve(vectors.size());
    for (std::size_t i = 0; i < vectors.size(); ++i) all.emplace_back(dot(vectors[i], query), i);
    const auto take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                      [](const auto & a, const auto & b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < take; ++i) out.push_back(all[i].second);
    return out;
}

/// Hierarchical navigable small world graph over unit vectors (cosine
/// distance = 1 - dot). Insert-only; callers filter deleted ids after search.
class HnswIndex {
public:
    explicit HnswIndex(std::size_t dim, HnswParams params = {})
        : dim_(dim), p_(params), level_mult_(1.0 / std::log(static_cast<double>(std::max<std::size_t>(params.M, 2)))),
          rng_(params.seed) {}

    std::size_t size() const { return ids_.size(); }
    std::size_t dim() const { return dim_; }
    const HnswParams & params() const { return p_; }
    int max_level() const { return max_level_; }
    std::uint64_t external_id(std::size_t node) const { return ids_[node]; }
    const std::vector<float> & vector(std::size_t node) const { return vecs_[node]; }
    std::size_t node_level(std::size_t node) const { return links_[node].size() - 1; }
    const std::vector<std::uint32_t> & neighbors(std::size_t node, std::size_t level) const { return links_[node][level]; }

    void insert(std::uint64_t id, std::span<const float> v) {
        if (v.size() != dim_) throw Error(ErrorCode::validation, "hnsw: vector dimension mismatch");
        const auto node = static_cast<std::uint32_t>(ids_.size());
        const int level = sample_level();
        ids_.push_back(id);
        vecs_.emplace_back(v.begin(), v.end());
        links_.emplace_back(static_cast<std::size_t>(level) + 1);

        if (node == 0) {
            entry_ = 0;
            max_level_ = level;
            return;
        }

        std::uint32_t ep = entry_;
        for (int l = max_level_; l > level; --l) ep = greedy(v, ep, l);
        for (int l = std::min(level, max_level_); l >= 0; --l) {
            auto cands = search_layer(v, {ep}, p_.ef_construction, l);
            const auto cap = max_degree(l);
            auto chosen = closest(cands, p_.M);
            auto & mine = links_[node][static_cast<std::size_t>(l)];
            for (const auto & c : chosen) mine.push_back(c.second);
            for (const auto & c : chosen) {
                auto & theirs = links_[c.second][static_cast<std::size_t>(l)];
                theirs.push_back(node);
                if (theirs.size() > cap) shrink(c.second, l, cap);
            }
            ep = cands.front().second;
        }
        if (level > max_level_) {
            max_level_ = level;
            entry_ = node;
        }
    }

    std::vector<ScoredId> search(std::span<const float> query, std::size_t k, std::size_t ef = 0) const {
        if (ids_.empty() || k == 0) return {};
        if (query.size() != dim_) throw Error(ErrorCode::validation, "hnsw: query dimension mismatch");
        std::uint32_t ep = entry_;
        for (int l = max_level_; l > 0; --l) ep = greedy(query, ep, l);
        auto cands = search_layer(query, {ep}, std::max(ef == 0 ? p_.ef_search : ef, k), 0);
        std::vector<ScoredId> out;
        for (std::size_t i = 0; i < std::min(k, cands.size()); ++i) {
            out.push_back({ids_[cands[i].second], 1.0f - cands[i].first});
        }
        return out;
    }

    /// Degree bounds, layer nesting and reachability from the entry point.
    bool check_invariants() const {
        for (std::size_t n = 0; n < links_.size(); ++n) {
            for (std::size_t l = 0; l < links_[n].size(); ++l) {
                if (links_[n][l].size() > max_degree(static_cast<int>(l))) return false;
                for (auto nb : links_[n][l]) {
                    if (nb >= links_.size() || links_[nb].size() <= l) return false;
                }
            }
        }
        for (int l = 0; l <= max_level_ && !links_.empty(); ++l) {
            std::unordered_set<std::uint32_t> seen{entry_};
            std::vector<std::uint32_t> stack{entry_};
            while (!stack.empty()) {
                const auto cur = stack.back();
                stack.pop_back();
                for (auto nb : links_[cur][static_cast<std::size_t>(l)]) {
                    if (seen.insert(nb).second) stack.push_back(nb);
                }
            }
            std::size_t at_level = 0;
            for (const auto & lk : links_) {
                if (lk.size() > static_cast<std::size_t>(l)) ++at_level;
            }
            if (seen.size() != at_level) return false;
        }
        return true;
    }

    // Binary layout (little-endian host order): magic "IMEHNSW1", dim, M,
    // ef_construction, ef_search, seed, count, entry, max_level, then per node
    // id, vector, level count, and per level a neighbor count + ids.
    void save(const std::string & path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(ErrorCode::io, "cannot write " + path);
        os.write(magic, 8);
        put(os, static_cast<std::uint64_t>(dim_));
        put(os, static_cast<std::uint64_t>(p_.M));
        put(os, static_cast<std::uint64_t>(p_.ef_construction));
        put(os, static_cast<std::uint64_t>(p_.ef_search));
        put(os, p_.seed);
        put(os, static_cast<std::uint64_t>(ids_.size()));
        put(os, static_cast<std::uint64_t>(entry_));
        put(os, static_cast<std::int64_t>(max_level_));
        for (std::size_t n = 0; n < ids_.size(); ++n) {
            put(os, ids_[n]);
            os.write(reinterpret_cast<const char *>(vecs_[n].data()), static_cast<std::streamsize>(dim_ * sizeof(float)));
            put(os, static_cast<std::uint64_t>(links_[n].size()));
            for (const auto & lvl : links_[n]) {
                put(os, static_cast<std::uint64_t>(lvl.size()));
                os.write(reinterpret_cast<const char *>(lvl.data()), static_cast<std::streamsize>(lvl.size() * sizeof(std::uint32_t)));
            }
        }
    }

    static HnswIndex load(const std::string & path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw Error(ErrorCode::io, "cannot read " + path);
        char m[8];
        is.read(m, 8);
        if (!is || std::string_view(m, 8) != std::string_view(magic, 8)) throw Error(ErrorCode::io, "not an hnsw index file");
        const auto dim = get<std::uint64_t>(is);
        HnswParams p;
        p.M = get<std::uint64_t>(is);
        p.ef_construction = get<std::uint64_t>(is);
        p.ef_search = get<std::uint64_t>(is);
        p.seed = get<std::uint64_t>(is);
        HnswIndex idx(dim, p);
        const auto count = get<std::uint64_t>(is);
        idx.entry_ = static_cast<std::uint32_t>(get<std::uint64_t>(is));
        idx.max_level_ = static_cast<int>(get<std::int64_t>(is));
        for (std::uint64_t n = 0; n < count; ++n) {
            idx.ids_.push_back(get<std::uint64_t>(is));
            std::vector<float> v(dim);
            is.read(reinterpret_cast<char *>(v.data()), static_cast<std::streamsize>(dim * sizeof(float)));
            idx.vecs_.push_back(std::move(v));
            std::vector<std::vector<std::uint32_t>> lk(get<std::uint64_t>(is));
            for (auto & lvl : lk) {
                lvl.resize(get<std::uint64_t>(is));
                is.read(reinterpret_cast<char *>(lvl.data()), static_cast<std::streamsize>(lvl.size() * sizeof(std::uint32_t)));
            }
            idx.links_.push_back(std::move(lk));
        }
        if (!is) throw Error(ErrorCode::io, "truncated hnsw index file");
        // Keep the level sampler in step with an index built by direct insertion.
        for (std::uint64_t n = 0; n < count; ++n) idx.sample_level();
        return idx;
    }

private:
    static constexpr char magic[9] = "IMEHNSW1";
    using Cand = std::pair<float, std::uint32_t>; // (distance, node)

    template <typename T>
    static void put(std::ostream & os, T v) {
        os.write(reinterpret_cast<const char *>(&v), sizeof(T));
    }
    template <typename T>
    static T get(std::istream & is) {
        T v{};
        is.read(reinterpret_cast<char *>(&v), sizeof(T));
        return v;
    }

    std::size_t max_degree(int level) const { return level == 0 ? 2 * p_.M : p_.M; }

    int sample_level() {
        double u = rng_.uniform();
        if (u < 1e-300) u = 1e-300;
        return static_cast<int>(std::floor(-std::log(u) * level_mult_));
    }

    float dist(std::span<const float> q, std::uint32_t node) const { return 1.0f - dot(q, vecs_[node]); }

    std::uint32_t greedy(std::span<const float> q, std::uint32_t ep, int level) const {
        float best = dist(q, ep);
        bool changed = true;
        while (changed) {
            changed = false;
            for (auto nb : links_[ep][static_cast<std::size_t>(level)]) {
                const float d = dist(q, nb);
                if (d < best) {
                    best = d;
                    ep = nb;
                    changed = true;
                }
            }
        }
        return ep;
    }

    // Beam search at one level; result sorted by ascending distance.
    std::vector<Cand> search_layer(std::span<const float> q, std::vector<std::uint32_t> eps, std::size_t ef, int level) const {
        std::unordered_set<std::uint32_t> visited(eps.begin(), eps.end());
        std::priority_queue<Cand, std::vector<Cand>, std::greater<>> frontier;
        std::priority_queue<Cand> best;
        for (auto e : eps) {
            const float d = dist(q, e);
            frontier.emplace(d, e);
            best.emplace(d, e);
        }
        while (!frontier.empty()) {
            const auto [d, cur] = frontier.top();
            if (d > best.top().first && best.size() >= ef) break;
            frontier.pop();
            for (auto nb : links_[cur][static_cast<std::size_t>(level)]) {
                if (!visited.insert(nb).second) continue;
                const float dn = dist(q, nb);
                if (best.size() < ef || dn < best.top().first) {
                    frontier.emplace(dn, nb);
                    best.emplace(dn, nb);
                    if (best.size() > ef) best.pop();
                }
            }
        }
        std::vector<Cand> out;
        while (!best.empty()) {
            out.push_back(best.top());
            best.pop();
        }
        std::reverse(out.begin(), out.end());
        return out;
    }

    static std::vector<Cand> closest(const std::vector<Cand> & sorted, std::size_t m) {
        return {sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(std::min(m, sorted.size()))};
    }

    void shrink(std::uint32_t node, int level, std::size_t cap) {
        auto & lk = links_[node][static_cast<std::size_t>(level)];
        std::vector<Cand> scored;
        for (auto nb : lk) scored.emplace_back(1.0f - dot(vecs_[node], vecs_[nb]), nb);
        std::sort(scored.begin(), scored.end());
        lk.clear();
        for (std::size_t i = 0; i < cap; ++i) lk.push_back(scored[i].second);
    }

    std::size_t dim_;
    HnswParams p_;
    double level_mult_;
    StreamRng rng_;
    std::vector<std::uint64_t> ids_;
    std::vector<std::vector<float>> vecs_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;
    std::uint32_t entry_ = 0;
    int max_level_ = -1;
};

} // namespace imekit
