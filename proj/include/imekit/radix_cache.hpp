#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "imekit/kv_store.hpp"
#include "imekit/model.hpp"

namespace imekit {

struct RadixMetrics {
    std::size_t nodes = 0;
    std::size_t bound_sequences = 0;
    std::size_t estimated_bytes = 0;
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
};

/// Documented KV byte estimate: cells x layers x 2 (K and V) x d_model x 4 bytes.
inline std::size_t kv_bytes_estimate(std::size_t cells, const KvLayout & layout) {
    return cells * static_cast<std::size_t>(layout.n_layers) * 2u * static_cast<std::size_t>(layout.d_model()) * 4u;
}

/// Compressed prefix tree over token sequences. Each bound node owns one KV
/// sequence (taken from a fixed pool of sequence ids) holding exactly the
/// prefix it spells at positions 0..len-1. Leaves are always bound, so every
/// node has a bound descendant whose sequence contains that node's prefix.
class RadixCache {
public:
    using NodeId = std::uint32_t;
    static constexpr NodeId root_id = 0;

    struct Node {
        TokenSequence edge;
        std::map<Token, NodeId> children;
        NodeId parent = root_id;
        std::size_t depth = 0; // prefix length at the end of the edge
        std::optional<SeqId> seq;
        std::uint64_t last_access = 0;
        bool pinned = false;
        bool alive = false;
    };

    struct Match {
        NodeId node = root_id;
        std::size_t matched_len = 0;
        std::optional<SeqId> source;
        NodeId source_node = root_id;
    };

    struct ResumeInfo {
        std::size_t matched_len = 0;
        std::size_t computed_tokens = 0;
        NodeId node = root_id;
    };

    explicit RadixCache(std::vector<SeqId> seq_pool) : pool_(std::move(seq_pool)) {
        std::reverse(pool_.begin(), pool_.end());
        nodes_.push_back(Node{});
        nodes_[root_id].alive = true;
    }

    const Node & node(NodeId id) const { return nodes_.at(id); }

    /// Longest prefix of `tokens` shared with any cached sequence, plus a bound
    /// sequence that contains it.
    Match match_longest_prefix(std::span<const Token> tokens) const {
        Match m;
        NodeId cur = root_id;
        std::size_t i = 0;
        while (i < tokens.size()) {
            const auto & n = nodes_[cur];
            auto it = n.children.find(tokens[i]);
            if (it == n.children.end()) break;
            const auto & child = nodes_[it->second];
            std::size_t k = 0;
            while (k < child.edge.size() && i + k < tokens.size() && child.edge[k] == tokens[i + k]) ++k;
            i += k;
            cur = it->second;
            if (k < child.edge.size()) break;
        }
        m.node = cur;
        m.matched_len = i;
        if (i > 0) {
            m.source_node = bound_descendant(cur);
            m.source = nodes_[m.source_node].seq;
        }
        if (!m.source) m.matched_len = 0;
        return m;
    }

    /// Binds `seq` (a pool sequence holding exactly `tokens`) at the node
    /// spelling `tokens`, splitting edges as needed. If that node is already
    /// bound, the new sequence is released back to the pool.
    NodeId insert(KvStore & kv, std::span<const Token> tokens, SeqId seq) {
        if (tokens.empty()) throw Error(ErrorCode::validation, "cannot insert an empty prefix");
        NodeId cur = root_id;
        std::size_t i = 0;
        while (i < tokens.size()) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) {
                cur = add_child(cur, TokenSequence(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.end()));
                i = tokens.size();
                break;
            }
            const NodeId child = it->second;
            const auto & edge = nodes_[child].edge;
            std::size_t k = 0;
            while (k < edge.size() && i + k < tokens.size() && edge[k] == tokens[i + k]) ++k;
            if (k < edge.size()) {
                cur = split(child, k);
            } else {
                cur = child;
            }
            i += k;
        }
        auto & n = nodes_[cur];
        if (n.seq && *n.seq != seq) {
            release_seq(kv, seq);
        } else {
            n.seq = seq;
        }
        touch(cur);
        return cur;
    }

    std::optional<NodeId> find_exact(std::span<const Token> tokens) const {
        NodeId cur = root_id;
        std::size_t i = 0;
        while (i < tokens.size()) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) return std::nullopt;
            const auto & edge = nodes_[it->second].edge;
            if (tokens.size() - i < edge.size() || !std::equal(edge.begin(), edge.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
                return std::nullopt;
            }
            i += edge.size();
            cur = it->second;
        }
        return cur == root_id ? std::nullopt : std::optional<NodeId>(cur);
    }

    void pin(NodeId id) { nodes_.at(id).pinned = true; }
    void unpin(NodeId id) {
        if (id < nodes_.size()) nodes_[id].pinned = false;
    }

    /// Takes a free pool sequence, evicting the least recently used binding
    /// when the pool is empty.
    SeqId acquire_seq(KvStore & kv) {
        if (pool_.empty() && !evict_one(kv)) {
            throw Error(ErrorCode::capacity, "radix cache: every cached sequence is pinned");
        }
        const SeqId s = pool_.back();
        pool_.pop_back();
        kv.seq_clear(s);
        return s;
    }

    /// Frees least-recently-accessed unpinned bindings until the estimate is
    /// within budget. Returns the number of bytes released.
    std::size_t evict(KvStore & kv, std::size_t byte_budget) {
        const std::size_t start = estimated_bytes(kv);
        while (estimated_bytes(kv) > byte_budget) {
            if (!evict_one(kv)) break;
        }
        return start - std::min(start, estimated_bytes(kv));
    }

    /// Evicts until the store has at least `cells` free cells.
    void ensure_free_cells(KvStore & kv, std::size_t cells) {
        while (kv.free_cells() < cells) {
            if (!evict_one(kv)) throw Error(ErrorCode::capacity, "KV pool exhausted and nothing evictable");
        }
    }

    bool evict_one(KvStore & kv) {
        NodeId victim = root_id;
        std::uint64_t oldest = std::numeric_limits<std::uint64_t>::max();
        for (NodeId id = 1; id < nodes_.size(); ++id) {
            const auto & n = nodes_[id];
            if (n.alive && n.seq && !n.pinned && n.last_access < oldest) {
                oldest = n.last_access;
                victim = id;
            }
        }
        if (victim == root_id) return false;
        release_seq(kv, *nodes_[victim].seq);
        nodes_[victim].seq.reset();
        prune(victim);
        return true;
    }

    /// Recomputes only the part of `tokens` not covered by the cache and leaves
    /// the full context in `target` (cleared first). An exact hit recomputes the
    /// last token so fresh logits are available. With cache_result the context
    /// is bound in the tree afterwards.
    Logits resume_prefill(const LanguageModel & model, KvStore & kv, std::span<const Token> tokens, SeqId target,
                          ResumeInfo * info = nullptr, bool cache_result = true) {
        if (tokens.empty()) throw Error(ErrorCode::validation, "resume_prefill of an empty context");
        kv.seq_clear(target);
        const auto m = match_longest_prefix(tokens);
        const std::size_t reuse = std::min(m.matched_len, tokens.size() - 1);
        if (m.matched_len > 0) {
            ++hits_;
            kv.seq_cp(*m.source, target, 0, static_cast<Pos>(reuse));
            touch(m.source_node);
        } else {
            ++misses_;
        }
        const auto rest = tokens.subspan(reuse);
        ensure_free_cells(kv, rest.size());
        Logits logits = model.prefill(kv, rest, target, static_cast<Pos>(reuse));

        ResumeInfo ri;
        ri.matched_len = m.matched_len;
        ri.computed_tokens = rest.size();
        if (cache_result) {
            if (auto exact = find_exact(tokens); exact && nodes_[*exact].seq) {
                touch(*exact);
                ri.node = *exact;
            } else {
                const SeqId s = acquire_seq(kv);
                kv.seq_cp(target, s, 0, KvStore::to_end);
                ri.node = insert(kv, tokens, s);
            }
        }
        if (info) *info = ri;
        return logits;
    }

    std::vector<SeqId> bound_sequences() const {
        std::vector<SeqId> out;
        for (const auto & n : nodes_) {
            if (n.alive && n.seq) out.push_back(*n.seq);
        }
        return out;
    }

    std::size_t estimated_bytes(const KvStore & kv) const {
        const auto seqs = bound_sequences();
        return kv_bytes_estimate(kv.unique_cells(seqs), kv.layout());
    }

    RadixMetrics metrics(const KvStore & kv) const {
        RadixMetrics m;
        for (NodeId id = 1; id < nodes_.size(); ++id) {
            if (nodes_[id].alive) ++m.nodes;
        }
        m.bound_sequences = bound_sequences().size();
        m.estimated_bytes = estimated_bytes(kv);
        m.hits = hits_;
        m.misses = misses_;
        return m;
    }

    /// All prefixes currently bound, for tests and debugging.
    std::vector<TokenSequence> bound_prefixes() const {
        std::vector<TokenSequence> out;
        for (NodeId id = 1; id < nodes_.size(); ++id) {
            if (nodes_[id].alive && nodes_[id].seq) out.push_back(spell(id));
        }
        return out;
    }

    TokenSequence spell(NodeId id) const {
        std::vector<NodeId> chain;
        for (NodeId cur = id; cur != root_id; cur = nodes_[cur].parent) chain.push_back(cur);
        TokenSequence out;
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
            const auto & e = nodes_[*it].edge;
            out.insert(out.end(), e.begin(), e.end());
        }
        return out;
    }

    /// Structural invariants; returns false on the first violation.
    bool check_invariants(const KvStore & kv) const {
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            const auto & n = nodes_[id];
            if (!n.alive) continue;
            if (id != root_id && n.edge.empty()) return false;
            if (id != root_id && n.children.empty() && !n.seq) return false;
            for (const auto & [first, child] : n.children) {
                const auto & c = nodes_[child];
                if (!c.alive || c.parent != id || c.edge.empty() || c.edge.front() != first) return false;
                if (c.depth != n.depth + c.edge.size()) return false;
            }
            if (n.seq) {
                const auto spelled = spell(id);
                if (kv.seq_tokens(*n.seq) != spelled || !kv.pos_consecutive(*n.seq)) return false;
            }
        }
        return true;
    }

private:
    NodeId new_node() {
        if (!free_nodes_.empty()) {
            const NodeId id = free_nodes_.back();
            free_nodes_.pop_back();
            nodes_[id] = Node{};
            nodes_[id].alive = true;
            return id;
        }
        nodes_.push_back(Node{});
        nodes_.back().alive = true;
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId add_child(NodeId parent, TokenSequence edge) {
        const NodeId id = new_node();
        auto & n = nodes_[id];
        n.edge = std::move(edge);
        n.parent = parent;
        n.depth = nodes_[parent].depth + n.edge.size();
        nodes_[parent].children[n.edge.front()] = id;
        return id;
    }

    // Splits `child`'s edge after k tokens; returns the new upper node.
    NodeId split(NodeId child, std::size_t k) {
        const NodeId parent = nodes_[child].parent;
        const NodeId mid = new_node();
        auto & c = nodes_[child];
        auto & m = nodes_[mid];
        m.edge.assign(c.edge.begin(), c.edge.begin() + static_cast<std::ptrdiff_t>(k));
        m.parent = parent;
        m.depth = nodes_[parent].depth + k;
        c.edge.erase(c.edge.begin(), c.edge.begin() + static_cast<std::ptrdiff_t>(k));
        c.parent = mid;
        m.children[c.edge.front()] = child;
        nodes_[parent].children[m.edge.front()] = mid;
        return mid;
    }

    NodeId bound_descendant(NodeId id) const {
        NodeId cur = id;
        while (!nodes_[cur].seq) {
            const auto & ch = nodes_[cur].children;
            if (ch.empty()) return root_id;
            cur = ch.begin()->second;
        }
        return cur;
    }

    void touch(NodeId id) { nodes_[id].last_access = ++clock_; }

    void release_seq(KvStore & kv, SeqId s) {
        kv.seq_clear(s);
        pool_.push_back(s);
    }

    void remove_node(NodeId id) {
        auto & n = nodes_[id];
        nodes_[n.parent].children.erase(n.edge.front());
        n = Node{};
        free_nodes_.push_back(id);
    }

    // Restores "leaves are bound" and "no unbound single-child chains".
    void prune(NodeId id) {
        while (id != root_id) {
            auto & n = nodes_[id];
            if (n.seq) return;
            const NodeId parent = n.parent;
            if (n.children.empty()) {
                remove_node(id);
                id = parent;
                continue;
            }
            if (n.children.size() == 1) {
                const NodeId child = n.children.begin()->second;
                auto & c = nodes_[child];
                TokenSequence edge = n.edge;
                edge.insert(edge.end(), c.edge.begin(), c.edge.end());
                c.edge = std::move(edge);
                c.parent = parent;
                nodes_[parent].children[c.edge.front()] = child;
                n = Node{};
                free_nodes_.push_back(id);
            }
            return;
        }
    }

    std::vector<Node> nodes_;
    std::vector<NodeId> free_nodes_;
    std::vector<SeqId> pool_;
    std::uint64_t clock_ = 0;
    std::uint64_t hits_ = 0;
    std::uint64_t misses_ = 0;
};

} // namespace imekit
