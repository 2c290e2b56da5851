#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "imekit/common.hpp"
#include "imekit/rope.hpp"
#include "imekit/tokenizer.hpp"

namespace imekit {

struct KvLayout {
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;

    int d_model() const { return n_heads * head_dim; }
};

/// Instrumentation counters owned by a store; the model bumps them on every
/// forward pass so callers can count exactly how much was recomputed.
struct ComputeStats {
    std::uint64_t forward_calls = 0;
    std::uint64_t tokens_computed = 0;
    std::uint64_t logits_computed = 0;
};

/// Multi-sequence KV cache. Each cell holds one token's per-layer K/V at one
/// position and belongs to a set of sequences (bitmask, so at most 64 ids).
/// Copying a range between sequences only adds membership; K/V bytes are
/// shared until a position shift forces a private copy.
class KvStore {
public:
    using CellId = std::uint32_t;
    static constexpr Pos to_end = -1;
    static constexpr int max_sequences = 64;

    KvStore(KvLayout layout, std::size_t capacity, int n_seq_max = max_sequences, double rope_base = 10000.0)
        : layout_(layout), n_seq_max_(n_seq_max), rope_base_(rope_base), cells_(capacity),
          keys_(capacity * stride()), values_(capacity * stride()), seqs_(static_cast<std::size_t>(n_seq_max)) {
        if (n_seq_max < 2 || n_seq_max > max_sequences) {
            throw Error(ErrorCode::configuration, "n_seq_max must be in [2, 64]");
        }
        free_.reserve(capacity);
        for (std::size_t i = capacity; i-- > 0;) free_.push_back(static_cast<CellId>(i));
    }

    const KvLayout & layout() const { return layout_; }
    int n_seq_max() const { return n_seq_max_; }
    double rope_base() const { return rope_base_; }
    std::size_t capacity() const { return cells_.size(); }
    std::size_t free_cells() const { return free_.size(); }
    std::size_t live_cells() const { return cells_.size() - free_.size(); }

    ComputeStats & stats() { return stats_; }
    const ComputeStats & stats() const { return stats_; }

    /// Sorted (position -> cell) view of one sequence.
    const std::map<Pos, CellId> & view(SeqId seq) const { return seqs_[checked(seq)]; }

    std::size_t seq_length(SeqId seq) const { return view(seq).size(); }

    std::optional<Pos> seq_pos_max(SeqId seq) const {
        const auto & v = view(seq);
        if (v.empty()) return std::nullopt;
        return v.rbegin()->first;
    }

    std::optional<CellId> find(SeqId seq, Pos pos) const {
        const auto & v = view(seq);
        auto it = v.find(pos);
        if (it == v.end()) return std::nullopt;
        return it->second;
    }

    TokenSequence seq_tokens(SeqId seq) const {
        TokenSequence out;
        out.reserve(seq_length(seq));
        for (const auto & [pos, cell] : view(seq)) out.push_back(cells_[cell].token);
        return out;
    }

    Pos cell_pos(CellId c) const { return cells_[c].pos; }
    Token cell_token(CellId c) const { return cells_[c].token; }
    std::uint64_t cell_members(CellId c) const { return cells_[c].members; }

    std::span<float> key(CellId c, int layer) { return {keys_.data() + offset(c, layer), dmodel()}; }
    std::span<const float> key(CellId c, int layer) const { return {keys_.data() + offset(c, layer), dmodel()}; }
    std::span<float> value(CellId c, int layer) { return {values_.data() + offset(c, layer), dmodel()}; }
    std::span<const float> value(CellId c, int layer) const { return {values_.data() + offset(c, layer), dmodel()}; }

    /// Number of positions below `pos` present in `seq`.
    std::size_t count_below(SeqId seq, Pos pos) const {
        const auto & v = view(seq);
        return static_cast<std::size_t>(std::distance(v.begin(), v.lower_bound(pos)));
    }

    /// Allocates a fresh cell owned by `seq` at `pos`. K/V are zeroed.
    CellId emplace(SeqId seq, Pos pos, Token token) {
        auto & v = seqs_[checked(seq)];
        if (pos < 0) throw Error(ErrorCode::range, "negative position");
        if (v.contains(pos)) {
            throw Error(ErrorCode::overlap, "seq " + std::to_string(seq) + " already holds position " + std::to_string(pos));
        }
        const CellId c = allocate();
        cells_[c] = Cell{pos, token, bit(seq)};
        std::fill_n(keys_.begin() + static_cast<std::ptrdiff_t>(offset(c, 0)), stride(), 0.0f);
        std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(offset(c, 0)), stride(), 0.0f);
        v.emplace(pos, c);
        return c;
    }

    /// dst joins every src cell with position in [p0, p1). No K/V is copied.
    void seq_cp(SeqId src, SeqId dst, Pos p0, Pos p1) {
        if (src == dst) return;
        const auto & s = view(src);
        auto & d = seqs_[checked(dst)];
        const auto [first, last] = range(s, p0, p1);
        for (auto it = first; it != last; ++it) {
            auto hit = d.find(it->first);
            if (hit != d.end() && hit->second != it->second) {
                throw Error(ErrorCode::overlap, "seq_cp: dst " + std::to_string(dst) + " already holds position " +
                                                    std::to_string(it->first));
            }
        }
        for (auto it = first; it != last; ++it) {
            cells_[it->second].members |= bit(dst);
            d.emplace(it->first, it->second);
        }
    }

    /// Drops seq's membership for positions in [p0, p1); orphaned cells are freed.
    void seq_rm(SeqId seq, Pos p0, Pos p1) {
        auto & v = seqs_[checked(seq)];
        auto [first, last] = range(v, p0, p1);
        for (auto it = first; it != last; ++it) release(it->second, seq);
        v.erase(first, last);
    }

    void seq_clear(SeqId seq) { seq_rm(seq, 0, to_end); }

    /// Moves positions in [p0, p1) of `seq` by delta and phase-shifts their keys.
    /// Cells shared with other sequences are copied first so their views are untouched.
    void seq_add(SeqId seq, Pos p0, Pos p1, Pos delta) {
        if (delta == 0) return;
        auto & v = seqs_[checked(seq)];
        auto [first, last] = range(v, p0, p1);
        std::vector<std::pair<Pos, CellId>> moved(first, last);
        if (moved.empty()) return;

        std::size_t shared = 0;
        for (const auto & [pos, c] : moved) {
            if (pos + static_cast<long long>(delta) < 0) {
                throw Error(ErrorCode::range, "seq_add: shifted position would be negative");
            }
            if (std::popcount(cells_[c].members) > 1) ++shared;
        }
        for (const auto & [pos, c] : moved) {
            const Pos target = pos + delta;
            const bool moving = target >= moved.front().first && target <= moved.back().first &&
                                std::binary_search(moved.begin(), moved.end(), std::pair<Pos, CellId>{target, 0},
                                                   [](const auto & a, const auto & b) { return a.first < b.first; });
            if (!moving && v.contains(target)) {
                throw Error(ErrorCode::overlap, "seq_add: target position " + std::to_string(target) + " is occupied");
            }
        }
        if (shared > free_.size()) throw Error(ErrorCode::capacity, "seq_add: no free cells for copy-on-write");

        v.erase(first, last);
        for (auto [pos, c] : moved) {
            if (std::popcount(cells_[c].members) > 1) c = materialize(c, seq);
            cells_[c].pos = pos + delta;
            rotate_keys(c, delta);
            v.emplace(pos + delta, c);
        }
    }

    /// Like seq_cp, but positions of dst inside [p0, p1) are removed first.
    void seq_cp_overlay(SeqId src, SeqId dst, Pos p0, Pos p1) {
        if (src == dst) return;
        seq_rm(dst, p0, p1);
        seq_cp(src, dst, p0, p1);
    }

    /// True iff the positions of seq are exactly 0..len-1.
    bool pos_consecutive(SeqId seq) const {
        const auto & v = view(seq);
        if (v.empty()) return true;
        return v.begin()->first == 0 && v.rbegin()->first == static_cast<Pos>(v.size()) - 1;
    }

    /// Distinct live cells referenced by any of the given sequences.
    std::size_t unique_cells(std::span<const SeqId> seqs) const {
        std::uint64_t mask = 0;
        for (SeqId s : seqs) mask |= bit(s);
        std::size_t n = 0;
        for (std::size_t c = 0; c < cells_.size(); ++c) {
            if (cells_[c].members & mask) ++n;
        }
        return n;
    }

    /// Deterministic text rendering of every non-empty sequence.
    std::string dump() const {
        std::ostringstream os;
        for (SeqId s = 0; s < n_seq_max_; ++s) {
            const auto & v = seqs_[static_cast<std::size_t>(s)];
            if (v.empty()) continue;
            os << "seq " << s << " len=" << v.size() << ":";
            for (const auto & [pos, c] : v) os << ' ' << pos << ':' << cells_[c].token;
            os << '\n';
        }
        return os.str();
    }

private:
    struct Cell {
        Pos pos = -1;
        Token token = 0;
        std::uint64_t members = 0;
    };

    std::size_t dmodel() const { return static_cast<std::size_t>(layout_.d_model()); }
    std::size_t stride() const { return static_cast<std::size_t>(layout_.n_layers) * dmodel(); }
    std::size_t offset(CellId c, int layer) const {
        return static_cast<std::size_t>(c) * stride() + static_cast<std::size_t>(layer) * dmodel();
    }

    std::size_t checked(SeqId seq) const {
        if (seq < 0 || seq >= n_seq_max_) throw Error(ErrorCode::range, "sequence id out of range: " + std::to_string(seq));
        return static_cast<std::size_t>(seq);
    }

    static std::uint64_t bit(SeqId seq) { return std::uint64_t{1} << seq; }

    using View = std::map<Pos, CellId>;

    static std::pair<View::const_iterator, View::const_iterator> range(const View & v, Pos p0, Pos p1) {
        auto first = v.lower_bound(std::max<Pos>(p0, 0));
        auto last = p1 < 0 ? v.end() : v.lower_bound(p1);
        if (p1 >= 0 && p1 <= p0) last = first;
        return {first, last};
    }
    static std::pair<View::iterator, View::iterator> range(View & v, Pos p0, Pos p1) {
        auto first = v.lower_bound(std::max<Pos>(p0, 0));
        auto last = p1 < 0 ? v.end() : v.lower_bound(p1);
        if (p1 >= 0 && p1 <= p0) last = first;
        return {first, last};
    }

    CellId allocate() {
        if (free_.empty()) throw Error(ErrorCode::capacity, "KV cell pool exhausted");
        const CellId c = free_.back();
        free_.pop_back();
        return c;
    }

    void release(CellId c, SeqId seq) {
        auto & cell = cells_[c];
        cell.members &= ~bit(seq);
        if (cell.members == 0) {
            cell.pos = -1;
            free_.push_back(c);
        }
    }

    CellId materialize(CellId c, SeqId seq) {
        const CellId copy = allocate();
        cells_[copy] = Cell{cells_[c].pos, cells_[c].token, bit(seq)};
        std::copy_n(keys_.begin() + static_cast<std::ptrdiff_t>(offset(c, 0)), stride(),
                    keys_.begin() + static_cast<std::ptrdiff_t>(offset(copy, 0)));
        std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(offset(c, 0)), stride(),
                    values_.begin() + static_cast<std::ptrdiff_t>(offset(copy, 0)));
        cells_[c].members &= ~bit(seq);
        return copy;
    }

    void rotate_keys(CellId c, Pos delta) {
        const auto hd = static_cast<std::size_t>(layout_.head_dim);
        for (int l = 0; l < layout_.n_layers; ++l) {
            auto k = key(c, l);
            for (int h = 0; h < layout_.n_heads; ++h) {
                rope_rotate_inplace(k.subspan(static_cast<std::size_t>(h) * hd, hd), delta, rope_base_);
            }
        }
    }

    KvLayout layout_;
    int n_seq_max_;
    double rope_base_;
    std::vector<Cell> cells_;
    std::vector<float> keys_;
    std::vector<float> values_;
    std::vector<View> seqs_;
    std::vector<CellId> free_;
    ComputeStats stats_;
};

} // namespace imekit
