#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dyad/tensor.hpp"

namespace dyad::mask {

enum class MaskKind {
    Full,
    BlockwiseLookahead,
    BlockwiseLookaheadFrames,
    BlockwiseCausal,
    FramewiseCausal,
    SlidingWindow,
    Custom,
};

const char* kind_name(MaskKind k);

// Boolean attention mask; 1 = query row may attend key column.
// Immutable after construction, freely shared across threads.
struct AttentionMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> admit;  // row-major rows*cols
    MaskKind kind = MaskKind::Custom;
    std::size_t block_size = 1;
    std::size_t look_ahead = 0;

    AttentionMask() = default;
    AttentionMask(std::size_t r, std::size_t c, MaskKind k)
        : rows(r), cols(c), admit(r * c, 0), kind(k) {}

    bool at(std::size_t i, std::size_t j) const { return admit[i * cols + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { admit[i * cols + j] = v ? 1 : 0; }

    std::size_t row_count_admitted(std::size_t i) const {
        std::size_t n = 0;
        for (std::size_t j = 0; j < cols; ++j) n += admit[i * cols + j];
        return n;
    }
    bool every_row_admits() const {
        for (std::size_t i = 0; i < rows; ++i) {
            if (row_count_admitted(i) == 0) return false;
        }
        return true;
    }
};

using MaskPtr = std::shared_ptr<const AttentionMask>;

// Blockwise look-ahead causal mask over N frames: entry (i,j) admitted iff
// floor(j/B) <= floor(i/B) + l, with l counted in blocks.
AttentionMask build_lookahead_mask(std::size_t n, std::size_t block, std::size_t look_ahead);

// Frames-granularity variant: a block may additionally attend the first
// l individual frames past its own block end.
AttentionMask build_lookahead_mask_frames(std::size_t n, std::size_t block, std::size_t look_ahead_frames);

AttentionMask build_blockwise_causal_mask(std::size_t n, std::size_t block);

AttentionMask build_framewise_causal_mask(std::size_t n);

// Conditioning window: frame i admits condition index j in [i-l, i+l),
// clipped at the sequence bounds. Exactly 2l entries away from boundaries.
AttentionMask build_sliding_window_mask(std::size_t n, std::size_t window_half);

AttentionMask build_full_mask(std::size_t rows, std::size_t cols);

// ASCII PGM (P2) rendering for doc figures, debug only.
std::string to_pgm(const AttentionMask& m);

// ---------------------------------------------------------------------------
// Causality probe: perturb inputs at positions a probe row masks out and
// demand bit-identical outputs on that row.

struct CausalityViolation {
    std::size_t row;
    std::size_t perturbed_col;
};

struct CausalityReport {
    std::vector<CausalityViolation> violations;
    std::size_t rows_checked = 0;
    std::size_t perturbations = 0;
    bool pass() const { return violations.empty(); }
};

// forward maps an N x d sequence to an N x d' sequence and must be
// deterministic. Columns are perturbed in groups of group_size (1 = per
// frame, block size = per block); for each group, every row whose mask
// excludes the whole group must keep a bit-identical output.
CausalityReport causality_probe(
    const std::function<Tensor(const Tensor&)>& forward,
    const Tensor& base_input,
    const AttentionMask& m,
    std::size_t group_size = 1,
    float delta = 0.73f);

}  // namespace dyad::mask
