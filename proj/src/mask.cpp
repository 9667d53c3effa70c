#include "dyad/mask.hpp"

#include <sstream>
#include <stdexcept>

namespace dyad::mask {

const char* kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::Full: return "full";
        case MaskKind::BlockwiseLookahead: return "blockwise-lookahead";
        case MaskKind::BlockwiseLookaheadFrames: return "blockwise-lookahead-frames";
        case MaskKind::BlockwiseCausal: return "blockwise-causal";
        case MaskKind::FramewiseCausal: return "framewise-causal";
        case MaskKind::SlidingWindow: return "sliding-window";
        case MaskKind::Custom: return "custom";
    }
    return "?";
}

AttentionMask build_lookahead_mask(std::size_t n, std::size_t block, std::size_t look_ahead) {
    if (n < 1 || block < 1) throw std::invalid_argument("lookahead mask: n and block must be >= 1");
    AttentionMask m(n, n, MaskKind::BlockwiseLookahead);
    m.block_size = block;
    m.look_ahead = look_ahead;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t limit_block = i / block + look_ahead;
        for (std::size_t j = 0; j < n; ++j) {
            m.set(i, j, j / block <= limit_block);
        }
    }
    return m;
}

AttentionMask build_lookahead_mask_frames(std::size_t n, std::size_t block, std::size_t look_ahead_frames) {
    if (n < 1 || block < 1) throw std::invalid_argument("lookahead mask: n and block must be >= 1");
    AttentionMask m(n, n, MaskKind::BlockwiseLookaheadFrames);
    m.block_size = block;
    m.look_ahead = look_ahead_frames;
    for (std::size_t i = 0; i < n; ++i) {
        // own block plus the first look_ahead_frames frames past its end
        const std::size_t limit = (i / block + 1) * block + look_ahead_frames;
        for (std::size_t j = 0; j < n; ++j) {
            m.set(i, j, j < limit);
        }
    }
    return m;
}

AttentionMask build_blockwise_causal_mask(std::size_t n, std::size_t block) {
    AttentionMask m = build_lookahead_mask(n, block, 0);
    m.kind = MaskKind::BlockwiseCausal;
    return m;
}

AttentionMask build_framewise_causal_mask(std::size_t n) {
    AttentionMask m = build_lookahead_mask(n, 1, 0);
    m.kind = MaskKind::FramewiseCausal;
    m.block_size = 1;
    return m;
}

AttentionMask build_sliding_window_mask(std::size_t n, std::size_t window_half) {
    if (n < 1 || window_half < 1) throw std::invalid_argument("sliding window mask: n, l must be >= 1");
    AttentionMask m(n, n, MaskKind::SlidingWindow);
    m.look_ahead = window_half;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= window_half ? i - window_half : 0;
        std::size_t hi = i + window_half;  // exclusive
        if (hi > n) hi = n;
        // the window [i-l, i+l) always contains i itself, so no row is empty
        for (std::size_t j = lo; j < hi; ++j) m.set(i, j, true);
    }
    return m;
}

AttentionMask build_full_mask(std::size_t rows, std::size_t cols) {
    AttentionMask m(rows, cols, MaskKind::Full);
    std::fill(m.admit.begin(), m.admit.end(), 1);
    return m;
}

std::string to_pgm(const AttentionMask& m) {
    std::ostringstream os;
    os << "P2\n" << m.cols << " " << m.rows << "\n1\n";
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            os << (m.at(i, j) ? 1 : 0);
            os << (j + 1 == m.cols ? '\n' : ' ');
        }
    }
    return os.str();
}

CausalityReport causality_probe(
    const std::function<Tensor(const Tensor&)>& forward,
    const Tensor& base_input,
    const AttentionMask& m,
    std::size_t group_size,
    float delta) {
    if (base_input.rows() != m.rows || m.rows != m.cols) {
        throw std::invalid_argument("causality_probe: square mask matching input rows required");
    }
    const Tensor base_out = forward(base_input);
    CausalityReport report;
    report.rows_checked = m.rows;

    const std::size_t d = base_input.cols();
    for (std::size_t g0 = 0; g0 < m.cols; g0 += group_size) {
        const std::size_t g1 = std::min(g0 + group_size, m.cols);
        // rows that exclude the entire group
        std::vector<std::size_t> blind_rows;
        for (std::size_t i = 0; i < m.rows; ++i) {
            bool excluded = true;
            for (std::size_t j = g0; j < g1 && excluded; ++j) excluded = !m.at(i, j);
            if (excluded) blind_rows.push_back(i);
        }
        if (blind_rows.empty()) continue;

        Tensor perturbed = base_input;
        for (std::size_t j = g0; j < g1; ++j) {
            for (std::size_t c = 0; c < d; ++c) perturbed.at(j, c) += delta;
        }
        const Tensor out = forward(perturbed);
        ++report.perturbations;
        for (std::size_t i : blind_rows) {
            for (std::size_t c = 0; c < base_out.cols(); ++c) {
                if (out.at(i, c) != base_out.at(i, c)) {
                    report.violations.push_back({i, g0});
                    break;
                }
            }
        }
    }
    return report;
}

}  // namespace dyad::mask
