// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cobo/rng.hpp"

namespace cobo {

struct Vocab {
    std::vector<std::string> tokens;
    std::size_t pad_index = 0;

    std::size_t size() const { return tokens.size(); }
};

/// Fixed-length token-index sequence; every index < |V|.
using SequenceX = std::vector<std::size_t>;

/// Black-box objective over discrete sequences. Oracles are pure and always
/// return finite values; invalid inputs map to a documented penalty score.
struct Task {
    std::string id;
    Vocab vocab;
    std::size_t T = 0;
    bool maximize = true;
    std::function<double(const SequenceX&)> oracle;
    std::function<std::vector<SequenceX>(std::size_t size, Rng& rng)> corpus;
};

/// Symbolic-expression fitting: minimize log(1 + MSE) against the target
/// 1/3 + x + sin(x*x) on the grid x in {-2.0, -1.9, ..., 2.0}. Sequences
/// that fail to parse (or evaluate non-finitely) score the penalty 10.0.
Task make_arith_task();

/// Two-bump smooth objective over 20-bit strings, maximized at a hidden
/// pattern derived from task_seed.
Task make_bitstring_task(std::uint64_t task_seed);

/// Registry by string id: "arith" | "bitstring". Throws on unknown ids.
Task make_task(const std::string& id, std::uint64_t task_seed);

/// Exposed for tests: parse + evaluate one arith token sequence on one x.
/// Returns false when the sequence is malformed.
bool arith_eval(const SequenceX& x, double at, double* out);

/// Exposed for tests: the hidden bitstring patterns for a given seed.
void bitstring_patterns(std::uint64_t task_seed, std::vector<int>& primary,
                        std::vector<int>& secondary);

constexpr double kArithPenalty = 10.0;

}  // namespace cobo
