// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "cobo/rng.hpp"
#include "cobo/seqvae.hpp"
#include "cobo/surrogate.hpp"

namespace cobo {

inline constexpr double kTrInitSide = 0.8;
inline constexpr double kTrMinSide = 0.0078125;  // 2^-7
inline constexpr double kTrMaxSide = 1.6;
inline constexpr int kTrSuccessTol = 3;

/// Hyper-rectangular trust region. Invariants between restarts:
/// min_side <= side <= max_side, counters >= 0, at most one counter nonzero.
struct TrustRegionState {
    LatentZ center;
    double side = kTrInitSide;
    int success = 0;
    int failure = 0;
    int success_tol = kTrSuccessTol;
    int failure_tol = 4;
    double min_side = kTrMinSide;
    double max_side = kTrMaxSide;
};

/// Fresh region at `center` with failure tolerance max(4, latent_dim).
TrustRegionState make_trust_region(LatentZ center, std::size_t latent_dim);

struct TrUpdate {
    TrustRegionState state;
    bool needs_restart = false;  // side underflowed min_side; caller restarts
};

/// Pure counter/side transition: an improvement bumps the success streak and
/// clears the failure streak (and vice versa); a full streak doubles or
/// halves the side and resets its counter. When a halving lands below
/// min_side the result carries needs_restart and must not be used directly.
TrUpdate tr_update(const TrustRegionState& tr, bool improved);

/// K points in the lengthscale-shaped box: per dimension the box width is
/// side * l_d / mean(l), and coordinates are drawn center-weighted (a
/// truncated normal, sigma = width/4). Candidates never leave the box.
std::vector<LatentZ> generate_candidates(const TrustRegionState& tr, std::size_t count,
                                         const std::vector<double>& lengthscales, Rng& rng);

/// B Thompson-sampling picks over the candidate set: each pick is the argmax
/// of one joint posterior draw; a pick that repeats an earlier one is
/// re-drawn up to 10 times, then kept as a duplicate.
std::vector<LatentZ> thompson_select(const GpState& gp, const std::vector<LatentZ>& candidates,
                                     std::size_t batch, Rng& rng);

/// Re-centers on the encoder mean of the decoded incumbent: the round trip
/// through token space under the freshly retrained autoencoder. Side and
/// counters are preserved; the models are untouched.
TrustRegionState tr_recoordinate(const TrustRegionState& tr, const LatentZ& z_star,
                                 const VaeParams& vae);

}  // namespace cobo
