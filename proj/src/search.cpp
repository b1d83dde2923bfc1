// SPDX-License-Identifier: Apache-2.0
#include "cobo/search.hpp"

#include <algorithm>
#include <stdexcept>

namespace cobo {

TrustRegionState make_trust_region(LatentZ center, std::size_t latent_dim) {
    if (center.size() != latent_dim) throw std::invalid_argument("center dim mismatch");
    TrustRegionState tr;
    tr.center = std::move(center);
    tr.failure_tol = std::max(4, static_cast<int>(latent_dim));
    return tr;
}

TrUpdate tr_update(const TrustRegionState& tr, bool improved) {
    TrUpdate out;
    out.state = tr;
    TrustRegionState& s = out.state;
    if (improved) {
        s.success += 1;
        s.failure = 0;
    } else {
        s.failure += 1;
        s.success = 0;
    }
    if (s.success >= s.success_tol) {
        s.side = std::min(2.0 * s.side, s.max_side);
        s.success = 0;
    } else if (s.failure >= s.failure_tol) {
        s.side *= 0.5;
        s.failure = 0;
        if (s.side < s.min_side) out.needs_restart = true;
    }
    return out;
}

std::vector<LatentZ> generate_candidates(const TrustRegionState& tr, std::size_t count,
                                         const std::vector<double>& lengthscales, Rng& rng) {
    const std::size_t n = tr.center.size();
    if (count == 0) throw std::invalid_argument("generate_candidates: count must be >= 1");
    if (lengthscales.size() != n)
        throw std::invalid_argument("generate_candidates: lengthscale dim mismatch");
    double mean_ls = 0.0;
    for (double l : lengthscales) {
        if (!(l > 0.0)) throw std::invalid_argument("generate_candidates: lengthscales > 0");
        mean_ls += l;
    }
    mean_ls /= static_cast<double>(n);

    std::vector<double> half(n);
    for (std::size_t d = 0; d < n; ++d) half[d] = 0.5 * tr.side * lengthscales[d] / mean_ls;

    // Center-weighted law: each coordinate is a truncated normal with
    // sigma = quarter box width, redrawn until it lands inside the box.
    // A uniform law is corner-dominated once the dimension grows (the
    // inscribed ball carries ~1.6% of an 8-d box), which would put nearly
    // all candidates far from the local neighborhood the region tracks.
    std::vector<LatentZ> out(count, LatentZ(n));
    for (auto& cand : out)
        for (std::size_t d = 0; d < n; ++d) {
            double v = 0.0;
            for (int attempt = 0; attempt < 100; ++attempt) {
                v = rng.normal() * 0.5 * half[d];
                if (std::abs(v) <= half[d]) break;
            }
            if (std::abs(v) > half[d]) v = 0.0;
            cand[d] = tr.center[d] + v;
        }
    return out;
}

std::vector<LatentZ> thompson_select(const GpState& gp, const std::vector<LatentZ>& candidates,
                                     std::size_t batch, Rng& rng) {
    if (candidates.empty() || batch == 0 || batch > candidates.size())
        throw std::invalid_argument("thompson_select: need K >= B >= 1");
    auto draw_argmax = [&]() {
        const std::vector<double> sample = posterior_sample(gp, candidates, rng);
        return static_cast<std::size_t>(
            std::max_element(sample.begin(), sample.end()) - sample.begin());
    };
    std::vector<std::size_t> chosen;
    chosen.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t pick = draw_argmax();
        for (int attempt = 0;
             attempt < 10 && std::find(chosen.begin(), chosen.end(), pick) != chosen.end();
             ++attempt)
            pick = draw_argmax();
        chosen.push_back(pick);
    }
    std::vector<LatentZ> out;
    out.reserve(batch);
    for (std::size_t idx : chosen) out.push_back(candidates[idx]);
    return out;
}

TrustRegionState tr_recoordinate(const TrustRegionState& tr, const LatentZ& z_star,
                                 const VaeParams& vae) {
    TrustRegionState out = tr;
    out.center = encode_mean(vae, decode_map(vae, z_star));
    return out;
}

}  // namespace cobo
