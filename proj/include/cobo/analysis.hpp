// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cobo/losses.hpp"
#include "cobo/rng.hpp"

namespace cobo {

/// Moment statistics of the pairwise cloud (||z_i - z_j||_2, |y_i - y_j|).
/// `pearson` is empty when either distance set has zero variance: the
/// correlation is undefined there and is never silently reported as 0.
/// All moments use the population convention (divide by pair count).
struct CorrelationStats {
    double mu_dz = 0.0;
    double var_dz = 0.0;
    double mu_dy = 0.0;
    double var_dy = 0.0;
    std::optional<double> pearson;
    std::size_t pair_count = 0;
};

/// Pearson correlation of two equal-length samples, clamped to [-1, 1];
/// empty when either sample has zero variance or fewer than 2 elements.
std::optional<double> pearson_of(const std::vector<double>& a, const std::vector<double>& b);

/// Moments and Pearson correlation over unordered index pairs i < j.
/// When the pair count exceeds `max_pairs` (and max_pairs > 0), that many
/// pairs are drawn uniformly with replacement from `rng`; pass a dedicated
/// substream so analysis never perturbs the optimization rng stream.
/// Requires N >= 3, matching objective count, and uniform latent dims.
CorrelationStats pairwise_stats(const Batch& batch, std::size_t max_pairs, Rng& rng);

/// ((1/L)(var_dy + mu_dy^2) - L * mu_dz^2) / sqrt(var_dz * var_dy).
/// Valid whenever every pair satisfies |y_i - y_j| <= L * ||z_i - z_j||;
/// the value is returned as-is even when vacuous (below -1).
/// Throws std::invalid_argument when L <= 0 or either variance is <= 0.
double corr_lower_bound(const CorrelationStats& stats, double L);

/// Five-number summary of all pairwise latent distances.
struct ZdistSummary {
    double p10 = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double p90 = 0.0;
};

/// 10/25/50/75/90 percentiles (linear interpolation between order
/// statistics) of the N*(N-1)/2 pairwise distances. Requires N >= 2.
ZdistSummary zdist_summary(const Batch& batch);

struct Pca2dResult {
    /// Centered latents projected onto the two leading components.
    std::vector<std::array<double, 2>> points;
    /// Eigenvalue over total variance, in [0, 1]; zero for deficient ranks.
    std::array<double, 2> explained{{0.0, 0.0}};
    /// Unit loading vectors, sign-fixed; zero vectors for deficient ranks.
    std::array<std::vector<double>, 2> components;
    std::array<double, 2> eigenvalues{{0.0, 0.0}};
};

/// Projection onto the top-2 principal components of the centered latents,
/// computed by power iteration with deflation (200 iterations, tol 1e-9).
/// Components are ordered by eigenvalue and sign-fixed so the loading of
/// largest magnitude is positive. Requires N >= 3.
Pca2dResult pca2d(const Batch& batch);

/// Scalar test-function families on z ~ U[0,1] with known Lipschitz
/// constants, used to exercise the correlation bound end to end.
enum class BoundFamily { kLinear, kPiecewiseLinear, kClippedQuadratic };

std::string bound_family_name(BoundFamily family);

struct BoundExperimentConfig {
    std::vector<BoundFamily> families{BoundFamily::kLinear, BoundFamily::kPiecewiseLinear,
                                      BoundFamily::kClippedQuadratic};
    int trials_per_family = 10;
    std::size_t n_points = 450;
    std::size_t max_pairs = 100000;
    /// Multiplies the true Lipschitz constant before the bound is evaluated.
    /// Values below 1 void the premise and act as a negative control.
    double l_scale = 1.0;
    /// Slack applied to the satisfied flag: pearson + tolerance >= bound.
    double tolerance = 0.02;
    std::uint64_t seed = 0;
};

struct BoundExperimentRow {
    std::string family;
    std::uint64_t trial = 0;
    /// Tight Lipschitz constant of the sampled function.
    double lipschitz = 0.0;
    /// lipschitz * l_scale: the constant the bound was evaluated at.
    double l_used = 0.0;
    CorrelationStats stats;
    double bound = 0.0;
    bool satisfied = false;
};

struct BoundExperimentReport {
    std::vector<BoundExperimentRow> rows;
    /// Fraction of rows satisfied; vacuously 1 when there are no rows.
    double pass_rate = 1.0;
};

/// Monte Carlo check of the correlation lower bound: per trial, sample a
/// function with a computable Lipschitz constant, evaluate it on uniform
/// scalar latents, compute the empirical pair moments, and flag whether the
/// observed correlation clears the bound within `tolerance`.
BoundExperimentReport bound_experiment(const BoundExperimentConfig& cfg);

/// CSV renderings (header row + data rows, '\n' endings). An undefined
/// pearson is emitted as an empty cell so downstream plots show a gap.
std::string bound_report_csv(const BoundExperimentReport& report);
std::string pca_scatter_csv(const Pca2dResult& pca, const std::vector<double>& objectives);

}  // namespace cobo
