// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "cobo/graph.hpp"
#include "cobo/seqvae.hpp"
#include "cobo/surrogate.hpp"

namespace cobo {

/// Training batch for the pairwise losses: latents, objectives, sequences.
struct Batch {
    std::vector<LatentZ> latents;
    std::vector<double> objectives;
    std::vector<SequenceX> sequences;

    std::size_t size() const { return latents.size(); }
};

struct WeightingConfig {
    double quantile = 0.95;
    double sigma = 0.1;
    /// When false every lambda_i is 1: the Lipschitz pairs and the
    /// reconstruction term fall back to their unweighted forms (the
    /// weighting ablation). yq is still reported for logging.
    bool enabled = true;
};

struct LossCoefficients {
    double c_lip = 10.0;
    double c_z = 0.1;
    double c_recon = 1.0;
    double c_kl = 0.1;
    double c_surr = 1.0;
};

/// Median of all unordered pairwise slopes |y_i - y_j| / ||z_i - z_j||_2,
/// with distances clamped below before division. Even-count median is the
/// mean of the two middle values. Treated as a constant during training.
double lipschitz_constant(const Batch& batch);
double lipschitz_constant(const std::vector<LatentZ>& z, const std::vector<double>& y);

/// lambda(y) = P(Y > yq) for Y ~ N(y, sigma^2) = Phi((y - yq) / sigma).
double weight_lambda(double y, double yq, double sigma);

/// Standard normal CDF (kept public: tests compare against an erf oracle).
double normal_cdf(double x);

/// Empirical q-quantile of the batch objectives (linear interpolation).
double compute_yq(const std::vector<double>& objectives, double q);

/// sum_{i<j} sqrt(lambda_i lambda_j) * max(0, |y_i-y_j| / ||z_i-z_j|| - L).
double loss_lip_weighted(const Batch& batch, double L, const std::vector<double>& weights);

/// c = 2 * Gamma((k+1)/2) / Gamma(k/2): the expected distance between two
/// independent standard normal k-vectors, evaluated via log-gamma.
double chi_mean_c(std::size_t k);

/// | (1/N^2) * sum_{i,j<=N} ||z_i - z_j|| - c | with the zero diagonal
/// included in the normalization exactly as the sum is written.
double loss_z(const Batch& batch, double c);

/// Mean over the batch of lambda_i * recon_i.
double loss_recon_weighted(const std::vector<double>& recon_losses,
                           const std::vector<double>& weights);

/// Graph builders used by the joint training loss. The pair weight matrix
/// (sqrt(lambda_i lambda_j) on i<j, zero elsewhere) and the slope targets
/// |y_i - y_j| are constants of the current step. The slope threshold is a
/// node so a training loop can rebind the detached L every step.
ad::NodeId loss_lip_weighted_nodes(ad::Graph& g, ad::NodeId z, const std::vector<double>& y,
                                   ad::NodeId L_node, const std::vector<double>& weights);
ad::NodeId loss_lip_weighted_nodes(ad::Graph& g, ad::NodeId z, const std::vector<double>& y,
                                   double L, const std::vector<double>& weights);
ad::NodeId loss_z_nodes(ad::Graph& g, ad::NodeId z, double c);

struct LossBreakdown {
    double lip = 0.0;      // c_lip * L_Lip_W
    double z = 0.0;        // c_z * L_z
    double recon = 0.0;    // c_recon * L_recon_W
    double kl = 0.0;       // c_kl * L_KL
    double surr = 0.0;     // c_surr * L_surr (per-point GP NLL)
    double total = 0.0;
    double lipschitz_L = 0.0;
    double yq = 0.0;
};

/// Handles into the joint objective graph. Pairwise terms and the surrogate
/// NLL read the encoder means; reconstruction reads the sampled z, so `eps`
/// must be bound (shape {N, n}) before forward(). `lip_L` is the detached
/// slope threshold input (shape {1}); rebind it as the latents move.
struct CoboGraphRefs {
    VaeNodes vae;
    GpNodes gp;
    ad::NodeId eps = -1;
    ad::NodeId lip_L = -1;
    ad::NodeId z_mean = -1;
    ad::NodeId lip = -1, z = -1, recon = -1, kl = -1, surr = -1;  // weighted terms
    ad::NodeId total = -1;
    std::vector<ad::NodeId> params;  // VAE then GP parameter nodes
    double yq = 0.0;
    std::vector<double> weights;  // lambda(y_i)
};

/// Builds the full joint objective over the batch sequences: weighted
/// Lipschitz + latent-distance + weighted reconstruction + KL + surrogate
/// NLL (per point), each scaled by its coefficient. Objective-derived
/// weights and the GP's y standardization are baked as constants.
CoboGraphRefs build_cobo_graph(ad::Graph& g, const Batch& batch, const VaeParams& vae,
                               const GpState& gp, const LossCoefficients& coeffs,
                               const WeightingConfig& wcfg);

/// One evaluation of the joint objective: draws one eps per point, computes
/// the detached L from the current encoder means, runs the graph forward.
std::pair<double, LossBreakdown> loss_cobo(const Batch& batch, const VaeParams& vae,
                                           const GpState& gp, const LossCoefficients& coeffs,
                                           const WeightingConfig& wcfg, Rng& rng);

}  // namespace cobo
