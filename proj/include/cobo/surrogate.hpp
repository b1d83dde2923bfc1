// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cobo/graph.hpp"
#include "cobo/rng.hpp"

namespace cobo {

using LatentZ = std::vector<double>;

/// RBF kernel hyperparameters, stored on the log scale so gradient steps
/// keep the exponentiated values strictly positive.
struct KernelParams {
    ad::Tensor log_ls;  // {d_f} per-dimension log lengthscales
    double log_sv = 0.0;
    double log_nv = 0.0;
};

/// Feature extractor dense(n) -> tanh -> dense(d_f), row-vector convention.
struct DklParams {
    std::size_t in_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t out_dim = 0;
    ad::Tensor w1, b1, w2, b2;
};

struct GpConfig {
    std::size_t hidden_dim = 32;
    std::size_t feature_dim = 8;
    std::size_t max_inducing = 64;
    std::size_t exact_cap = 512;  // exact GP at or below this N
    bool force_sparse = false;
    bool identity_features = false;  // skip the feature net: features == latents
};

/// Conditioning cache; filled by gp_condition / fit_surrogate. All matrices
/// refer to standardized objective values.
struct GpCache {
    bool valid = false;
    bool sparse = false;
    ad::Tensor train_features;  // {N, d_f}
    double y_mean = 0.0;
    double y_sd = 1.0;
    ad::Tensor chol;     // exact: L of K_nn + nv I {N,N}; sparse: L of A {M,M}
    ad::Tensor chol_mm;  // sparse only: L of K_mm (jittered) {M,M}
    ad::Tensor alpha;    // exact: (K_nn + nv I)^-1 y {N}; sparse: nv^-1 A^-1 K_mn y {M}
};

/// Immutable once fitted: posterior queries never mutate the state.
struct GpState {
    GpConfig config;
    KernelParams kernel;
    DklParams dkl;
    ad::Tensor inducing;  // {M, d_f}, empty until a sparse fit initializes it
    GpCache cache;
    std::vector<double> last_nll_trace;  // accepted objective per fit step

    std::size_t feature_dim() const {
        return config.identity_features ? static_cast<std::size_t>(kernel.log_ls.numel())
                                        : dkl.out_dim;
    }
};

struct GpTrain {
    std::vector<LatentZ> latents;
    std::vector<double> objectives;
    std::size_t size() const { return latents.size(); }
};

GpState init_gp(std::size_t latent_dim, const GpConfig& config, Rng& rng);

/// Versioned little-endian binary checkpoint of config + hyperparameters +
/// inducing points (the cache is rebuilt on load via gp_condition).
/// Round-trips bit-exactly.
void save_gp(const GpState& state, const std::string& path);
GpState load_gp(const std::string& path);

/// sigma_f^2 * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)
double rbf_kernel(const std::vector<double>& a, const std::vector<double>& b,
                  const KernelParams& kp);

/// Applies the feature net (or the identity map) to a batch of latents.
ad::Tensor dkl_features(const GpState& state, const std::vector<LatentZ>& latents);

/// Standardizes objectives against their own mean/std (std floor: constant
/// vectors standardize with sd 1).
void standardize_y(const std::vector<double>& y, double& mean, double& sd,
                   std::vector<double>& out);

/// Rebuilds the conditioning cache (factorizations, standardization) for the
/// current hyperparameters; sparse mode requires initialized inducing points.
GpState gp_condition(const GpState& state, const GpTrain& train);

/// Negative log marginal likelihood of the exact GP on standardized y.
double exact_gp_nll(const GpState& state, const GpTrain& train);

/// Variational inducing-point bound on the NLL (equals exact_gp_nll when the
/// inducing set coincides with the training features).
double sparse_gp_nll(const GpState& state, const GpTrain& train);

/// Posterior mean/variance of f (noise-free) in original y units.
/// Conditions on `train` internally; O(N^3) once per call.
void exact_gp_posterior(const GpState& state, const GpTrain& train,
                        const std::vector<LatentZ>& queries, std::vector<double>& mean,
                        std::vector<double>& var);

/// Posterior from a conditioned state (exact or sparse per its cache).
void gp_posterior(const GpState& state, const std::vector<LatentZ>& queries,
                  std::vector<double>& mean, std::vector<double>& var);

/// Sparse-mode posterior; requires a conditioned sparse cache.
void sparse_gp_posterior(const GpState& state, const std::vector<LatentZ>& queries,
                         std::vector<double>& mean, std::vector<double>& var);

/// One joint draw over the queries: full covariance for K <= 256, diagonal
/// beyond. Zero predictive covariance collapses to the mean vector.
std::vector<double> posterior_sample(const GpState& state,
                                     const std::vector<LatentZ>& queries, Rng& rng);

/// Full-batch gradient descent on the marginal-likelihood objective with a
/// halve-on-increase retry, so the NLL trace is non-increasing. Returns a
/// refreshed, conditioned state.
GpState fit_surrogate(const GpState& state, const GpTrain& train, std::size_t steps,
                      double lr, Rng& rng);

// --- graph builders (training path) ---

struct GpNodes {
    ad::NodeId log_ls = -1;
    ad::NodeId log_sv = -1;
    ad::NodeId log_nv = -1;
    ad::NodeId w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    ad::NodeId inducing = -1;
    bool identity_features = false;
    std::vector<ad::NodeId> all;  // registered parameter nodes, in order
};

/// Registers kernel/DKL/inducing parameters under `prefix`.
GpNodes add_gp_params(ad::Graph& g, const GpState& state, const std::string& prefix,
                      bool with_inducing);

/// {N,n} latent node -> {N,d_f} feature node.
ad::NodeId dkl_features_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId z);

/// Squared Euclidean cross-distances between row sets: {N,d} x {M,d} -> {N,M}.
ad::NodeId cross_sqdist_nodes(ad::Graph& g, ad::NodeId a, ad::NodeId b);

/// RBF kernel matrix between two feature nodes.
ad::NodeId kernel_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId fa, ad::NodeId fb);

/// Exact GP NLL of standardized targets given a feature node.
ad::NodeId exact_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId features,
                           const std::vector<double>& y_std);

/// Variational inducing-point bound given a feature node; uses nodes.inducing.
ad::NodeId sparse_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId features,
                            const std::vector<double>& y_std);

/// Total-NLL node for the state's mode (exact or sparse); shared by
/// fit_surrogate and the joint training objective.
ad::NodeId gp_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId z_latents,
                        const std::vector<double>& y_std, bool sparse);

}  // namespace cobo
