// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cobo/graph.hpp"
#include "cobo/rng.hpp"
#include "cobo/tasks.hpp"

namespace cobo {

using LatentZ = std::vector<double>;

/// Dense-network VAE over one-hot encoded fixed-length token sequences.
/// Encoder: flatten(T*V) -> dense(h) -> tanh -> dense(2n) (mean | logvar).
/// Decoder: n -> dense(h) -> tanh -> dense(T*V) logits.
struct VaeParams {
    std::size_t T = 0, V = 0, h = 0, n = 0;
    ad::Tensor enc_w1, enc_b1, enc_w2, enc_b2;
    ad::Tensor dec_w1, dec_b1, dec_w2, dec_b2;
};

/// logvar is clamped to this range before exponentiation.
constexpr double kLogvarClamp = 6.0;

/// Random initialization, weights scaled by 1/sqrt(fan_in).
VaeParams init_vae(std::size_t T, std::size_t V, std::size_t h, std::size_t n, Rng& rng);

/// One-hot encode a batch of sequences into a {N, T*V} tensor.
ad::Tensor one_hot(const std::vector<SequenceX>& xs, std::size_t T, std::size_t V);

/// Evaluation path (plain loops, no graph). Deterministic.
std::pair<LatentZ, std::vector<double>> encode(const VaeParams& p, const SequenceX& x);
LatentZ encode_mean(const VaeParams& p, const SequenceX& x);
std::vector<double> decode_logits(const VaeParams& p, const LatentZ& z);  // T*V flat
SequenceX decode_map(const VaeParams& p, const LatentZ& z);  // argmax, ties -> lowest index

/// z = mean + exp(logvar/2) * eps with eps ~ N(0, I) drawn from rng.
LatentZ reparameterize(const LatentZ& mean, const std::vector<double>& logvar, Rng& rng);

/// Scalar losses on the evaluation path (used by tests and analysis).
/// loss_recon: mean over positions of categorical NLL of x under z's logits.
double loss_recon(const VaeParams& p, const SequenceX& x, const LatentZ& z);
/// loss_kl: 0.5 * sum(exp(logvar) + mean^2 - 1 - logvar) against N(0, I).
double loss_kl(const LatentZ& mean, const std::vector<double>& logvar);

/// Graph-building path (training). Parameter nodes are registered with
/// names "<prefix>enc_w1" etc. so optimizers can look them up.
struct VaeNodes {
    ad::NodeId enc_w1, enc_b1, enc_w2, enc_b2;
    ad::NodeId dec_w1, dec_b1, dec_w2, dec_b2;
    std::vector<ad::NodeId> all;
};

VaeNodes add_vae_params(ad::Graph& g, const VaeParams& p, const std::string& prefix);

/// Encoder over a {N, T*V} one-hot node: returns (mean {N,n}, logvar {N,n}),
/// logvar already clamped.
std::pair<ad::NodeId, ad::NodeId> encode_nodes(ad::Graph& g, ad::NodeId xonehot,
                                               const VaeNodes& vn, std::size_t n);

/// Decoder over a {N, n} latent node: logits {N, T*V}.
ad::NodeId decode_logits_nodes(ad::Graph& g, ad::NodeId z, const VaeNodes& vn);

/// Per-sample reconstruction NLL vector {N} for a fixed batch of sequences
/// (token indices become gather indices, so the batch is structural).
ad::NodeId recon_nll_nodes(ad::Graph& g, ad::NodeId logits,
                           const std::vector<SequenceX>& xs, std::size_t T, std::size_t V);

/// Per-sample KL vector {N} against the standard normal prior.
ad::NodeId kl_nodes(ad::Graph& g, ad::NodeId mean, ad::NodeId logvar);

/// Copy current graph values of the parameter nodes back into `p`.
void read_back_params(const ad::Graph& g, const VaeNodes& vn, VaeParams& p);

/// Plain-ELBO pretraining (recon + kl_coeff * KL) with Adam; full-batch.
/// Returns (initial loss, final loss).
std::pair<double, double> pretrain_vae(VaeParams& p, const std::vector<SequenceX>& corpus,
                                       int epochs, double lr, double kl_coeff, Rng& rng);

/// Versioned little-endian binary checkpoint; round-trips bit-exactly.
void save_vae(const VaeParams& p, const std::string& path);
VaeParams load_vae(const std::string& path);

}  // namespace cobo
