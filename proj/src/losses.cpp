// SPDX-License-Identifier: Apache-2.0
#include "cobo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cobo/util.hpp"

namespace cobo {

namespace {

double pair_dist(const LatentZ& a, const LatentZ& b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double df = a[d] - b[d];
        s += df * df;
    }
    return std::max(std::sqrt(s), ad::Graph::kDistFloor);
}

}  // namespace

double lipschitz_constant(const std::vector<LatentZ>& z, const std::vector<double>& y) {
    const std::size_t N = z.size();
    if (N < 2 || y.size() != N)
        throw std::invalid_argument("lipschitz_constant: need at least two matched points");
    std::vector<double> slopes;
    slopes.reserve(N * (N - 1) / 2);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j)
            slopes.push_back(std::abs(y[i] - y[j]) / pair_dist(z[i], z[j]));
    std::sort(slopes.begin(), slopes.end());
    const std::size_t m = slopes.size();
    if (m % 2 == 1) return slopes[m / 2];
    return 0.5 * (slopes[m / 2 - 1] + slopes[m / 2]);
}

double lipschitz_constant(const Batch& batch) {
    return lipschitz_constant(batch.latents, batch.objectives);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double weight_lambda(double y, double yq, double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("weight_lambda: sigma must be positive");
    return normal_cdf((y - yq) / sigma);
}

double compute_yq(const std::vector<double>& objectives, double q) {
    return quantile(objectives, q);
}

double loss_lip_weighted(const Batch& batch, double L, const std::vector<double>& weights) {
    const std::size_t N = batch.size();
    if (N < 2) throw std::invalid_argument("loss_lip_weighted: need at least two points");
    if (weights.size() != N) throw std::invalid_argument("loss_lip_weighted: weight mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j) {
            const double slope = std::abs(batch.objectives[i] - batch.objectives[j]) /
                                 pair_dist(batch.latents[i], batch.latents[j]);
            const double hinge = std::max(0.0, slope - L);
            if (hinge > 0.0) total += std::sqrt(weights[i] * weights[j]) * hinge;
        }
    return total;
}

double chi_mean_c(std::size_t k) {
    if (k == 0) throw std::invalid_argument("chi_mean_c: k must be positive");
    const double kk = static_cast<double>(k);
    return 2.0 * std::exp(std::lgamma((kk + 1.0) / 2.0) - std::lgamma(kk / 2.0));
}

double loss_z(const Batch& batch, double c) {
    const std::size_t N = batch.size();
    if (N < 2) throw std::invalid_argument("loss_z: need at least two points");
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j)
            total += 2.0 * pair_dist(batch.latents[i], batch.latents[j]);
    // the 1/N^2 normalization counts the zero diagonal terms
    return std::abs(total / static_cast<double>(N * N) - c);
}

double loss_recon_weighted(const std::vector<double>& recon_losses,
                           const std::vector<double>& weights) {
    if (recon_losses.size() != weights.size())
        throw std::invalid_argument("loss_recon_weighted: length mismatch");
    if (recon_losses.empty()) throw std::invalid_argument("loss_recon_weighted: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < recon_losses.size(); ++i) total += weights[i] * recon_losses[i];
    return total / static_cast<double>(recon_losses.size());
}

ad::NodeId loss_lip_weighted_nodes(ad::Graph& g, ad::NodeId z, const std::vector<double>& y,
                                   ad::NodeId L_node, const std::vector<double>& weights) {
    const std::size_t N = y.size();
    ad::Tensor dy({N, N});
    ad::Tensor w({N, N});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j) {
            dy[i * N + j] = std::abs(y[i] - y[j]);
            dy[j * N + i] = dy[i * N + j];
            w[i * N + j] = std::sqrt(weights[i] * weights[j]);  // upper triangle only
        }
    ad::NodeId dist = g.pairwise_dist(z);
    ad::NodeId slope = g.div(g.constant(dy), dist);
    ad::NodeId thresh = g.scale_by(g.constant(ad::Tensor::full({N, N}, 1.0)), L_node);
    ad::NodeId hinge = g.relu(g.sub(slope, thresh));
    return g.reduce_sum(g.mul(g.constant(w), hinge));
}

ad::NodeId loss_lip_weighted_nodes(ad::Graph& g, ad::NodeId z, const std::vector<double>& y,
                                   double L, const std::vector<double>& weights) {
    return loss_lip_weighted_nodes(g, z, y, g.constant_scalar(L), weights);
}

ad::NodeId loss_z_nodes(ad::Graph& g, ad::NodeId z, double c) {
    const std::size_t N = g.value(z).shape()[0];
    ad::Tensor offdiag = ad::Tensor::full({N, N}, 1.0);
    for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
    ad::NodeId dist = g.pairwise_dist(z);
    ad::NodeId mean = g.mul_scalar(g.reduce_sum(g.mul(g.constant(offdiag), dist)),
                                   1.0 / static_cast<double>(N * N));
    return g.abs(g.add_scalar(mean, -c));
}

CoboGraphRefs build_cobo_graph(ad::Graph& g, const Batch& batch, const VaeParams& vae,
                               const GpState& gp, const LossCoefficients& coeffs,
                               const WeightingConfig& wcfg) {
    const std::size_t N = batch.size();
    if (N < 2) throw std::invalid_argument("build_cobo_graph: need at least two points");
    if (batch.sequences.size() != N || batch.objectives.size() != N)
        throw std::invalid_argument("build_cobo_graph: ragged batch");

    CoboGraphRefs r;
    r.yq = compute_yq(batch.objectives, wcfg.quantile);
    r.weights.assign(N, 1.0);
    if (wcfg.enabled)
        for (std::size_t i = 0; i < N; ++i)
            r.weights[i] = weight_lambda(batch.objectives[i], r.yq, wcfg.sigma);

    r.vae = add_vae_params(g, vae, "vae.");
    const bool sparse = gp.config.force_sparse || N > gp.config.exact_cap;
    r.gp = add_gp_params(g, gp, "gp.", sparse);
    r.params = r.vae.all;
    r.params.insert(r.params.end(), r.gp.all.begin(), r.gp.all.end());

    ad::NodeId x = g.constant(one_hot(batch.sequences, vae.T, vae.V));
    auto [mean, logvar] = encode_nodes(g, x, r.vae, vae.n);
    r.z_mean = mean;
    r.eps = g.input("eps", {N, vae.n});
    ad::NodeId z_samp = g.add(mean, g.mul(g.exp(g.mul_scalar(logvar, 0.5)), r.eps));

    r.lip_L = g.input("lip_L", {1});
    ad::NodeId lip_raw =
        loss_lip_weighted_nodes(g, mean, batch.objectives, r.lip_L, r.weights);
    ad::NodeId z_raw = loss_z_nodes(g, mean, chi_mean_c(vae.n));

    ad::NodeId logits = decode_logits_nodes(g, z_samp, r.vae);
    ad::NodeId recon_vec = recon_nll_nodes(g, logits, batch.sequences, vae.T, vae.V);
    ad::NodeId recon_raw =
        g.mul_scalar(g.reduce_sum(g.mul(g.constant(ad::Tensor({N}, r.weights)), recon_vec)),
                     1.0 / static_cast<double>(N));
    ad::NodeId kl_raw = g.reduce_mean(kl_nodes(g, mean, logvar));

    double y_mean = 0.0, y_sd = 1.0;
    std::vector<double> ys;
    standardize_y(batch.objectives, y_mean, y_sd, ys);
    ad::NodeId surr_raw = g.mul_scalar(gp_nll_nodes(g, r.gp, mean, ys, sparse),
                                       1.0 / static_cast<double>(N));

    r.lip = g.mul_scalar(lip_raw, coeffs.c_lip);
    r.z = g.mul_scalar(z_raw, coeffs.c_z);
    r.recon = g.mul_scalar(recon_raw, coeffs.c_recon);
    r.kl = g.mul_scalar(kl_raw, coeffs.c_kl);
    r.surr = g.mul_scalar(surr_raw, coeffs.c_surr);
    r.total = g.add(g.add(g.add(g.add(r.lip, r.z), r.recon), r.kl), r.surr);
    return r;
}

std::pair<double, LossBreakdown> loss_cobo(const Batch& batch, const VaeParams& vae,
                                           const GpState& gp, const LossCoefficients& coeffs,
                                           const WeightingConfig& wcfg, Rng& rng) {
    ad::Graph g;
    CoboGraphRefs r = build_cobo_graph(g, batch, vae, gp, coeffs, wcfg);
    const std::size_t N = batch.size();

    // detached threshold from the current encoder means
    std::vector<LatentZ> means(N);
    for (std::size_t i = 0; i < N; ++i) means[i] = encode_mean(vae, batch.sequences[i]);
    const double L = lipschitz_constant(means, batch.objectives);
    g.set_value(r.lip_L, ad::Tensor({1}, {L}));

    ad::Tensor eps({N, vae.n});
    for (auto& v : eps.data()) v = rng.normal();
    g.set_value(r.eps, eps);

    g.forward();
    LossBreakdown b;
    b.lip = g.value(r.lip).value();
    b.z = g.value(r.z).value();
    b.recon = g.value(r.recon).value();
    b.kl = g.value(r.kl).value();
    b.surr = g.value(r.surr).value();
    b.total = g.value(r.total).value();
    b.lipschitz_L = L;
    b.yq = r.yq;
    return {b.total, b};
}

}  // namespace cobo
