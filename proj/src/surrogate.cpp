// SPDX-License-Identifier: Apache-2.0
#include "cobo/surrogate.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cobo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const double kLog2Pi = std::log(2.0 * M_PI);

RowMat tensor_mat(const ad::Tensor& t) {
    const auto rows = static_cast<Eigen::Index>(t.shape()[0]);
    const auto cols =
        static_cast<Eigen::Index>(t.shape().size() > 1 ? t.shape()[1] : 1);
    return Eigen::Map<const RowMat>(t.data().data(), rows, cols);
}

ad::Tensor mat_tensor(const RowMat& m) {
    ad::Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<RowMat>(t.data().data(), m.rows(), m.cols()) = m;
    return t;
}

RowMat latents_mat(const std::vector<LatentZ>& latents) {
    if (latents.empty()) throw std::invalid_argument("empty latent batch");
    const auto n = latents.front().size();
    RowMat X(static_cast<Eigen::Index>(latents.size()), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < latents.size(); ++i) {
        if (latents[i].size() != n) throw std::invalid_argument("ragged latent batch");
        for (std::size_t d = 0; d < n; ++d)
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = latents[i][d];
    }
    return X;
}

// Same symmetrize-then-escalate policy as the graph's SPD ops, so the
// evaluation path and the graph path factor identical matrices.
Eigen::LLT<RowMat> llt_with_jitter(const RowMat& a, const char* what) {
    RowMat A = 0.5 * (a + RowMat(a.transpose()));
    double jitter = 0.0;
    Eigen::LLT<RowMat> llt;
    for (;;) {
        RowMat Aj = A;
        if (jitter > 0.0) Aj.diagonal().array() += jitter;
        llt.compute(Aj);
        if (llt.info() == Eigen::Success) {
            bool ok = true;
            for (Eigen::Index i = 0; i < Aj.rows(); ++i)
                if (!(llt.matrixLLT()(i, i) > 0.0)) {
                    ok = false;
                    break;
                }
            if (ok) return llt;
        }
        if (jitter == 0.0)
            jitter = 1e-8;
        else if (jitter < 1e-2)
            jitter *= 10.0;
        else
            throw ad::FactorizationError(std::string(what) +
                                         ": matrix not positive definite at max jitter 1e-2");
    }
}

double logdet_from_llt(const Eigen::LLT<RowMat>& llt) {
    double ld = 0.0;
    for (Eigen::Index i = 0; i < llt.matrixLLT().rows(); ++i)
        ld += std::log(llt.matrixLLT()(i, i));
    return 2.0 * ld;
}

RowMat features_of(const GpState& state, const RowMat& X) {
    if (state.config.identity_features) return X;
    const auto& d = state.dkl;
    if (static_cast<std::size_t>(X.cols()) != d.in_dim)
        throw std::invalid_argument("latent dim does not match the feature net");
    RowMat h = X * tensor_mat(d.w1);
    h.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(d.b1.data().data(),
                                                        static_cast<Eigen::Index>(d.hidden_dim));
    h = h.array().tanh().matrix();
    RowMat f = h * tensor_mat(d.w2);
    f.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(d.b2.data().data(),
                                                        static_cast<Eigen::Index>(d.out_dim));
    return f;
}

// K(A,B) with ARD scaling; the squared distances are clamped at zero so the
// diagonal of K(A,A) is exactly sigma_f^2.
RowMat kernel_matrix(const RowMat& A, const RowMat& B, const KernelParams& kp) {
    const auto d = A.cols();
    if (B.cols() != d || kp.log_ls.numel() != static_cast<std::size_t>(d))
        throw std::invalid_argument("kernel dimension mismatch");
    Eigen::VectorXd inv_ls(d);
    for (Eigen::Index k = 0; k < d; ++k) inv_ls(k) = std::exp(-kp.log_ls.data()[k]);
    RowMat As = A * inv_ls.asDiagonal();
    RowMat Bs = B * inv_ls.asDiagonal();
    Eigen::VectorXd an = As.rowwise().squaredNorm();
    Eigen::VectorXd bn = Bs.rowwise().squaredNorm();
    RowMat sq = (-2.0 * As * Bs.transpose());
    sq.colwise() += an;
    sq.rowwise() += bn.transpose();
    const double sv = std::exp(kp.log_sv);
    return (sq.array().max(0.0) * -0.5).exp().matrix() * sv;
}

ad::Tensor column_tensor(const std::vector<double>& v) {
    return ad::Tensor({v.size(), 1}, v);
}

// Initialization matching the VAE nets: N(0, 1/fan_in) weights, zero biases.
ad::Tensor init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
    ad::Tensor w({rows, cols});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : w.data()) v = scale * rng.normal();
    return w;
}

void validate_train(const GpTrain& train) {
    if (train.size() == 0) throw std::invalid_argument("empty training set");
    if (train.objectives.size() != train.latents.size())
        throw std::invalid_argument("latents/objectives size mismatch");
    for (double y : train.objectives)
        if (!std::isfinite(y)) throw std::invalid_argument("non-finite objective");
}

bool wants_sparse(const GpState& state, std::size_t n) {
    return state.config.force_sparse || n > state.config.exact_cap;
}

}  // namespace

GpState init_gp(std::size_t latent_dim, const GpConfig& config, Rng& rng) {
    GpState st;
    st.config = config;
    const std::size_t d_f = config.identity_features ? latent_dim : config.feature_dim;
    st.kernel.log_ls = ad::Tensor({d_f});
    st.kernel.log_sv = 0.0;
    st.kernel.log_nv = std::log(0.01);
    if (!config.identity_features) {
        st.dkl.in_dim = latent_dim;
        st.dkl.hidden_dim = config.hidden_dim;
        st.dkl.out_dim = config.feature_dim;
        st.dkl.w1 = init_weight(latent_dim, config.hidden_dim, rng);
        st.dkl.b1 = ad::Tensor({config.hidden_dim});
        st.dkl.w2 = init_weight(config.hidden_dim, config.feature_dim, rng);
        st.dkl.b2 = ad::Tensor({config.feature_dim});
    }
    return st;
}

double rbf_kernel(const std::vector<double>& a, const std::vector<double>& b,
                  const KernelParams& kp) {
    if (a.size() != b.size() || kp.log_ls.numel() != a.size())
        throw std::invalid_argument("kernel dimension mismatch");
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double r = (a[d] - b[d]) / std::exp(kp.log_ls.data()[d]);
        s += r * r;
    }
    return std::exp(kp.log_sv) * std::exp(-0.5 * s);
}

ad::Tensor dkl_features(const GpState& state, const std::vector<LatentZ>& latents) {
    return mat_tensor(features_of(state, latents_mat(latents)));
}

void standardize_y(const std::vector<double>& y, double& mean, double& sd,
                   std::vector<double>& out) {
    if (y.empty()) throw std::invalid_argument("empty objective vector");
    mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    var /= static_cast<double>(y.size());
    sd = std::sqrt(var);
    if (!(sd > 1e-12)) sd = 1.0;
    out.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = (y[i] - mean) / sd;
}

GpState gp_condition(const GpState& state, const GpTrain& train) {
    validate_train(train);
    GpState st = state;
    const std::size_t n = train.size();
    RowMat F = features_of(st, latents_mat(train.latents));

    GpCache& c = st.cache;
    c = GpCache{};
    std::vector<double> ys;
    standardize_y(train.objectives, c.y_mean, c.y_sd, ys);
    Eigen::Map<const Eigen::VectorXd> yv(ys.data(), static_cast<Eigen::Index>(n));
    c.train_features = mat_tensor(F);
    c.sparse = wants_sparse(st, n);

    const double nv = std::exp(st.kernel.log_nv);
    if (!c.sparse) {
        RowMat Kn = kernel_matrix(F, F, st.kernel);
        Kn.diagonal().array() += nv;
        auto llt = llt_with_jitter(Kn, "gp_condition");
        c.chol = mat_tensor(RowMat(llt.matrixL()));
        c.alpha = mat_tensor(llt.solve(RowMat(yv)));
    } else {
        if (st.inducing.numel() == 0)
            throw std::logic_error("sparse conditioning requires initialized inducing points");
        RowMat U = tensor_mat(st.inducing);
        RowMat Kmm = kernel_matrix(U, U, st.kernel);
        RowMat Kmn = kernel_matrix(U, F, st.kernel);
        RowMat A = Kmm + (Kmn * Kmn.transpose()) / nv;
        auto llt_a = llt_with_jitter(A, "gp_condition(A)");
        auto llt_m = llt_with_jitter(Kmm, "gp_condition(Kmm)");
        c.chol = mat_tensor(RowMat(llt_a.matrixL()));
        c.chol_mm = mat_tensor(RowMat(llt_m.matrixL()));
        c.alpha = mat_tensor(RowMat(llt_a.solve(RowMat(Kmn * yv)) / nv));
    }
    c.valid = true;
    return st;
}

double exact_gp_nll(const GpState& state, const GpTrain& train) {
    validate_train(train);
    const auto n = static_cast<Eigen::Index>(train.size());
    RowMat F = features_of(state, latents_mat(train.latents));
    double y_mean = 0.0, y_sd = 1.0;
    std::vector<double> ys;
    standardize_y(train.objectives, y_mean, y_sd, ys);
    Eigen::Map<const Eigen::VectorXd> yv(ys.data(), n);

    RowMat Kn = kernel_matrix(F, F, state.kernel);
    Kn.diagonal().array() += std::exp(state.kernel.log_nv);
    auto llt = llt_with_jitter(Kn, "exact_gp_nll");
    const double quad = yv.dot(llt.solve(RowMat(yv)).col(0));
    return 0.5 * (quad + logdet_from_llt(llt) + static_cast<double>(n) * kLog2Pi);
}

double sparse_gp_nll(const GpState& state, const GpTrain& train) {
    validate_train(train);
    if (state.inducing.numel() == 0)
        throw std::logic_error("sparse_gp_nll requires initialized inducing points");
    const auto n = static_cast<Eigen::Index>(train.size());
    RowMat F = features_of(state, latents_mat(train.latents));
    double y_mean = 0.0, y_sd = 1.0;
    std::vector<double> ys;
    standardize_y(train.objectives, y_mean, y_sd, ys);
    Eigen::Map<const Eigen::VectorXd> yv(ys.data(), n);

    const double nv = std::exp(state.kernel.log_nv);
    const double sv = std::exp(state.kernel.log_sv);
    RowMat U = tensor_mat(state.inducing);
    RowMat Kmm = kernel_matrix(U, U, state.kernel);
    RowMat Kmn = kernel_matrix(U, F, state.kernel);

    Eigen::VectorXd v = Kmn * yv;
    RowMat A = Kmm + (Kmn * Kmn.transpose()) / nv;
    auto llt_a = llt_with_jitter(A, "sparse_gp_nll(A)");
    auto llt_m = llt_with_jitter(Kmm, "sparse_gp_nll(Kmm)");

    const double quad = (yv.squaredNorm() - v.dot(llt_a.solve(RowMat(v)).col(0)) / nv) / nv;
    const double logdet = logdet_from_llt(llt_a) - logdet_from_llt(llt_m) +
                          static_cast<double>(n) * std::log(nv);
    const double traced =
        llt_m.solve(Kmn).cwiseProduct(Kmn).sum();  // tr(Kmm^-1 Kmn Knm)
    const double trace_corr = (static_cast<double>(n) * sv - traced) / (2.0 * nv);
    return 0.5 * (quad + logdet + static_cast<double>(n) * kLog2Pi) + trace_corr;
}

namespace {

// x = (L L^T)^-1 b via two triangular solves on the cached factor.
RowMat chol_solve(const RowMat& L, RowMat b) {
    L.triangularView<Eigen::Lower>().solveInPlace(b);
    L.triangularView<Eigen::Lower>().transpose().solveInPlace(b);
    return b;
}

void posterior_from_cache(const GpState& state, const std::vector<LatentZ>& queries,
                          std::vector<double>& mean, std::vector<double>& var,
                          RowMat* cov_out) {
    const GpCache& c = state.cache;
    if (!c.valid) throw std::logic_error("posterior requires a conditioned GpState");
    RowMat Fq = features_of(state, latents_mat(queries));
    const auto q = Fq.rows();
    const double sv = std::exp(state.kernel.log_sv);

    Eigen::VectorXd m_std(q);
    Eigen::VectorXd v_std(q);
    RowMat cov;
    if (!c.sparse) {
        RowMat Ft = tensor_mat(c.train_features);
        RowMat Kqn = kernel_matrix(Fq, Ft, state.kernel);
        m_std = Kqn * tensor_mat(c.alpha).col(0);
        RowMat S = chol_solve(tensor_mat(c.chol), RowMat(Kqn.transpose()));
        if (cov_out) {
            cov = kernel_matrix(Fq, Fq, state.kernel) - Kqn * S;
        }
        for (Eigen::Index i = 0; i < q; ++i)
            v_std(i) = std::max(0.0, sv - Kqn.row(i).dot(S.col(i)));
    } else {
        RowMat U = tensor_mat(state.inducing);
        RowMat Kqm = kernel_matrix(Fq, U, state.kernel);
        m_std = Kqm * tensor_mat(c.alpha).col(0);
        RowMat Sm = chol_solve(tensor_mat(c.chol_mm), RowMat(Kqm.transpose()));
        RowMat Sa = chol_solve(tensor_mat(c.chol), RowMat(Kqm.transpose()));
        if (cov_out) {
            cov = kernel_matrix(Fq, Fq, state.kernel) - Kqm * Sm + Kqm * Sa;
        }
        for (Eigen::Index i = 0; i < q; ++i)
            v_std(i) = std::max(0.0, sv - Kqm.row(i).dot(Sm.col(i)) + Kqm.row(i).dot(Sa.col(i)));
    }

    mean.resize(static_cast<std::size_t>(q));
    var.resize(static_cast<std::size_t>(q));
    const double s2 = c.y_sd * c.y_sd;
    for (Eigen::Index i = 0; i < q; ++i) {
        mean[static_cast<std::size_t>(i)] = c.y_mean + c.y_sd * m_std(i);
        var[static_cast<std::size_t>(i)] = s2 * v_std(i);
    }
    if (cov_out) *cov_out = s2 * cov;
}

}  // namespace

void gp_posterior(const GpState& state, const std::vector<LatentZ>& queries,
                  std::vector<double>& mean, std::vector<double>& var) {
    posterior_from_cache(state, queries, mean, var, nullptr);
}

void exact_gp_posterior(const GpState& state, const GpTrain& train,
                        const std::vector<LatentZ>& queries, std::vector<double>& mean,
                        std::vector<double>& var) {
    if (train.size() > state.config.exact_cap)
        throw std::invalid_argument("training set exceeds the exact-GP cap");
    GpState st = state;
    st.config.force_sparse = false;
    st = gp_condition(st, train);
    gp_posterior(st, queries, mean, var);
}

void sparse_gp_posterior(const GpState& state, const std::vector<LatentZ>& queries,
                         std::vector<double>& mean, std::vector<double>& var) {
    if (!state.cache.valid || !state.cache.sparse)
        throw std::logic_error("sparse_gp_posterior requires a conditioned sparse state");
    gp_posterior(state, queries, mean, var);
}

std::vector<double> posterior_sample(const GpState& state,
                                     const std::vector<LatentZ>& queries, Rng& rng) {
    const std::size_t k = queries.size();
    std::vector<double> mean, var;
    if (k <= 256) {
        RowMat cov;
        posterior_from_cache(state, queries, mean, var, &cov);
        if (cov.diagonal().maxCoeff() < 1e-12) return mean;
        // symmetric jittered factorization; draw in index order
        auto llt = llt_with_jitter(cov, "posterior_sample");
        Eigen::VectorXd u(static_cast<Eigen::Index>(k));
        for (std::size_t i = 0; i < k; ++i) u(static_cast<Eigen::Index>(i)) = rng.normal();
        Eigen::VectorXd s = RowMat(llt.matrixL()) * u;
        std::vector<double> out(k);
        for (std::size_t i = 0; i < k; ++i) out[i] = mean[i] + s(static_cast<Eigen::Index>(i));
        return out;
    }
    posterior_from_cache(state, queries, mean, var, nullptr);
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i)
        out[i] = mean[i] + std::sqrt(std::max(0.0, var[i])) * rng.normal();
    return out;
}

GpNodes add_gp_params(ad::Graph& g, const GpState& state, const std::string& prefix,
                      bool with_inducing) {
    GpNodes n;
    n.identity_features = state.config.identity_features;
    n.log_ls = g.param(prefix + "log_ls", state.kernel.log_ls);
    n.log_sv = g.param(prefix + "log_sv", ad::Tensor::scalar(state.kernel.log_sv));
    n.log_nv = g.param(prefix + "log_nv", ad::Tensor::scalar(state.kernel.log_nv));
    n.all = {n.log_ls, n.log_sv, n.log_nv};
    if (!state.config.identity_features) {
        n.w1 = g.param(prefix + "dkl_w1", state.dkl.w1);
        n.b1 = g.param(prefix + "dkl_b1", state.dkl.b1);
        n.w2 = g.param(prefix + "dkl_w2", state.dkl.w2);
        n.b2 = g.param(prefix + "dkl_b2", state.dkl.b2);
        n.all.insert(n.all.end(), {n.w1, n.b1, n.w2, n.b2});
    }
    if (with_inducing) {
        if (state.inducing.numel() == 0)
            throw std::logic_error("inducing points not initialized");
        n.inducing = g.param(prefix + "inducing", state.inducing);
        n.all.push_back(n.inducing);
    }
    return n;
}

ad::NodeId dkl_features_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId z) {
    if (nodes.identity_features) return z;
    ad::NodeId h = g.tanh(g.add_rowvec(g.matmul(z, nodes.w1), nodes.b1));
    return g.add_rowvec(g.matmul(h, nodes.w2), nodes.b2);
}

ad::NodeId cross_sqdist_nodes(ad::Graph& g, ad::NodeId a, ad::NodeId b) {
    ad::NodeId an = g.reduce_sum_rows(g.mul(a, a));
    ad::NodeId bn = g.reduce_sum_rows(g.mul(b, b));
    ad::NodeId cross = g.mul_scalar(g.matmul(a, g.transpose(b)), -2.0);
    ad::NodeId sq = g.add_rowvec(g.add_colvec(cross, an), bn);
    return g.clamp(sq, 0.0, std::numeric_limits<double>::infinity());
}

ad::NodeId kernel_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId fa, ad::NodeId fb) {
    ad::NodeId inv_ls = g.exp(g.mul_scalar(nodes.log_ls, -1.0));
    ad::NodeId as = g.mul_rowvec(fa, inv_ls);
    ad::NodeId bs = (fa == fb) ? as : g.mul_rowvec(fb, inv_ls);
    ad::NodeId k0 = g.exp(g.mul_scalar(cross_sqdist_nodes(g, as, bs), -0.5));
    return g.scale_by(k0, g.exp(nodes.log_sv));
}

ad::NodeId exact_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId features,
                           const std::vector<double>& y_std) {
    const std::size_t n = y_std.size();
    ad::NodeId kn = g.add(kernel_nodes(g, nodes, features, features),
                          g.scale_by(g.constant(ad::Tensor::eye(n)), g.exp(nodes.log_nv)));
    ad::NodeId yc = g.constant(column_tensor(y_std));
    ad::NodeId quad = g.reduce_sum(g.mul(yc, g.solve_spd(kn, yc)));
    ad::NodeId t = g.add(quad, g.logdet_spd(kn));
    return g.mul_scalar(g.add_scalar(t, static_cast<double>(n) * kLog2Pi), 0.5);
}

ad::NodeId sparse_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId features,
                            const std::vector<double>& y_std) {
    const std::size_t n = y_std.size();
    if (nodes.inducing < 0) throw std::logic_error("sparse_nll_nodes needs inducing node");
    ad::NodeId inv_nv = g.exp(g.mul_scalar(nodes.log_nv, -1.0));
    ad::NodeId kmm = kernel_nodes(g, nodes, nodes.inducing, nodes.inducing);
    ad::NodeId kmn = kernel_nodes(g, nodes, nodes.inducing, features);
    ad::NodeId yc = g.constant(column_tensor(y_std));

    ad::NodeId v = g.matmul(kmn, yc);                                      // {M,1}
    ad::NodeId a = g.add(kmm, g.scale_by(g.matmul(kmn, g.transpose(kmn)), inv_nv));
    ad::NodeId vav = g.reduce_sum(g.mul(v, g.solve_spd(a, v)));            // v^T A^-1 v
    double yty = 0.0;
    for (double y : y_std) yty += y * y;
    ad::NodeId quad = g.scale_by(
        g.sub(g.constant_scalar(yty), g.scale_by(vav, inv_nv)), inv_nv);

    ad::NodeId logdet = g.add(g.sub(g.logdet_spd(a), g.logdet_spd(kmm)),
                              g.mul_scalar(nodes.log_nv, static_cast<double>(n)));
    ad::NodeId core = g.mul_scalar(
        g.add_scalar(g.add(quad, logdet), static_cast<double>(n) * kLog2Pi), 0.5);

    // (1 / 2 nv) * (n sigma_f^2 - tr(Kmm^-1 Kmn Knm))
    ad::NodeId traced = g.reduce_sum(g.mul(g.solve_spd(kmm, kmn), kmn));
    ad::NodeId trace_corr = g.scale_by(
        g.mul_scalar(g.sub(g.mul_scalar(g.exp(nodes.log_sv), static_cast<double>(n)), traced),
                     0.5),
        inv_nv);
    return g.add(core, trace_corr);
}

ad::NodeId gp_nll_nodes(ad::Graph& g, const GpNodes& nodes, ad::NodeId z_latents,
                        const std::vector<double>& y_std, bool sparse) {
    ad::NodeId f = dkl_features_nodes(g, nodes, z_latents);
    return sparse ? sparse_nll_nodes(g, nodes, f, y_std)
                  : exact_nll_nodes(g, nodes, f, y_std);
}

GpState fit_surrogate(const GpState& state, const GpTrain& train, std::size_t steps,
                      double lr, Rng& rng) {
    validate_train(train);
    GpState st = state;
    const std::size_t n = train.size();
    const bool sparse = wants_sparse(st, n);

    if (sparse) {
        const std::size_t m = std::min(st.config.max_inducing, n);
        const bool have =
            st.inducing.numel() > 0 && st.inducing.shape()[0] == m &&
            st.inducing.shape()[1] == st.feature_dim();
        if (!have) {
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            rng.shuffle(idx);
            RowMat F = features_of(st, latents_mat(train.latents));
            RowMat U(static_cast<Eigen::Index>(m), F.cols());
            for (std::size_t i = 0; i < m; ++i)
                U.row(static_cast<Eigen::Index>(i)) = F.row(static_cast<Eigen::Index>(idx[i]));
            st.inducing = mat_tensor(U);
        }
    }

    double y_mean = 0.0, y_sd = 1.0;
    std::vector<double> ys;
    standardize_y(train.objectives, y_mean, y_sd, ys);

    ad::Graph g;
    GpNodes nodes = add_gp_params(g, st, "gp.", sparse);
    ad::Tensor zt = mat_tensor(latents_mat(train.latents));
    ad::NodeId out = gp_nll_nodes(g, nodes, g.constant(zt), ys, sparse);

    g.forward();
    double nll = g.value(out).value();
    std::vector<double> trace = {nll};
    double cur_lr = lr;
    for (std::size_t step = 0; step < steps && cur_lr >= 1e-12; ++step) {
        g.backward(out);
        // global norm clip at 1: a single step never moves any log-scale
        // hyperparameter by more than lr, which keeps the monotone line
        // search out of the degenerate tiny-lengthscale basin
        double norm2 = 0.0;
        for (ad::NodeId p : nodes.all)
            for (double gv : g.grad(p).data()) norm2 += gv * gv;
        const double scale = norm2 > 1.0 ? 1.0 / std::sqrt(norm2) : 1.0;
        std::vector<ad::Tensor> snapshot;
        snapshot.reserve(nodes.all.size());
        for (ad::NodeId p : nodes.all) snapshot.push_back(g.value(p));
        for (ad::NodeId p : nodes.all) {
            auto& val = g.mutable_value(p);
            const auto& gr = g.grad(p);
            for (std::size_t i = 0; i < val.numel(); ++i) val[i] -= cur_lr * scale * gr[i];
        }
        double cand = std::numeric_limits<double>::infinity();
        bool ok = false;
        try {
            g.forward();
            cand = g.value(out).value();
            ok = std::isfinite(cand) && cand <= nll;
        } catch (const ad::NonFiniteError&) {
        } catch (const ad::FactorizationError&) {
        }
        if (ok) {
            nll = cand;
        } else {
            for (std::size_t i = 0; i < nodes.all.size(); ++i)
                g.mutable_value(nodes.all[i]) = snapshot[i];
            cur_lr *= 0.5;
            g.forward();  // restore cached node values for the next backward
        }
        trace.push_back(nll);
    }

    st.kernel.log_ls = g.value(nodes.log_ls);
    st.kernel.log_sv = g.value(nodes.log_sv).value();
    st.kernel.log_nv = g.value(nodes.log_nv).value();
    if (!st.config.identity_features) {
        st.dkl.w1 = g.value(nodes.w1);
        st.dkl.b1 = g.value(nodes.b1);
        st.dkl.w2 = g.value(nodes.w2);
        st.dkl.b2 = g.value(nodes.b2);
    }
    if (sparse) st.inducing = g.value(nodes.inducing);
    st.last_nll_trace = std::move(trace);
    return gp_condition(st, train);
}

namespace {

constexpr char kGpMagic[8] = {'C', 'B', 'G', 'P', '0', '0', '1', '\0'};

void put_u64(std::ofstream& f, std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t get_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void put_f64(std::ofstream& f, double v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

double get_f64(std::ifstream& f) {
    double v = 0.0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

// The element count is stored explicitly: a default-constructed tensor
// (empty shape, no data) and a rank-0 scalar both have empty shapes but
// differ in count (0 vs 1).
void put_tensor(std::ofstream& f, const ad::Tensor& t) {
    put_u64(f, t.shape().size());
    for (std::size_t d : t.shape()) put_u64(f, d);
    put_u64(f, t.numel());
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

ad::Tensor get_tensor(std::ifstream& f) {
    const std::size_t rank = get_u64(f);
    if (rank > 4) throw std::runtime_error("load_gp: corrupt tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = get_u64(f);
    const std::size_t count = get_u64(f);
    if (rank == 0 && count == 0) return ad::Tensor{};  // uninitialized slot
    ad::Tensor t(shape);
    if (t.numel() != count) throw std::runtime_error("load_gp: corrupt tensor size");
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    return t;
}

}  // namespace

void save_gp(const GpState& state, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_gp: cannot open " + path);
    f.write(kGpMagic, sizeof(kGpMagic));
    put_u64(f, state.config.hidden_dim);
    put_u64(f, state.config.feature_dim);
    put_u64(f, state.config.max_inducing);
    put_u64(f, state.config.exact_cap);
    put_u64(f, state.config.force_sparse ? 1 : 0);
    put_u64(f, state.config.identity_features ? 1 : 0);
    put_u64(f, state.dkl.in_dim);
    put_u64(f, state.dkl.hidden_dim);
    put_u64(f, state.dkl.out_dim);
    put_f64(f, state.kernel.log_sv);
    put_f64(f, state.kernel.log_nv);
    put_tensor(f, state.kernel.log_ls);
    put_tensor(f, state.dkl.w1);
    put_tensor(f, state.dkl.b1);
    put_tensor(f, state.dkl.w2);
    put_tensor(f, state.dkl.b2);
    put_tensor(f, state.inducing);
    if (!f) throw std::runtime_error("save_gp: write failed for " + path);
}

GpState load_gp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_gp: cannot open " + path);
    char magic[8] = {};
    f.read(magic, sizeof(magic));
    if (!f || std::string(magic, 8) != std::string(kGpMagic, 8))
        throw std::runtime_error("load_gp: bad magic in " + path);
    GpState st;
    st.config.hidden_dim = get_u64(f);
    st.config.feature_dim = get_u64(f);
    st.config.max_inducing = get_u64(f);
    st.config.exact_cap = get_u64(f);
    st.config.force_sparse = get_u64(f) != 0;
    st.config.identity_features = get_u64(f) != 0;
    st.dkl.in_dim = get_u64(f);
    st.dkl.hidden_dim = get_u64(f);
    st.dkl.out_dim = get_u64(f);
    st.kernel.log_sv = get_f64(f);
    st.kernel.log_nv = get_f64(f);
    st.kernel.log_ls = get_tensor(f);
    st.dkl.w1 = get_tensor(f);
    st.dkl.b1 = get_tensor(f);
    st.dkl.w2 = get_tensor(f);
    st.dkl.b2 = get_tensor(f);
    st.inducing = get_tensor(f);
    if (!f) throw std::runtime_error("load_gp: truncated file " + path);
    return st;
}

}  // namespace cobo
