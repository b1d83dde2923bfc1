// SPDX-License-Identifier: Apache-2.0
#include "cobo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "cobo/util.hpp"

namespace cobo {
namespace {

double l2_dist(const LatentZ& a, const LatentZ& b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double t = a[d] - b[d];
        s += t * t;
    }
    return std::sqrt(s);
}

void validate_latents(const Batch& batch, std::size_t min_n, const char* caller) {
    if (batch.latents.size() < min_n)
        throw std::invalid_argument(std::string(caller) + ": need at least " +
                                    std::to_string(min_n) + " points, got " +
                                    std::to_string(batch.latents.size()));
    const std::size_t dim = batch.latents[0].size();
    if (dim == 0) throw std::invalid_argument(std::string(caller) + ": empty latent vector");
    for (const auto& z : batch.latents)
        if (z.size() != dim)
            throw std::invalid_argument(std::string(caller) + ": ragged latent dimensions");
}

/// Population mean and variance (divide by count).
void moments(const std::vector<double>& v, double& mean, double& var) {
    const auto n = static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += x;
    mean = s / n;
    double sq = 0.0;
    for (double x : v) {
        const double d = x - mean;
        sq += d * d;
    }
    var = sq / n;
}

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Flip the vector so its largest-magnitude entry (first on ties) is >= 0.
void sign_fix(std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (std::abs(v[i]) > std::abs(v[best])) best = i;
    if (v[best] < 0.0)
        for (double& x : v) x = -x;
}

/// Leading eigenpair of the symmetric d x d matrix C (row-major) by power
/// iteration, kept orthogonal to `prev` when given. Returns a zero pair when
/// the iterate collapses (rank-deficient direction).
std::pair<double, std::vector<double>> power_top(const std::vector<double>& C, std::size_t d,
                                                 const std::vector<double>* prev, Rng& rng) {
    constexpr int kMaxIters = 200;
    constexpr double kTol = 1e-9;

    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    auto orthogonalize = [&](std::vector<double>& w) {
        if (!prev) return;
        double dp = 0.0;
        for (std::size_t i = 0; i < d; ++i) dp += w[i] * (*prev)[i];
        for (std::size_t i = 0; i < d; ++i) w[i] -= dp * (*prev)[i];
    };
    orthogonalize(v);
    double nv = vec_norm(v);
    if (nv < 1e-300) return {0.0, std::vector<double>(d, 0.0)};
    for (double& x : v) x /= nv;

    std::vector<double> w(d);
    for (int it = 0; it < kMaxIters; ++it) {
        for (std::size_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += C[i * d + j] * v[j];
            w[i] = s;
        }
        orthogonalize(w);
        const double nw = vec_norm(w);
        if (nw < 1e-300) return {0.0, std::vector<double>(d, 0.0)};
        double diff_minus = 0.0, diff_plus = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double wi = w[i] / nw;
            diff_minus += (wi - v[i]) * (wi - v[i]);
            diff_plus += (wi + v[i]) * (wi + v[i]);
            v[i] = wi;
        }
        if (std::min(std::sqrt(diff_minus), std::sqrt(diff_plus)) < kTol) break;
    }
    double lambda = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += C[i * d + j] * v[j];
        lambda += v[i] * s;
    }
    return {lambda, v};
}

struct SampledFn {
    std::function<double(double)> f;
    double lipschitz = 0.0;
};

SampledFn sample_function(BoundFamily family, Rng& rng) {
    switch (family) {
        case BoundFamily::kLinear: {
            const double a = rng.uniform(0.5, 3.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
            const double b = rng.uniform(-1.0, 1.0);
            return {[a, b](double z) { return a * z + b; }, std::abs(a)};
        }
        case BoundFamily::kPiecewiseLinear: {
            constexpr int kSegments = 8;
            constexpr double kWidth = 1.0 / kSegments;
            std::vector<double> slope(kSegments);
            double L = 0.0;
            for (double& s : slope) {
                s = rng.uniform(-3.0, 3.0);
                L = std::max(L, std::abs(s));
            }
            if (L == 0.0) {
                slope[0] = 1.0;
                L = 1.0;
            }
            std::vector<double> base(kSegments + 1);
            base[0] = rng.uniform(-1.0, 1.0);
            for (int k = 0; k < kSegments; ++k) base[k + 1] = base[k] + slope[k] * kWidth;
            return {[slope, base](double z) {
                        int k = static_cast<int>(z / kWidth);
                        k = std::clamp(k, 0, kSegments - 1);
                        return base[k] + slope[k] * (z - k * kWidth);
                    },
                    L};
        }
        case BoundFamily::kClippedQuadratic: {
            const double c = rng.uniform(2.0, 6.0);
            const double z0 = rng.uniform(0.2, 0.8);
            const double m = rng.uniform(0.3, 1.5);
            // The clip flattens everything beyond radius sqrt(m/c) from the
            // vertex, so the steepest reachable slope is at the smaller of
            // that radius and the farthest end of [0,1].
            const double reach = std::min(std::max(z0, 1.0 - z0), std::sqrt(m / c));
            const double L = 2.0 * c * reach;
            return {[c, z0, m](double z) {
                        const double q = c * (z - z0) * (z - z0);
                        return std::min(q, m);
                    },
                    L};
        }
    }
    throw std::logic_error("sample_function: unknown family");
}

}  // namespace

std::optional<double> pearson_of(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("pearson_of: length mismatch");
    if (a.size() < 2) return std::nullopt;
    double ma = 0.0, va = 0.0, mb = 0.0, vb = 0.0;
    moments(a, ma, va);
    moments(b, mb, vb);
    if (va <= 0.0 || vb <= 0.0) return std::nullopt;
    double cov = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) cov += (a[i] - ma) * (b[i] - mb);
    cov /= static_cast<double>(a.size());
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

CorrelationStats pairwise_stats(const Batch& batch, std::size_t max_pairs, Rng& rng) {
    validate_latents(batch, 3, "pairwise_stats");
    const std::size_t n = batch.latents.size();
    if (batch.objectives.size() != n)
        throw std::invalid_argument("pairwise_stats: objectives/latents size mismatch");

    const std::size_t total = n * (n - 1) / 2;
    std::vector<double> dz, dy;
    if (max_pairs == 0 || total <= max_pairs) {
        dz.reserve(total);
        dy.reserve(total);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                dz.push_back(l2_dist(batch.latents[i], batch.latents[j]));
                dy.push_back(std::abs(batch.objectives[i] - batch.objectives[j]));
            }
    } else {
        dz.reserve(max_pairs);
        dy.reserve(max_pairs);
        for (std::size_t t = 0; t < max_pairs; ++t) {
            const std::size_t i = rng.index(n);
            std::size_t j = rng.index(n);
            while (j == i) j = rng.index(n);
            dz.push_back(l2_dist(batch.latents[i], batch.latents[j]));
            dy.push_back(std::abs(batch.objectives[i] - batch.objectives[j]));
        }
    }

    CorrelationStats s;
    s.pair_count = dz.size();
    moments(dz, s.mu_dz, s.var_dz);
    moments(dy, s.mu_dy, s.var_dy);
    s.pearson = pearson_of(dz, dy);
    return s;
}

double corr_lower_bound(const CorrelationStats& stats, double L) {
    if (!(L > 0.0)) throw std::invalid_argument("corr_lower_bound: L must be positive");
    if (!(stats.var_dz > 0.0) || !(stats.var_dy > 0.0))
        throw std::invalid_argument("corr_lower_bound: both variances must be positive");
    const double numerator =
        (stats.var_dy + stats.mu_dy * stats.mu_dy) / L - L * stats.mu_dz * stats.mu_dz;
    return numerator / std::sqrt(stats.var_dz * stats.var_dy);
}

ZdistSummary zdist_summary(const Batch& batch) {
    validate_latents(batch, 2, "zdist_summary");
    const std::size_t n = batch.latents.size();
    std::vector<double> dist;
    dist.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            dist.push_back(l2_dist(batch.latents[i], batch.latents[j]));
    ZdistSummary s;
    s.p10 = quantile(dist, 0.10);
    s.q1 = quantile(dist, 0.25);
    s.median = quantile(dist, 0.50);
    s.q3 = quantile(dist, 0.75);
    s.p90 = quantile(dist, 0.90);
    return s;
}

Pca2dResult pca2d(const Batch& batch) {
    validate_latents(batch, 3, "pca2d");
    const std::size_t n = batch.latents.size();
    const std::size_t d = batch.latents[0].size();

    std::vector<double> mean(d, 0.0);
    for (const auto& z : batch.latents)
        for (std::size_t a = 0; a < d; ++a) mean[a] += z[a];
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<double> centered(n * d);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t a = 0; a < d; ++a) centered[k * d + a] = batch.latents[k][a] - mean[a];

    std::vector<double> C(d * d, 0.0);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = centered[k * d + a];
            for (std::size_t b = a; b < d; ++b) C[a * d + b] += xa * centered[k * d + b];
        }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            C[a * d + b] /= static_cast<double>(n);
            C[b * d + a] = C[a * d + b];
        }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) trace += C[a * d + a];
    const double lambda_tol = 1e-12 * std::max(1.0, trace);

    Pca2dResult out;
    out.components[0].assign(d, 0.0);
    out.components[1].assign(d, 0.0);
    out.points.assign(n, {0.0, 0.0});

    Rng rng(0xC0B0A11AULL);
    Rng rng1 = rng.substream(1);
    auto [l1, v1] = power_top(C, d, nullptr, rng1);
    if (l1 > lambda_tol) {
        sign_fix(v1);
        out.eigenvalues[0] = l1;
        out.components[0] = v1;

        std::vector<double> deflated = C;
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) deflated[a * d + b] -= l1 * v1[a] * v1[b];
        Rng rng2 = rng.substream(2);
        auto [l2, v2] = power_top(deflated, d, &v1, rng2);
        if (l2 > lambda_tol) {
            sign_fix(v2);
            out.eigenvalues[1] = l2;
            out.components[1] = v2;
        }
    }

    if (trace > lambda_tol) {
        out.explained[0] = std::clamp(out.eigenvalues[0] / trace, 0.0, 1.0);
        out.explained[1] = std::clamp(out.eigenvalues[1] / trace, 0.0, 1.0);
    }
    for (std::size_t k = 0; k < n; ++k)
        for (int comp = 0; comp < 2; ++comp) {
            double s = 0.0;
            for (std::size_t a = 0; a < d; ++a) s += centered[k * d + a] * out.components[comp][a];
            out.points[k][comp] = s;
        }
    return out;
}

std::string bound_family_name(BoundFamily family) {
    switch (family) {
        case BoundFamily::kLinear: return "linear";
        case BoundFamily::kPiecewiseLinear: return "piecewise_linear";
        case BoundFamily::kClippedQuadratic: return "clipped_quadratic";
    }
    throw std::logic_error("bound_family_name: unknown family");
}

BoundExperimentReport bound_experiment(const BoundExperimentConfig& cfg) {
    if (cfg.n_points < 3)
        throw std::invalid_argument("bound_experiment: n_points must be at least 3");
    if (cfg.trials_per_family < 0)
        throw std::invalid_argument("bound_experiment: trials_per_family must be >= 0");
    if (!(cfg.l_scale > 0.0) || !std::isfinite(cfg.l_scale))
        throw std::invalid_argument("bound_experiment: l_scale must be positive and finite");
    if (!(cfg.tolerance >= 0.0))
        throw std::invalid_argument("bound_experiment: tolerance must be >= 0");

    BoundExperimentReport report;
    const Rng root(cfg.seed);
    std::size_t satisfied_count = 0;
    for (std::size_t fi = 0; fi < cfg.families.size(); ++fi) {
        for (int t = 0; t < cfg.trials_per_family; ++t) {
            Rng trial_rng = root.substream(fi * 1000003ULL + static_cast<std::uint64_t>(t));
            Rng pair_rng = trial_rng.substream(17);

            SampledFn fn = sample_function(cfg.families[fi], trial_rng);
            Batch batch;
            batch.latents.reserve(cfg.n_points);
            batch.objectives.reserve(cfg.n_points);
            for (std::size_t k = 0; k < cfg.n_points; ++k) {
                const double z = trial_rng.uniform();
                batch.latents.push_back({z});
                batch.objectives.push_back(fn.f(z));
            }

            BoundExperimentRow row;
            row.family = bound_family_name(cfg.families[fi]);
            row.trial = static_cast<std::uint64_t>(t);
            row.lipschitz = fn.lipschitz;
            row.l_used = fn.lipschitz * cfg.l_scale;
            row.stats = pairwise_stats(batch, cfg.max_pairs, pair_rng);
            row.bound = corr_lower_bound(row.stats, row.l_used);
            row.satisfied =
                row.stats.pearson.has_value() && *row.stats.pearson + cfg.tolerance >= row.bound;
            if (row.satisfied) ++satisfied_count;
            report.rows.push_back(std::move(row));
        }
    }
    report.pass_rate = report.rows.empty()
                           ? 1.0
                           : static_cast<double>(satisfied_count) /
                                 static_cast<double>(report.rows.size());
    return report;
}

std::string bound_report_csv(const BoundExperimentReport& report) {
    std::string out =
        "family,trial,n_pairs,lipschitz,l_used,mu_dz,var_dz,mu_dy,var_dy,pearson,bound,"
        "satisfied\n";
    for (const auto& r : report.rows) {
        out += r.family;
        out += ',' + std::to_string(r.trial);
        out += ',' + std::to_string(r.stats.pair_count);
        out += ',' + fmt_double(r.lipschitz);
        out += ',' + fmt_double(r.l_used);
        out += ',' + fmt_double(r.stats.mu_dz);
        out += ',' + fmt_double(r.stats.var_dz);
        out += ',' + fmt_double(r.stats.mu_dy);
        out += ',' + fmt_double(r.stats.var_dy);
        out += ',';
        if (r.stats.pearson) out += fmt_double(*r.stats.pearson);
        out += ',' + fmt_double(r.bound);
        out += ',';
        out += r.satisfied ? '1' : '0';
        out += '\n';
    }
    return out;
}

std::string pca_scatter_csv(const Pca2dResult& pca, const std::vector<double>& objectives) {
    if (objectives.size() != pca.points.size())
        throw std::invalid_argument("pca_scatter_csv: objectives/points size mismatch");
    std::string out = "pc1,pc2,objective\n";
    for (std::size_t k = 0; k < pca.points.size(); ++k) {
        out += fmt_double(pca.points[k][0]);
        out += ',' + fmt_double(pca.points[k][1]);
        out += ',' + fmt_double(objectives[k]);
        out += '\n';
    }
    return out;
}

}  // namespace cobo
