// SPDX-License-Identifier: Apache-2.0
#include "cobo/loop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "cobo/optim.hpp"
#include "cobo/util.hpp"

namespace cobo {
namespace {

double score_of(bool maximize, double y) { return maximize ? y : -y; }

/// Fresh trust region at `center` with the configured geometry applied.
TrustRegionState region_from(const RunConfig& cfg, LatentZ center) {
    TrustRegionState tr = make_trust_region(std::move(center), cfg.latent_dim);
    tr.side = cfg.tr.init_side;
    tr.min_side = cfg.tr.min_side;
    tr.max_side = cfg.tr.max_side;
    tr.success_tol = cfg.tr.success_tol;
    if (cfg.tr.fail_tol > 0) tr.failure_tol = cfg.tr.fail_tol;
    return tr;
}

void validate_config(const RunConfig& cfg) {
    if (cfg.n_init < 1) throw std::invalid_argument("RunConfig: n_init must be >= 1");
    if (cfg.budget < cfg.n_init)
        throw std::invalid_argument("RunConfig: budget must be >= n_init");
    if (cfg.topk < 2) throw std::invalid_argument("RunConfig: topk must be >= 2");
    if (cfg.batch_size < 1) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
    if (cfg.n_fail < 1) throw std::invalid_argument("RunConfig: n_fail must be >= 1");
    if (cfg.retrain_epochs < 0)
        throw std::invalid_argument("RunConfig: retrain_epochs must be >= 0");
    if (cfg.latent_dim < 1) throw std::invalid_argument("RunConfig: latent_dim must be >= 1");
    if (cfg.vae_hidden < 1) throw std::invalid_argument("RunConfig: vae_hidden must be >= 1");
    if (cfg.pretrain_epochs < 0)
        throw std::invalid_argument("RunConfig: pretrain_epochs must be >= 0");
    if (cfg.candidates_per_batch != 0 && cfg.candidates_per_batch < cfg.batch_size)
        throw std::invalid_argument("RunConfig: candidates_per_batch must be >= batch_size");
    if (cfg.reobs_per_seq < 0)
        throw std::invalid_argument("RunConfig: reobs_per_seq must be >= 0");
    if (!(cfg.tr.min_side > 0.0) || cfg.tr.init_side < cfg.tr.min_side ||
        cfg.tr.max_side < cfg.tr.init_side)
        throw std::invalid_argument("RunConfig: need 0 < tr.min_side <= tr.init_side <= tr.max_side");
    if (cfg.tr.success_tol < 1 || cfg.tr.fail_tol < 0)
        throw std::invalid_argument("RunConfig: tr tolerances out of range");
}

/// Zeroed coefficients / unit weights for disabled ablation toggles.
LossCoefficients effective_coeffs(const RunConfig& cfg) {
    LossCoefficients c = cfg.coeffs;
    if (!cfg.ablation.lip) c.c_lip = 0.0;
    if (!cfg.ablation.zreg) c.c_z = 0.0;
    return c;
}

WeightingConfig effective_weighting(const RunConfig& cfg) {
    WeightingConfig w = cfg.weighting;
    w.enabled = w.enabled && cfg.ablation.weighting;
    return w;
}

void refresh_embeddings(Dataset& data, const VaeParams& vae) {
    for (auto& s : data.samples) s.z = encode_mean(vae, s.x);
}

LossBreakdown read_breakdown(const ad::Graph& g, const CoboGraphRefs& refs) {
    LossBreakdown bd;
    bd.lip = g.value(refs.lip).value();
    bd.z = g.value(refs.z).value();
    bd.recon = g.value(refs.recon).value();
    bd.kl = g.value(refs.kl).value();
    bd.surr = g.value(refs.surr).value();
    bd.total = g.value(refs.total).value();
    bd.lipschitz_L = g.value(refs.lip_L).value();
    bd.yq = refs.yq;
    return bd;
}

std::string retrain_tag(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "retrain_%03zu", index);
    return buf;
}

std::string cell_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : ""; }

}  // namespace

Dataset init_dataset(const Task& task, std::size_t n_init, Rng& rng) {
    if (n_init < 1) throw std::invalid_argument("init_dataset: n_init must be >= 1");
    Dataset data;
    data.maximize = task.maximize;
    const std::size_t max_draws = 1000 * n_init + 1000;
    std::size_t draws = 0;
    while (data.samples.size() < n_init) {
        const std::size_t want = n_init - data.samples.size();
        auto chunk = task.corpus(want, rng);
        for (auto& x : chunk) {
            if (draws++ > max_draws)
                throw std::runtime_error(
                    "init_dataset: could not draw enough distinct sequences");
            if (data.samples.size() >= n_init) break;
            if (data.seen.count(x)) continue;
            const double y = task.oracle(x);
            if (!std::isfinite(y))
                throw std::runtime_error("init_dataset: oracle returned a non-finite value");
            data.seen.emplace(x, y);
            data.samples.push_back({std::move(x), {}, y});
            ++data.oracle_calls;
        }
    }
    return data;
}

Batch topk_select(const Dataset& data, std::size_t k) {
    if (data.samples.empty()) throw std::invalid_argument("topk_select: empty dataset");
    std::vector<std::size_t> order(data.samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    // stable sort keeps the earliest-inserted sample first among equal scores
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return score_of(data.maximize, data.samples[a].y) >
               score_of(data.maximize, data.samples[b].y);
    });
    const std::size_t take = std::min(k, order.size());
    Batch batch;
    batch.latents.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const auto& s = data.samples[order[i]];
        batch.latents.push_back(s.z);
        batch.objectives.push_back(score_of(data.maximize, s.y));
        batch.sequences.push_back(s.x);
    }
    return batch;
}

RetrainResult retrain_latent(const VaeParams& vae, const GpState& gp, const Batch& batch,
                             const RunConfig& cfg, Rng& rng) {
    RetrainResult out{vae, gp, {}, false, ""};
    if (cfg.retrain_epochs <= 0 || batch.size() < 2) return out;

    const LossCoefficients coeffs = effective_coeffs(cfg);
    const WeightingConfig wcfg = effective_weighting(cfg);
    const std::size_t N = batch.size();

    ad::Graph g;
    CoboGraphRefs refs = build_cobo_graph(g, batch, vae, gp, coeffs, wcfg);
    Adam opt(cfg.retrain_lr);
    VaeParams cur = vae;
    ad::Tensor eps({N, vae.n});

    for (int epoch = 0; epoch < cfg.retrain_epochs; ++epoch) {
        // detached slope threshold from the current encoder means
        std::vector<LatentZ> means;
        means.reserve(N);
        for (const auto& x : batch.sequences) means.push_back(encode_mean(cur, x));
        const double L = lipschitz_constant(means, batch.objectives);
        g.set_value(refs.lip_L, ad::Tensor({1}, {L}));
        for (auto& v : eps.data()) v = rng.normal();
        g.set_value(refs.eps, eps);

        bool ok = false;
        try {
            g.forward();
            ok = std::isfinite(g.value(refs.total).value());
        } catch (const ad::NonFiniteError&) {
        } catch (const ad::FactorizationError&) {
        }
        if (!ok) {
            out.vae = vae;  // keep the pre-retrain parameters
            out.gp = gp;
            out.aborted = true;
            out.abort_reason = "non-finite joint loss at epoch " + std::to_string(epoch);
            return out;
        }
        out.trace.push_back(read_breakdown(g, refs));
        g.backward(refs.total);
        opt.step(g, refs.params);
        read_back_params(g, refs.vae, cur);
    }

    out.vae = cur;
    out.gp.kernel.log_ls = g.value(refs.gp.log_ls);
    out.gp.kernel.log_sv = g.value(refs.gp.log_sv).value();
    out.gp.kernel.log_nv = g.value(refs.gp.log_nv).value();
    if (!refs.gp.identity_features) {
        out.gp.dkl.w1 = g.value(refs.gp.w1);
        out.gp.dkl.b1 = g.value(refs.gp.b1);
        out.gp.dkl.w2 = g.value(refs.gp.w2);
        out.gp.dkl.b2 = g.value(refs.gp.b2);
    }
    if (refs.gp.inducing >= 0) out.gp.inducing = g.value(refs.gp.inducing);
    out.gp.cache = GpCache{};
    out.gp.last_nll_trace.clear();
    return out;
}

namespace {

void write_snapshot(const LoopState& st, std::size_t index) {
    const std::string base = st.cfg.snapshot_dir + "/" + retrain_tag(index);
    save_vae(st.vae, base + "_vae.bin");
    save_gp(st.gp, base + "_gp.bin");
    write_dataset_csv(st.data, base + "_dataset.csv");
}

/// Shared retrain path: stats before/after, parameter update, dataset
/// re-embedding, accumulator reset, trust-region recentering, snapshots.
void apply_retrain(LoopState& st) {
    Batch batch = topk_select(st.data, st.cfg.topk);

    RetrainRecord rec;
    rec.index = st.history.retrains.size();
    rec.at_call = st.data.oracle_calls;
    if (batch.size() >= 3) {
        Rng prng = st.analysis_rng.substream(2 * rec.index);
        rec.stats_before = pairwise_stats(batch, st.cfg.analysis_max_pairs, prng);
    }

    RetrainResult res = retrain_latent(st.vae, st.gp, batch, st.cfg, st.rng);
    rec.aborted = res.aborted;
    rec.trace = res.trace;
    if (res.aborted)
        st.history.events.push_back(retrain_tag(rec.index) + " aborted: " + res.abort_reason);
    st.vae = res.vae;
    st.gp = res.gp;
    refresh_embeddings(st.data, st.vae);

    Batch after = topk_select(st.data, st.cfg.topk);
    if (after.size() >= 3) {
        Rng prng = st.analysis_rng.substream(2 * rec.index + 1);
        rec.stats_after = pairwise_stats(after, st.cfg.analysis_max_pairs, prng);
        rec.lipschitz_after = lipschitz_constant(after);
        try {
            rec.bound_after = corr_lower_bound(*rec.stats_after, rec.lipschitz_after);
        } catch (const std::invalid_argument&) {
            rec.bound_after = std::nullopt;  // degenerate batch (zero variance or L = 0)
        }
    }

    st.last_retrain_loss =
        rec.trace.empty() ? std::nullopt : std::make_optional(rec.trace.back());
    st.last_retrain_pearson = rec.stats_after ? rec.stats_after->pearson : std::nullopt;
    st.fail_accum = 0;
    // the stored duplicate latents describe the previous latent space
    st.reobs_z.clear();
    st.reobs_score.clear();
    st.reobs_counts.clear();

    const LatentZ& z_star = st.data.samples[st.best_index].z;
    st.tr.center = z_star;
    if (st.cfg.ablation.recoordinate) st.tr = tr_recoordinate(st.tr, z_star, st.vae);

    if (!st.cfg.snapshot_dir.empty()) write_snapshot(st, rec.index);
    st.history.retrains.push_back(std::move(rec));
}

/// Evaluates one decoded sequence, appends the sample + history row, and
/// reports whether it improved the incumbent.
bool record_sample(LoopState& st, SequenceX x, LatentZ z, double y, double tr_side) {
    if (!std::isfinite(y))
        throw std::runtime_error("bo_step: oracle returned a non-finite value");
    st.data.seen.emplace(x, y);
    st.data.samples.push_back({std::move(x), std::move(z), y});
    ++st.data.oracle_calls;

    const double score = score_of(st.data.maximize, y);
    const bool improved = score > st.best_score;
    if (improved) {
        st.best_score = score;
        st.best_index = st.data.samples.size() - 1;
    }
    HistoryRow row;
    row.call = st.data.oracle_calls;
    row.y = y;
    row.best_y = st.data.samples[st.best_index].y;
    row.tr_side = tr_side;
    row.retrain_loss = st.last_retrain_loss;
    row.pearson = st.last_retrain_pearson;
    st.history.rows.push_back(row);
    return improved;
}

std::vector<double> tr_lengthscales(const LoopState& st, const Batch& topk,
                                    const std::vector<double>& range) {
    // Kernel lengthscales shape the box only when they live in latent
    // coordinates; behind a feature net they describe feature dimensions.
    if (st.gp.config.identity_features &&
        st.gp.kernel.log_ls.numel() == st.cfg.latent_dim) {
        const auto& ls = st.gp.kernel.log_ls;
        std::vector<double> out(ls.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ls[i]);
        return out;
    }
    // Behind a feature net, shape the box to the top-k cloud instead: the
    // per-dimension spread of the best embeddings (in the normalized
    // coordinates the box lives in) is the best available geometry proxy,
    // and it keeps candidates near the manifold the decoder was trained on.
    const std::size_t n = st.cfg.latent_dim;
    std::vector<double> out(n, 1.0);
    if (topk.size() >= 2) {
        for (std::size_t d = 0; d < n; ++d) {
            double mean = 0.0;
            for (const auto& z : topk.latents) mean += z[d];
            mean /= double(topk.size());
            double var = 0.0;
            for (const auto& z : topk.latents) var += (z[d] - mean) * (z[d] - mean);
            var /= double(topk.size());
            out[d] = std::max(std::sqrt(var) / range[d], 1e-6);
        }
    }
    return out;
}

/// Trust-region candidates in dataset-normalized coordinates: the side
/// length measures a fraction of the observed per-dimension latent range
/// (the unit-cube convention of the region-management scheme), so the box
/// tracks the scale the embeddings actually occupy.
std::vector<LatentZ> tr_candidates(LoopState& st, const Batch& topk, std::size_t count) {
    const std::size_t n = st.cfg.latent_dim;
    std::vector<double> lo(n, std::numeric_limits<double>::infinity());
    std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
    for (const auto& s : st.data.samples)
        for (std::size_t d = 0; d < n; ++d) {
            lo[d] = std::min(lo[d], s.z[d]);
            hi[d] = std::max(hi[d], s.z[d]);
        }
    std::vector<double> range(n);
    for (std::size_t d = 0; d < n; ++d) range[d] = std::max(hi[d] - lo[d], 1e-9);

    TrustRegionState unit = st.tr;
    for (std::size_t d = 0; d < n; ++d) unit.center[d] = (st.tr.center[d] - lo[d]) / range[d];
    std::vector<LatentZ> cands =
        generate_candidates(unit, count, tr_lengthscales(st, topk, range), st.rng);
    for (auto& z : cands)
        for (std::size_t d = 0; d < n; ++d) z[d] = lo[d] + z[d] * range[d];
    return cands;
}

}  // namespace

LoopState make_loop_state(const RunConfig& cfg) {
    validate_config(cfg);
    LoopState st;
    st.cfg = cfg;
    st.task = make_task(cfg.task_id, cfg.task_seed);
    st.cfg.coeffs = effective_coeffs(cfg);
    st.cfg.weighting = effective_weighting(cfg);

    const Rng root(cfg.seed);
    st.rng = root.substream(1);
    st.analysis_rng = root.substream(2);
    Rng corpus_rng = root.substream(3);

    st.data = init_dataset(st.task, cfg.n_init, st.rng);

    // history rows for the initialization calls (no trust region yet)
    st.best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < st.data.samples.size(); ++i) {
        const double score = score_of(st.data.maximize, st.data.samples[i].y);
        if (score > st.best_score) {
            st.best_score = score;
            st.best_index = i;
        }
        HistoryRow row;
        row.call = i + 1;
        row.y = st.data.samples[i].y;
        row.best_y = st.data.samples[st.best_index].y;
        row.tr_side = 0.0;
        st.history.rows.push_back(row);
    }

    auto corpus = st.task.corpus(cfg.pretrain_corpus, corpus_rng);
    for (const auto& s : st.data.samples) corpus.push_back(s.x);
    st.vae = init_vae(st.task.T, st.task.vocab.size(), cfg.vae_hidden, cfg.latent_dim, st.rng);
    if (cfg.pretrain_epochs > 0)
        pretrain_vae(st.vae, corpus, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_kl,
                     st.rng);
    refresh_embeddings(st.data, st.vae);

    st.gp = init_gp(cfg.latent_dim, cfg.gp, st.rng);
    st.tr = region_from(cfg, st.data.samples[st.best_index].z);
    if (!cfg.baseline_lsbo) apply_retrain(st);
    return st;
}

std::vector<ObjectiveSample> bo_step(LoopState& st) {
    std::vector<ObjectiveSample> out;
    if (st.data.oracle_calls >= st.cfg.budget) return out;
    ++st.steps;
    const bool cobo = !st.cfg.baseline_lsbo;

    if (cobo && st.fail_accum >= st.cfg.n_fail) apply_retrain(st);

    Batch topk = topk_select(st.data, st.cfg.topk);
    GpTrain train{topk.latents, topk.objectives};
    if (st.cfg.recent_window > 0 && st.data.size() > 0) {
        // Recent evaluations below the top-k cutoff still inform the fit:
        // without them the surrogate never learns where sampling failed and
        // keeps proposing the same low-scoring regions.
        std::set<SequenceX> in_topk(topk.sequences.begin(), topk.sequences.end());
        const std::size_t w = std::min(st.cfg.recent_window, st.data.size());
        for (std::size_t i = st.data.size() - w; i < st.data.size(); ++i) {
            const ObjectiveSample& s = st.data.samples[i];
            if (in_topk.count(s.x)) continue;
            train.latents.push_back(s.z);
            train.objectives.push_back(score_of(st.data.maximize, s.y));
        }
    }
    train.latents.insert(train.latents.end(), st.reobs_z.begin(), st.reobs_z.end());
    train.objectives.insert(train.objectives.end(), st.reobs_score.begin(),
                            st.reobs_score.end());
    st.gp = fit_surrogate(st.gp, train, st.cfg.gp_fit_steps, st.cfg.gp_lr, st.rng);

    const std::size_t count = st.cfg.candidates_per_batch ? st.cfg.candidates_per_batch
                                                          : 100 * st.cfg.batch_size;
    std::vector<LatentZ> cands;
    if (cobo) {
        cands = tr_candidates(st, topk, count);
    } else {
        cands.reserve(count);
        for (std::size_t k = 0; k < count; ++k) {
            LatentZ z(st.cfg.latent_dim);
            for (auto& v : z) v = st.rng.normal();
            cands.push_back(std::move(z));
        }
    }
    std::vector<LatentZ> picks =
        thompson_select(st.gp, cands, std::min(st.cfg.batch_size, cands.size()), st.rng);

    const double side_used = cobo ? st.tr.side : 0.0;
    bool improved = false;
    for (auto& z : picks) {
        if (st.data.oracle_calls >= st.cfg.budget) break;
        SequenceX x = decode_map(st.vae, z);
        auto hit = st.data.seen.find(x);
        if (hit != st.data.seen.end()) {
            // Duplicate decode: no oracle call. Up to the per-sequence cap,
            // pair the fresh latent with the memoized value so the next
            // surrogate fit learns this region is exhausted.
            if (st.reobs_counts[x] < st.cfg.reobs_per_seq) {
                ++st.reobs_counts[x];
                st.reobs_z.push_back(std::move(z));
                st.reobs_score.push_back(score_of(st.data.maximize, hit->second));
            }
            continue;
        }
        const double y = st.task.oracle(x);
        if (record_sample(st, std::move(x), std::move(z), y, side_used)) improved = true;
        out.push_back(st.data.samples.back());
    }

    if (cobo) {
        TrUpdate upd = tr_update(st.tr, improved);
        if (upd.needs_restart) {
            st.tr = region_from(st.cfg, st.data.samples[st.best_index].z);
            st.history.events.push_back("trust region restarted at call " +
                                        std::to_string(st.data.oracle_calls));
        } else {
            st.tr = upd.state;
        }
        if (improved)
            st.fail_accum = 0;
        else
            ++st.fail_accum;
    }
    return out;
}

RunHistory run_bo(const RunConfig& cfg) {
    LoopState st = make_loop_state(cfg);
    const std::size_t per = std::max<std::size_t>(1, cfg.batch_size);
    const std::size_t remaining = cfg.budget - cfg.n_init;
    const std::size_t step_budget = (remaining + per - 1) / per;
    const std::size_t guard =
        cfg.max_steps ? cfg.max_steps : 10 * std::max<std::size_t>(1, step_budget);

    while (st.data.oracle_calls < cfg.budget) {
        if (st.steps >= guard) {
            st.history.guard_tripped = true;
            st.history.events.push_back("step guard tripped after " +
                                        std::to_string(st.steps) + " steps");
            break;
        }
        bo_step(st);
    }
    st.history.best_x = st.data.samples[st.best_index].x;
    st.history.best_y = st.data.samples[st.best_index].y;
    st.history.oracle_calls = st.data.oracle_calls;
    return std::move(st.history);
}

void write_history_csv(const RunHistory& history, const std::string& path) {
    CsvWriter w(path, {"call", "y", "best_y", "tr_side", "loss_lip", "loss_z", "loss_recon",
                       "loss_kl", "loss_surr", "loss_total", "pearson"});
    for (const auto& r : history.rows) {
        const auto& bd = r.retrain_loss;
        w.row({CsvWriter::cell(r.call), CsvWriter::cell(r.y), CsvWriter::cell(r.best_y),
               CsvWriter::cell(r.tr_side), bd ? fmt_double(bd->lip) : "",
               bd ? fmt_double(bd->z) : "", bd ? fmt_double(bd->recon) : "",
               bd ? fmt_double(bd->kl) : "", bd ? fmt_double(bd->surr) : "",
               bd ? fmt_double(bd->total) : "", cell_opt(r.pearson)});
    }
}

void write_loss_trace_csv(const RunHistory& history, const std::string& path) {
    CsvWriter w(path, {"retrain", "at_call", "epoch", "lip", "z", "recon", "kl", "surr",
                       "total", "lipschitz_L"});
    for (const auto& rec : history.retrains)
        for (std::size_t e = 0; e < rec.trace.size(); ++e) {
            const auto& bd = rec.trace[e];
            w.row({CsvWriter::cell(rec.index), CsvWriter::cell(rec.at_call),
                   CsvWriter::cell(e), CsvWriter::cell(bd.lip), CsvWriter::cell(bd.z),
                   CsvWriter::cell(bd.recon), CsvWriter::cell(bd.kl), CsvWriter::cell(bd.surr),
                   CsvWriter::cell(bd.total), CsvWriter::cell(bd.lipschitz_L)});
        }
}

void write_correlation_trace_csv(const RunHistory& history, const std::string& path) {
    CsvWriter w(path, {"retrain", "at_call", "aborted", "pearson_before", "pearson_after",
                       "mu_dz", "var_dz", "mu_dy", "var_dy", "lipschitz", "bound"});
    for (const auto& rec : history.retrains) {
        std::string pb = rec.stats_before ? cell_opt(rec.stats_before->pearson) : "";
        std::string pa = rec.stats_after ? cell_opt(rec.stats_after->pearson) : "";
        const auto& sa = rec.stats_after;
        w.row({CsvWriter::cell(rec.index), CsvWriter::cell(rec.at_call),
               CsvWriter::cell(int(rec.aborted)), pb, pa, sa ? fmt_double(sa->mu_dz) : "",
               sa ? fmt_double(sa->var_dz) : "", sa ? fmt_double(sa->mu_dy) : "",
               sa ? fmt_double(sa->var_dy) : "", fmt_double(rec.lipschitz_after),
               cell_opt(rec.bound_after)});
    }
}

void write_dataset_csv(const Dataset& data, const std::string& path) {
    const std::size_t n = data.samples.empty() ? 0 : data.samples[0].z.size();
    std::vector<std::string> header = {"index", "x", "y"};
    for (std::size_t d = 0; d < n; ++d) header.push_back("z_" + std::to_string(d));
    CsvWriter w(path, header);
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const auto& s = data.samples[i];
        std::string xs;
        for (std::size_t t = 0; t < s.x.size(); ++t) {
            if (t) xs += ' ';
            xs += std::to_string(s.x[t]);
        }
        std::vector<std::string> cells = {CsvWriter::cell(i), xs, CsvWriter::cell(s.y)};
        for (double v : s.z) cells.push_back(fmt_double(v));
        w.row(cells);
    }
}

}  // namespace cobo
