// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cobo/analysis.hpp"
#include "cobo/losses.hpp"
#include "cobo/search.hpp"
#include "cobo/seqvae.hpp"
#include "cobo/surrogate.hpp"
#include "cobo/tasks.hpp"

namespace cobo {

/// One oracle-evaluated point. `y` is the raw oracle value; `z` is the
/// embedding under the current encoder and is refreshed after every retrain.
struct ObjectiveSample {
    SequenceX x;
    LatentZ z;
    double y = 0.0;
};

struct Dataset {
    std::vector<ObjectiveSample> samples;  // insertion order, unique sequences
    std::map<SequenceX, double> seen;      // memoized oracle values (dedup)
    std::size_t oracle_calls = 0;
    bool maximize = true;

    std::size_t size() const { return samples.size(); }
};

/// Independent toggles for the loss terms and the trust-region round trip.
/// A disabled term contributes nothing to the retrain gradient.
struct AblationFlags {
    bool lip = true;           // weighted pairwise-slope penalty
    bool zreg = true;          // latent-distance regularization
    bool weighting = true;     // objective-derived weights (off -> all 1)
    bool recoordinate = true;  // decode/encode round trip after retrain
};

/// Trust-region geometry and streak tolerances. A fail_tol of 0 derives
/// the conventional default max(4, latent_dim).
struct TrSettings {
    double init_side = kTrInitSide;
    double min_side = kTrMinSide;
    double max_side = kTrMaxSide;
    int success_tol = kTrSuccessTol;
    int fail_tol = 0;  // 0 -> max(4, latent_dim)
};

struct RunConfig {
    std::string task_id = "bitstring";
    std::uint64_t task_seed = 0;
    std::size_t budget = 500;  // total oracle calls, including initialization
    std::size_t n_init = 100;
    std::size_t batch_size = 5;
    std::size_t topk = 64;
    int n_fail = 10;           // failed steps before a latent retrain
    int retrain_epochs = 30;
    double retrain_lr = 0.01;

    std::size_t vae_hidden = 64;
    std::size_t latent_dim = 8;
    int pretrain_epochs = 200;
    double pretrain_lr = 0.01;
    double pretrain_kl = 0.1;
    std::size_t pretrain_corpus = 512;

    LossCoefficients coeffs;
    WeightingConfig weighting;
    TrSettings tr;
    GpConfig gp;
    std::size_t gp_fit_steps = 30;
    double gp_lr = 0.1;
    std::size_t candidates_per_batch = 0;  // 0 -> 100 * batch_size
    /// The per-step surrogate fit trains on the top-k batch plus this many
    /// of the most recent evaluations (and the re-observation buffer), so
    /// the sampler also learns from fresh low-scoring points that fall
    /// below the top-k cutoff. 0 restricts the fit to the top-k batch.
    std::size_t recent_window = 64;

    AblationFlags ablation;
    bool baseline_lsbo = false;  // frozen VAE, prior candidates, no retrains
    /// A selected candidate that decodes to a known sequence never consumes
    /// oracle budget. Up to this many times per sequence (per retrain
    /// window) its fresh latent is paired with the memoized value and fed
    /// to the surrogate fit only, which teaches the sampler the region is
    /// exhausted. The buffer is discarded whenever a retrain moves the
    /// latent space. 0 disables re-observation.
    int reobs_per_seq = 2;
    std::uint64_t seed = 0;
    std::size_t max_steps = 0;  // loop-step guard; 0 -> 10x the step budget
    std::size_t analysis_max_pairs = 100000;
    std::string snapshot_dir;  // when set, VAE/GP/dataset dumps per retrain
};

/// One row per oracle call. The loss breakdown and correlation refer to the
/// most recent retrain and are empty for calls made before the first one.
struct HistoryRow {
    std::size_t call = 0;  // 1-based oracle call index
    double y = 0.0;        // raw oracle value of this call
    double best_y = 0.0;   // raw value of the incumbent after this call
    double tr_side = 0.0;  // 0 during initialization
    std::optional<LossBreakdown> retrain_loss;
    std::optional<double> pearson;
};

struct RetrainRecord {
    std::size_t index = 0;
    std::size_t at_call = 0;  // oracle calls completed when the retrain fired
    bool aborted = false;
    std::vector<LossBreakdown> trace;  // per-epoch values before each step
    std::optional<CorrelationStats> stats_before, stats_after;
    double lipschitz_after = 0.0;  // slope constant of the re-embedded batch
    std::optional<double> bound_after;
};

struct RunHistory {
    std::vector<HistoryRow> rows;
    std::vector<RetrainRecord> retrains;
    std::vector<std::string> events;
    SequenceX best_x;
    double best_y = 0.0;  // raw value of the incumbent
    std::size_t oracle_calls = 0;
    bool guard_tripped = false;
};

/// N distinct random sequences (drawn from the task's corpus generator),
/// each evaluated once by the oracle.
Dataset init_dataset(const Task& task, std::size_t n_init, Rng& rng);

/// The k best samples by maximization score (raw y negated for minimization
/// tasks); ties keep the earliest-inserted sample. k > size returns all.
/// The returned Batch carries scores in `objectives`, not raw values.
Batch topk_select(const Dataset& data, std::size_t k);

struct RetrainResult {
    VaeParams vae;
    GpState gp;  // cache invalidated; recondition before posterior queries
    std::vector<LossBreakdown> trace;
    bool aborted = false;
    std::string abort_reason;
};

/// `retrain_epochs` Adam steps on the joint objective over the batch. The
/// slope threshold is recomputed from the current encoder means before each
/// epoch. A non-finite loss aborts and returns the original parameters.
RetrainResult retrain_latent(const VaeParams& vae, const GpState& gp, const Batch& batch,
                             const RunConfig& cfg, Rng& rng);

/// Everything a BO step reads and writes. Build with make_loop_state.
struct LoopState {
    Task task;
    RunConfig cfg;  // effective (ablation folded into coeffs/weighting)
    Dataset data;
    VaeParams vae;
    GpState gp;
    TrustRegionState tr;
    int fail_accum = 0;  // distinct from the trust-region failure counter
    double best_score = 0.0;
    std::size_t best_index = 0;
    std::optional<LossBreakdown> last_retrain_loss;
    std::optional<double> last_retrain_pearson;
    /// Re-observation buffer (latents + scores of duplicate decodes) mixed
    /// into the surrogate fit; valid only for the current latent space.
    std::vector<LatentZ> reobs_z;
    std::vector<double> reobs_score;
    std::map<SequenceX, int> reobs_counts;
    Rng rng = Rng(0);           // main stream: init, VAE, GP, candidates, oracle
    Rng analysis_rng = Rng(0);  // dedicated stream: pair subsampling only
    std::size_t steps = 0;
    RunHistory history;
};

/// Initialization phase: dataset, VAE pretraining on the task corpus, GP
/// init, one startup retrain (skipped for the frozen-VAE baseline), trust
/// region centered on the incumbent.
LoopState make_loop_state(const RunConfig& cfg);

/// One acquisition round: optional N_fail-triggered retrain, surrogate
/// refit, candidate generation, Thompson picks, decode + dedup + oracle,
/// trust-region update. Duplicate decodes consume no oracle budget (they
/// feed the re-observation buffer instead). Returns the newly evaluated
/// samples only (possibly fewer than batch_size when duplicates were
/// decoded or the budget ran out).
std::vector<ObjectiveSample> bo_step(LoopState& state);

/// Full run: make_loop_state + bo_step until the budget (or step guard).
RunHistory run_bo(const RunConfig& cfg);

/// CSV emitters (RFC-style quoting, '\n' endings, header row first).
void write_history_csv(const RunHistory& history, const std::string& path);
void write_loss_trace_csv(const RunHistory& history, const std::string& path);
void write_correlation_trace_csv(const RunHistory& history, const std::string& path);
void write_dataset_csv(const Dataset& data, const std::string& path);

}  // namespace cobo
