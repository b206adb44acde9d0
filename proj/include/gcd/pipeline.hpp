#pragma once

#include <array>
#include <string>

#include "gcd/clustering.hpp"
#include "gcd/dataio.hpp"
#include "gcd/geometry.hpp"
#include "gcd/nnkit.hpp"

namespace gcd {

struct TrainConfig {
    std::size_t warmup_iters = 30;
    std::size_t main_epochs = 50;  // desk-scale; 500 is the documented full schedule
    double lr = 0.01;
    std::size_t batch_size = 256;
    std::size_t m_negatives = 20;
    double tau = 0.1;
    double sigma_jitter = 0.01;
    double eps_dbscan = 1.0;
    std::size_t min_pts = 4;
    double pin_threshold = 0.9;
    double lambda = 1.0;
    std::string k_method = "brent";  // brent | elbow
    std::size_t k_min = 0;           // 0 = |C_kwn|
    std::size_t k_max = 100;
    std::size_t k_fixed = 0;  // 0 = estimate from data
    std::size_t patience = 10;
    std::size_t hidden_dim = 256;
    std::size_t embed_dim = 64;
    double w_align = 0.1;
    double w_con_l = 1.0;
    double w_con_u = 0.25;
    double w_inp = 1.0;
    std::size_t quads_per_epoch = 128;
    bool per_batch_interleave = false;
    std::uint64_t seed = 0;

    void validate() const;
};

// Flat key=value text file mirroring the field names above.
TrainConfig load_config(const std::string& path);
std::string config_to_text(const TrainConfig& cfg);

struct EpochLosses {
    double align = 0.0;
    double con_l = 0.0;
    double con_u = 0.0;
    double inp = 0.0;
    bool inp_skipped = false;

    double composite() const { return con_l + con_u + inp; }
};

struct TrainerState {
    TrainConfig cfg;
    Dataset source;
    Dataset target;
    std::vector<int> known_ids;     // class rank -> original class id
    std::vector<int> source_ranks;  // source sample -> class rank
    Vec feat_mean, feat_scale;      // per-dim standardization over pooled D_L ∪ D_U
    Mlp f_e;
    Mlp f_disc;
    Mlp f_dec;
    Mlp head;  // warm-up classifier; unused after warm-up
    AdamState adam_e, adam_disc, adam_dec, adam_head;
    std::vector<EpochLosses> trace;

    std::size_t n_known() const { return known_ids.size(); }

    // Networks consume standardized features; raw scales differ wildly per dim.
    Vec standardize(Vec x) const {
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - feat_mean[j]) * feat_scale[j];
        return x;
    }
};

TrainerState make_state(Dataset source, Dataset target, const TrainConfig& cfg);

// Supervised warm-up of F_e + head on the labeled source.
void run_warmup(TrainerState& state);

// One alternating epoch: entropy-alignment stage, then the composite
// contrastive + inpainting stage.
EpochLosses run_epoch(TrainerState& state, std::size_t epoch_index);

// warm-up + main epochs with plateau early stopping.
void train(TrainerState& state);

struct RunReport {
    TrainConfig cfg;
    std::vector<EpochLosses> trace;
    bool labels_available = false;
    GcdMetrics metrics;
    std::size_t estimated_k = 0;
    double entropy_known_mean = 0.0;
    double entropy_novel_mean = 0.0;
    double entropy_auroc = 0.0;
    double wall_clock_sec = 0.0;  // not part of the canonical JSON

    // Canonical key-sorted JSON; excludes wall clock so identical runs
    // serialize byte-identically.
    std::string to_json() const;
    std::string to_csv() const;
};

struct InferenceOutput {
    ClusteringResult clustering;  // over source + target, source block first
    RunReport report;
};

InferenceOutput run_inference(TrainerState& state);

// Projector embeddings of every sample's pooled features.
std::vector<Vec> embed_all(const TrainerState& state, const Dataset& ds);

// Entropy of the Eq.-style distance profile for each target sample,
// against the source prototype bank in projector space.
std::vector<double> target_profile_entropies(const TrainerState& state);

// AUROC of `score` as a detector of `positive` (ties count half).
double auroc(const std::vector<double>& score, const std::vector<bool>& positive);

// First two principal components of the given embeddings (power iteration).
std::vector<std::array<double, 2>> pca2(const std::vector<Vec>& embeddings);

void save_checkpoint(const TrainerState& state, const std::string& path);

// Rebuilds a trainer state from a checkpoint plus the datasets it will be
// applied to.
TrainerState load_checkpoint(const std::string& path, Dataset source, Dataset target);

}  // namespace gcd
