#include "gcd/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gcd/losses.hpp"
#include "gcd/mining.hpp"

namespace gcd {

namespace {

using json = nlohmann::json;

std::map<std::string, std::string> parse_kv_lines(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(Err::InvalidConfig, "config line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

void apply_config_kv(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    auto as_u = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
    auto as_d = [](const std::string& s) { return std::stod(s); };
    for (const auto& [key, val] : kv) {
        try {
            if (key == "warmup_iters") cfg.warmup_iters = as_u(val);
            else if (key == "main_epochs") cfg.main_epochs = as_u(val);
            else if (key == "lr") cfg.lr = as_d(val);
            else if (key == "batch_size") cfg.batch_size = as_u(val);
            else if (key == "m_negatives") cfg.m_negatives = as_u(val);
            else if (key == "tau") cfg.tau = as_d(val);
            else if (key == "sigma_jitter") cfg.sigma_jitter = as_d(val);
            else if (key == "eps_dbscan") cfg.eps_dbscan = as_d(val);
            else if (key == "min_pts") cfg.min_pts = as_u(val);
            else if (key == "pin_threshold") cfg.pin_threshold = as_d(val);
            else if (key == "lambda") cfg.lambda = as_d(val);
            else if (key == "k_method") cfg.k_method = val;
            else if (key == "k_min") cfg.k_min = as_u(val);
            else if (key == "k_max") cfg.k_max = as_u(val);
            else if (key == "k_fixed") cfg.k_fixed = as_u(val);
            else if (key == "patience") cfg.patience = as_u(val);
            else if (key == "hidden_dim") cfg.hidden_dim = as_u(val);
            else if (key == "embed_dim") cfg.embed_dim = as_u(val);
            else if (key == "w_align") cfg.w_align = as_d(val);
            else if (key == "w_con_l") cfg.w_con_l = as_d(val);
            else if (key == "w_con_u") cfg.w_con_u = as_d(val);
            else if (key == "w_inp") cfg.w_inp = as_d(val);
            else if (key == "quads_per_epoch") cfg.quads_per_epoch = as_u(val);
            else if (key == "per_batch_interleave") cfg.per_batch_interleave = val == "1" || val == "true";
            else if (key == "seed") cfg.seed = std::stoull(val);
            else throw Error(Err::InvalidConfig, "unknown config key: " + key);
        } catch (const std::invalid_argument&) {
            throw Error(Err::InvalidConfig, "bad value for config key " + key);
        } catch (const std::out_of_range&) {
            throw Error(Err::InvalidConfig, "out-of-range value for config key " + key);
        }
    }
}

Vec onehot(std::size_t idx, std::size_t n) {
    Vec v(n, 0.0);
    v[idx] = 1.0;
    return v;
}

// Pooled input with one patch zeroed out (the inpainting query view).
Vec pooled_masked(const Dataset& ds, std::size_t i, std::size_t masked_patch) {
    Vec p(ds.patch_dim, 0.0);
    const Mat& m = ds.samples[i].patches;
    for (std::size_t r = 0; r < m.rows; ++r) {
        if (r == masked_patch) continue;
        for (std::size_t c = 0; c < m.cols; ++c) p[c] += m(r, c);
    }
    for (double& x : p) x /= static_cast<double>(m.rows);
    return p;
}

Vec patch_row(const Dataset& ds, std::size_t i, std::size_t patch) {
    Vec v(ds.patch_dim);
    for (std::size_t c = 0; c < ds.patch_dim; ++c) v[c] = ds.samples[i].patches(patch, c);
    return v;
}

void adam_update(Mlp& net, AdamState& adam, const MlpGrads& grads) {
    Vec params = net.flatten();
    adam_step(adam, params, grads.flatten());
    net.unflatten(params);
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

// combined index helpers: [0, n_src) = source, [n_src, ...) = target
Vec combined_pooled(const TrainerState& s, std::size_t idx) {
    return s.standardize(idx < s.source.size() ? s.source.pooled(idx)
                                               : s.target.pooled(idx - s.source.size()));
}

struct CachedForward {
    Vec z;
    GradTape tape;
    Vec dz;  // accumulated upstream gradient
};

struct ForwardCache {
    std::map<std::size_t, CachedForward> entries;

    CachedForward& get(const TrainerState& s, std::size_t combined_idx) {
        auto it = entries.find(combined_idx);
        if (it != entries.end()) return it->second;
        CachedForward cf;
        cf.z = forward(s.f_e, combined_pooled(s, combined_idx), &cf.tape);
        cf.dz = Vec(cf.z.size(), 0.0);
        return entries.emplace(combined_idx, std::move(cf)).first->second;
    }

    void backprop_into(const TrainerState& s, MlpGrads& ge) {
        for (auto& [idx, cf] : entries) backward(s.f_e, cf.tape, cf.dz, &ge);
    }
};

double mean_feature_std(const std::vector<Vec>& emb) {
    if (emb.empty()) return 0.0;
    std::size_t d = emb.front().size();
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0, sq = 0.0;
        for (const Vec& e : emb) mean += e[j];
        mean /= static_cast<double>(emb.size());
        for (const Vec& e : emb) sq += (e[j] - mean) * (e[j] - mean);
        acc += std::sqrt(sq / static_cast<double>(emb.size()));
    }
    return acc / static_cast<double>(d);
}

struct EpochContext {
    PrototypeBank proto_e;     // projector space
    PrototypeBank proto_disc;  // discriminator space
};

EpochContext build_banks(const TrainerState& s) {
    EpochContext ctx;
    std::vector<Vec> e_src = embed_all(s, s.source);
    ctx.proto_e = compute_prototypes(e_src, s.source_ranks, s.n_known());
    std::vector<Vec> d_src(e_src.size());
    for (std::size_t i = 0; i < e_src.size(); ++i) d_src[i] = forward(s.f_disc, e_src[i]);
    ctx.proto_disc = compute_prototypes(d_src, s.source_ranks, s.n_known());
    return ctx;
}

// One adversarial alignment step on a target minibatch.
double align_step(TrainerState& s, const EpochContext& ctx,
                  const std::vector<std::size_t>& batch) {
    std::vector<Vec> zs(batch.size()), hs(batch.size());
    std::vector<GradTape> tapes_e(batch.size()), tapes_d(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        zs[b] = forward(s.f_e, s.standardize(s.target.pooled(batch[b])), &tapes_e[b]);
        hs[b] = forward(s.f_disc, zs[b], &tapes_d[b]);
    }
    AlignResult ar = loss_align(hs, ctx.proto_disc);

    MlpGrads gd = MlpGrads::zeros_like(s.f_disc);
    MlpGrads ge = MlpGrads::zeros_like(s.f_e);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Vec dz = backward(s.f_disc, tapes_d[b], ar.grads[b], &gd);
        backward(s.f_e, tapes_e[b], dz, &ge);
    }
    // discriminator ascends (reversed gradient, strength lambda); projector
    // descends, damped by w_align so alignment nudges the embedding instead
    // of flattening the class structure the other losses build
    Vec disc_params = s.f_disc.flatten();
    adam_step(s.adam_disc, disc_params, grad_reverse(gd.flatten(), s.cfg.lambda));
    s.f_disc.unflatten(disc_params);
    ge.scale_by(s.cfg.w_align);
    adam_update(s.f_e, s.adam_e, ge);
    return ar.value;
}

struct StageBInputs {
    std::vector<Vec> pool_jitter;              // per pool element (zero for originals)
    std::vector<std::size_t> pool_origin;      // target index per pool element
    NeighborAssignment neighbors;
    std::vector<Quadruplet> quads;             // indices into combined source+target
    bool have_quads = false;
};

StageBInputs mine_stage_b(TrainerState& s, std::size_t epoch_index) {
    StageBInputs in;
    std::vector<Vec> e_src = embed_all(s, s.source);
    std::vector<Vec> e_tgt = embed_all(s, s.target);

    // over-clustering on the union for quadruplet proposals
    std::vector<Vec> e_all = e_src;
    e_all.insert(e_all.end(), e_tgt.begin(), e_tgt.end());
    std::vector<int> clusters = dbscan(e_all, s.cfg.eps_dbscan, s.cfg.min_pts);
    try {
        in.quads = sample_quadruplets(clusters, s.cfg.quads_per_epoch, s.target.n_patches,
                                      s.cfg.seed + 3000 + epoch_index);
        in.have_quads = true;
    } catch (const Error& e) {
        if (e.code() != Err::InsufficientClusters) throw;
        std::cerr << "warning: epoch " << epoch_index
                  << ": too few DBSCAN clusters, skipping inpainting loss\n";
    }

    double sigma = s.cfg.sigma_jitter * mean_feature_std(e_tgt);
    AugmentedPool pool = augment(e_tgt, sigma, s.cfg.seed + 4000 + epoch_index);
    in.pool_origin = pool.origin;
    in.pool_jitter.resize(pool.size());
    for (std::size_t j = 0; j < pool.size(); ++j) {
        in.pool_jitter[j] = Vec(pool.embeddings[j].size(), 0.0);
        for (std::size_t c = 0; c < pool.embeddings[j].size(); ++c)
            in.pool_jitter[j][c] = pool.embeddings[j][c] - e_tgt[pool.origin[j]][c];
    }

    EpochContext banks = build_banks(s);
    std::vector<Vec> profiles(pool.size());
    for (std::size_t j = 0; j < pool.size(); ++j)
        profiles[j] = distance_profile(forward(s.f_disc, pool.embeddings[j]), banks.proto_disc);
    in.neighbors = mine_neighbors(profiles, s.cfg.m_negatives);
    return in;
}

struct StageBStepLosses {
    double con_l = 0.0, con_u = 0.0, inp = 0.0;
};

StageBStepLosses composite_step(TrainerState& s, const EpochContext& ctx,
                                const StageBInputs& mined,
                                const std::vector<std::size_t>& anchor_batch,
                                const std::vector<std::size_t>& source_batch,
                                const std::vector<Quadruplet>& quad_batch) {
    std::size_t n_src = s.source.size();
    ForwardCache cache;
    StageBStepLosses losses;
    MlpGrads ge = MlpGrads::zeros_like(s.f_e);
    MlpGrads gdec = MlpGrads::zeros_like(s.f_dec);

    // L_con^l over the source batch
    if (!source_batch.empty()) {
        double w = s.cfg.w_con_l / static_cast<double>(source_batch.size());
        for (std::size_t i : source_batch) {
            CachedForward& cf = cache.get(s, i);
            LossGrad lg = loss_con_source(cf.z, ctx.proto_e, s.source_ranks[i]);
            losses.con_l += lg.value / static_cast<double>(source_batch.size());
            for (std::size_t c = 0; c < cf.dz.size(); ++c) cf.dz[c] += w * lg.grad[c];
        }
    }

    // L_con^u over the anchor batch with mined neighbors
    if (!anchor_batch.empty()) {
        double w = s.cfg.w_con_u / static_cast<double>(anchor_batch.size());
        auto pool_embedding = [&](std::size_t j) {
            CachedForward& cf = cache.get(s, n_src + mined.pool_origin[j]);
            Vec e = cf.z;
            for (std::size_t c = 0; c < e.size(); ++c) e[c] += mined.pool_jitter[j][c];
            return e;
        };
        for (std::size_t a : anchor_batch) {  // anchors are original pool elements
            ContrastSet set;
            set.tau = s.cfg.tau;
            set.anchor = pool_embedding(a);
            std::size_t pos = mined.neighbors.positive[a];
            set.positive = pool_embedding(pos);
            const auto& negs = mined.neighbors.negatives[a];
            for (std::size_t m : negs) set.negatives.push_back(pool_embedding(m));
            ContrastGrad cg = loss_con_target(set);
            losses.con_u += cg.value / static_cast<double>(anchor_batch.size());

            auto add_dz = [&](std::size_t j, const Vec& g) {
                CachedForward& cf = cache.get(s, n_src + mined.pool_origin[j]);
                for (std::size_t c = 0; c < g.size(); ++c) cf.dz[c] += w * g[c];
            };
            add_dz(a, cg.d_anchor);
            add_dz(pos, cg.d_positive);
            for (std::size_t m = 0; m < negs.size(); ++m) add_dz(negs[m], cg.d_negatives[m]);
        }
    }

    // L_inp over the quadruplet batch
    if (!quad_batch.empty()) {
        double w = s.cfg.w_inp / static_cast<double>(quad_batch.size());
        std::size_t n_patches = s.target.n_patches;
        for (const Quadruplet& q : quad_batch) {
            const Dataset& ds_x = q.x < n_src ? s.source : s.target;
            std::size_t local_x = q.x < n_src ? q.x : q.x - n_src;

            GradTape tape_masked;
            Vec z_masked = forward(
                s.f_e, s.standardize(pooled_masked(ds_x, local_x, q.masked_patch)), &tape_masked);
            Vec truth = s.standardize(patch_row(ds_x, local_x, q.masked_patch));
            Vec mask_hot = onehot(q.masked_patch, n_patches);

            struct Path {
                std::size_t cond_idx;
                GradTape tape_dec;
                Vec dec_out;
                LossGrad recon;
            };
            std::array<Path, 3> paths{Path{q.x}, Path{q.x_sim}, Path{q.x_diff}};
            for (Path& p : paths) {
                CachedForward& cond = cache.get(s, p.cond_idx);
                Vec u = z_masked;
                u.insert(u.end(), cond.z.begin(), cond.z.end());
                u.insert(u.end(), mask_hot.begin(), mask_hot.end());
                p.dec_out = forward(s.f_dec, u, &p.tape_dec);
                p.recon = loss_recon(p.dec_out, truth);
            }
            double w_self, w_sim, w_diff;
            double l = loss_inpaint(paths[0].recon.value, paths[1].recon.value,
                                    paths[2].recon.value, &w_self, &w_sim, &w_diff);
            losses.inp += l / static_cast<double>(quad_batch.size());

            Vec dz_masked(z_masked.size(), 0.0);
            const double path_w[3] = {w_self, w_sim, w_diff};
            for (std::size_t pi = 0; pi < 3; ++pi) {
                if (path_w[pi] == 0.0) continue;
                Path& p = paths[pi];
                Vec ddec(p.recon.grad.size());
                for (std::size_t c = 0; c < ddec.size(); ++c)
                    ddec[c] = w * path_w[pi] * p.recon.grad[c];
                Vec du = backward(s.f_dec, p.tape_dec, ddec, &gdec);
                std::size_t ed = z_masked.size();
                for (std::size_t c = 0; c < ed; ++c) dz_masked[c] += du[c];
                CachedForward& cond = cache.get(s, p.cond_idx);
                for (std::size_t c = 0; c < cond.z.size(); ++c) cond.dz[c] += du[ed + c];
            }
            backward(s.f_e, tape_masked, dz_masked, &ge);
        }
    }

    cache.backprop_into(s, ge);
    adam_update(s.f_e, s.adam_e, ge);
    if (!quad_batch.empty()) adam_update(s.f_dec, s.adam_dec, gdec);
    return losses;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        std::size_t hi = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + i, order.begin() + hi);
    }
    return batches;
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0 || batch_size < 1 || m_negatives < 1 || tau <= 0.0 || sigma_jitter < 0.0 ||
        eps_dbscan <= 0.0 || min_pts < 1 || lambda < 0.0 || patience < 1 || hidden_dim < 1 ||
        embed_dim < 1 || w_align < 0.0 || w_con_l < 0.0 || w_con_u < 0.0 || w_inp < 0.0 ||
        quads_per_epoch < 1)
        throw Error(Err::InvalidConfig, "config value out of range");
    if (k_method != "brent" && k_method != "elbow")
        throw Error(Err::InvalidConfig, "k_method must be brent or elbow");
    if (k_min != 0 && k_max < k_min) throw Error(Err::InvalidConfig, "k_max below k_min");
}

TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(Err::InvalidConfig, "cannot open config " + path);
    TrainConfig cfg;
    apply_config_kv(cfg, parse_kv_lines(f));
    cfg.validate();
    return cfg;
}

std::string config_to_text(const TrainConfig& c) {
    std::ostringstream out;
    out << "warmup_iters=" << c.warmup_iters << '\n'
        << "main_epochs=" << c.main_epochs << '\n'
        << "lr=" << c.lr << '\n'
        << "batch_size=" << c.batch_size << '\n'
        << "m_negatives=" << c.m_negatives << '\n'
        << "tau=" << c.tau << '\n'
        << "sigma_jitter=" << c.sigma_jitter << '\n'
        << "eps_dbscan=" << c.eps_dbscan << '\n'
        << "min_pts=" << c.min_pts << '\n'
        << "pin_threshold=" << c.pin_threshold << '\n'
        << "lambda=" << c.lambda << '\n'
        << "k_method=" << c.k_method << '\n'
        << "k_min=" << c.k_min << '\n'
        << "k_max=" << c.k_max << '\n'
        << "k_fixed=" << c.k_fixed << '\n'
        << "patience=" << c.patience << '\n'
        << "hidden_dim=" << c.hidden_dim << '\n'
        << "embed_dim=" << c.embed_dim << '\n'
        << "w_align=" << c.w_align << '\n'
        << "w_con_l=" << c.w_con_l << '\n'
        << "w_con_u=" << c.w_con_u << '\n'
        << "w_inp=" << c.w_inp << '\n'
        << "quads_per_epoch=" << c.quads_per_epoch << '\n'
        << "per_batch_interleave=" << (c.per_batch_interleave ? 1 : 0) << '\n'
        << "seed=" << c.seed << '\n';
    return out.str();
}

std::vector<Vec> embed_all(const TrainerState& state, const Dataset& ds) {
    std::vector<Vec> out(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        out[i] = forward(state.f_e, state.standardize(ds.pooled(i)));
    return out;
}

TrainerState make_state(Dataset source, Dataset target, const TrainConfig& cfg) {
    cfg.validate();
    source.validate();
    target.validate();
    if (source.patch_dim != target.patch_dim || source.n_patches != target.n_patches)
        throw Error(Err::ShapeMismatch, "source/target patch shapes differ");
    if (source.size() == 0) throw Error(Err::EmptyBatch, "empty source dataset");

    TrainerState s;
    s.cfg = cfg;
    s.source = std::move(source);
    s.target = std::move(target);

    if (s.source.known_classes.empty())
        for (const Sample& smp : s.source.samples) s.source.known_classes.insert(smp.label);
    s.known_ids.assign(s.source.known_classes.begin(), s.source.known_classes.end());
    std::map<int, int> rank_of;
    for (std::size_t r = 0; r < s.known_ids.size(); ++r) rank_of[s.known_ids[r]] = int(r);
    s.source_ranks.resize(s.source.size());
    for (std::size_t i = 0; i < s.source.size(); ++i) {
        auto it = rank_of.find(s.source.samples[i].label);
        if (it == rank_of.end())
            throw Error(Err::LabelOutOfRange, "source label outside known classes");
        s.source_ranks[i] = it->second;
    }

    std::size_t d = s.source.patch_dim;
    std::size_t np = s.source.n_patches;

    // per-dim standardization statistics over pooled D_L ∪ D_U
    std::size_t n_all = s.source.size() + s.target.size();
    s.feat_mean.assign(d, 0.0);
    s.feat_scale.assign(d, 1.0);
    Vec sq(d, 0.0);
    auto accumulate = [&](const Dataset& ds) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            Vec p = ds.pooled(i);
            for (std::size_t j = 0; j < d; ++j) {
                s.feat_mean[j] += p[j];
                sq[j] += p[j] * p[j];
            }
        }
    };
    accumulate(s.source);
    accumulate(s.target);
    for (std::size_t j = 0; j < d; ++j) {
        s.feat_mean[j] /= static_cast<double>(n_all);
        double var = sq[j] / static_cast<double>(n_all) - s.feat_mean[j] * s.feat_mean[j];
        s.feat_scale[j] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }

    Rng rng_e = sub_rng(cfg.seed, 5), rng_d = sub_rng(cfg.seed, 6), rng_dec = sub_rng(cfg.seed, 7),
        rng_h = sub_rng(cfg.seed, 8);
    s.f_e = Mlp::make({d, cfg.hidden_dim, cfg.embed_dim}, Act::Identity, true, rng_e);
    s.f_disc = Mlp::make({cfg.embed_dim, cfg.embed_dim, cfg.embed_dim}, Act::Identity, false,
                         rng_d);
    s.f_dec = Mlp::make({2 * cfg.embed_dim + np, cfg.hidden_dim, d}, Act::Identity, false,
                        rng_dec);
    s.head = Mlp::make({cfg.embed_dim, s.n_known()}, Act::Identity, false, rng_h);
    s.adam_e = AdamState(s.f_e.n_params(), cfg.lr);
    s.adam_disc = AdamState(s.f_disc.n_params(), cfg.lr);
    s.adam_dec = AdamState(s.f_dec.n_params(), cfg.lr);
    s.adam_head = AdamState(s.head.n_params(), cfg.lr);
    return s;
}

// One warm-up iteration is a full shuffled pass over the labeled source set.
void run_warmup(TrainerState& s) {
    Rng rng = sub_rng(s.cfg.seed, 100);
    for (std::size_t it = 0; it < s.cfg.warmup_iters; ++it) {
        std::vector<std::size_t> order = shuffled_indices(s.source.size(), rng);
        for (std::size_t start = 0; start < order.size(); start += s.cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + s.cfg.batch_size);
            MlpGrads ge = MlpGrads::zeros_like(s.f_e);
            MlpGrads gh = MlpGrads::zeros_like(s.head);
            double inv_b = 1.0 / static_cast<double>(stop - start);
            for (std::size_t b = start; b < stop; ++b) {
                std::size_t i = order[b];
                GradTape te, th;
                Vec z = forward(s.f_e, s.standardize(s.source.pooled(i)), &te);
                Vec logits = forward(s.head, z, &th);
                LossGrad lg = loss_warmup(logits, s.source_ranks[i], s.n_known());
                for (double& g : lg.grad) g *= inv_b;
                Vec dz = backward(s.head, th, lg.grad, &gh);
                backward(s.f_e, te, dz, &ge);
            }
            adam_update(s.head, s.adam_head, gh);
            adam_update(s.f_e, s.adam_e, ge);
        }
    }
}

EpochLosses run_epoch(TrainerState& s, std::size_t epoch_index) {
    if (s.target.size() == 0) throw Error(Err::EmptyBatch, "zero-length target");
    EpochLosses ep;

    // prototypes recomputed at epoch start, frozen within the epoch
    EpochContext ctx = build_banks(s);

    Rng rng_a = sub_rng(s.cfg.seed, 1000 + epoch_index);
    auto a_batches = make_batches(shuffled_indices(s.target.size(), rng_a), s.cfg.batch_size);

    StageBInputs mined;
    std::vector<std::vector<std::size_t>> b_anchor_batches;
    std::vector<std::vector<std::size_t>> b_source_batches;
    std::vector<std::vector<Quadruplet>> b_quad_batches;

    auto prepare_stage_b = [&]() {
        mined = mine_stage_b(s, epoch_index);
        ep.inp_skipped = !mined.have_quads;
        Rng rng_b = sub_rng(s.cfg.seed, 2000 + epoch_index);
        b_anchor_batches =
            make_batches(shuffled_indices(s.target.size(), rng_b), s.cfg.batch_size);
        std::size_t n_steps = b_anchor_batches.size();
        Rng rng_s = sub_rng(s.cfg.seed, 2100 + epoch_index);
        std::vector<std::size_t> src_order = shuffled_indices(s.source.size(), rng_s);
        std::size_t cursor = 0;
        b_source_batches.resize(n_steps);
        for (std::size_t st = 0; st < n_steps; ++st)
            for (std::size_t b = 0; b < s.cfg.batch_size; ++b) {
                if (cursor == src_order.size()) {
                    src_order = shuffled_indices(s.source.size(), rng_s);
                    cursor = 0;
                }
                b_source_batches[st].push_back(src_order[cursor++]);
            }
        b_quad_batches.resize(n_steps);
        if (mined.have_quads) {
            std::size_t per = (mined.quads.size() + n_steps - 1) / n_steps;
            for (std::size_t st = 0; st < n_steps; ++st) {
                std::size_t lo = st * per, hi = std::min(mined.quads.size(), lo + per);
                if (lo < hi)
                    b_quad_batches[st].assign(mined.quads.begin() + lo,
                                              mined.quads.begin() + hi);
            }
        }
    };

    std::size_t a_done = 0, b_done = 0;
    auto run_a = [&](std::size_t i) { ep.align += align_step(s, ctx, a_batches[i]); ++a_done; };
    auto run_b = [&](std::size_t i) {
        StageBStepLosses l = composite_step(s, ctx, mined, b_anchor_batches[i],
                                            b_source_batches[i], b_quad_batches[i]);
        ep.con_l += l.con_l;
        ep.con_u += l.con_u;
        ep.inp += l.inp;
        ++b_done;
    };

    if (s.cfg.per_batch_interleave) {
        prepare_stage_b();
        std::size_t n = std::max(a_batches.size(), b_anchor_batches.size());
        for (std::size_t i = 0; i < n; ++i) {
            if (i < a_batches.size()) run_a(i);
            if (i < b_anchor_batches.size()) run_b(i);
        }
    } else {
        for (std::size_t i = 0; i < a_batches.size(); ++i) run_a(i);
        prepare_stage_b();  // mined on post-alignment embeddings
        for (std::size_t i = 0; i < b_anchor_batches.size(); ++i) run_b(i);
    }

    if (a_done) ep.align /= static_cast<double>(a_done);
    if (b_done) {
        ep.con_l /= static_cast<double>(b_done);
        ep.con_u /= static_cast<double>(b_done);
        ep.inp /= static_cast<double>(b_done);
    }
    if (!std::isfinite(ep.align) || !std::isfinite(ep.composite()))
        throw Error(Err::NonFiniteValue, "non-finite epoch loss");
    return ep;
}

void train(TrainerState& s) {
    run_warmup(s);
    double best = std::numeric_limits<double>::max();
    std::size_t since_best = 0;
    for (std::size_t e = 0; e < s.cfg.main_epochs; ++e) {
        EpochLosses ep = run_epoch(s, e);
        s.trace.push_back(ep);
        if (ep.composite() < best - 1e-4) {
            best = ep.composite();
            since_best = 0;
        } else if (++since_best >= s.cfg.patience) {
            break;
        }
    }
}

std::vector<double> target_profile_entropies(const TrainerState& s) {
    std::vector<Vec> e_src = embed_all(s, s.source);
    PrototypeBank bank = compute_prototypes(e_src, s.source_ranks, s.n_known());
    std::vector<double> out(s.target.size());
    for (std::size_t i = 0; i < s.target.size(); ++i)
        out[i] = entropy(distance_profile(forward(s.f_e, s.standardize(s.target.pooled(i))), bank));
    return out;
}

double auroc(const std::vector<double>& score, const std::vector<bool>& positive) {
    if (score.size() != positive.size())
        throw Error(Err::ShapeMismatch, "auroc input size mismatch");
    double n_pos = 0.0, n_neg = 0.0, wins = 0.0;
    for (std::size_t i = 0; i < score.size(); ++i) {
        if (!positive[i]) continue;
        ++n_pos;
        for (std::size_t j = 0; j < score.size(); ++j) {
            if (positive[j]) continue;
            if (score[i] > score[j])
                wins += 1.0;
            else if (score[i] == score[j])
                wins += 0.5;
        }
    }
    for (bool p : positive)
        if (!p) ++n_neg;
    if (n_pos == 0.0 || n_neg == 0.0) throw Error(Err::EmptyBatch, "auroc needs both classes");
    return wins / (n_pos * n_neg);
}

std::vector<std::array<double, 2>> pca2(const std::vector<Vec>& embeddings) {
    if (embeddings.empty()) return {};
    std::size_t n = embeddings.size(), d = embeddings.front().size();
    Vec mean(d, 0.0);
    for (const Vec& e : embeddings)
        for (std::size_t j = 0; j < d; ++j) mean[j] += e[j] / static_cast<double>(n);

    auto cov_mul = [&](const Vec& v) {
        Vec out(d, 0.0);
        for (const Vec& e : embeddings) {
            double proj = 0.0;
            for (std::size_t j = 0; j < d; ++j) proj += (e[j] - mean[j]) * v[j];
            for (std::size_t j = 0; j < d; ++j) out[j] += proj * (e[j] - mean[j]);
        }
        for (double& x : out) x /= static_cast<double>(n);
        return out;
    };

    std::vector<Vec> comps;
    Rng rng = sub_rng(12345, 0);
    std::normal_distribution<double> g;
    for (int c = 0; c < 2; ++c) {
        Vec v(d);
        for (double& x : v) x = g(rng);
        for (int it = 0; it < 100; ++it) {
            Vec w = cov_mul(v);
            for (const Vec& prev : comps) {  // deflate
                double p = dot(w, prev);
                for (std::size_t j = 0; j < d; ++j) w[j] -= p * prev[j];
            }
            double nw = norm2(w);
            if (nw < 1e-15) break;
            for (double& x : w) x /= nw;
            v = w;
        }
        comps.push_back(v);
    }
    std::vector<std::array<double, 2>> out(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 2; ++c) {
            double p = 0.0;
            for (std::size_t j = 0; j < d; ++j) p += (embeddings[i][j] - mean[j]) * comps[c][j];
            out[i][c] = p;
        }
    return out;
}

InferenceOutput run_inference(TrainerState& s) {
    std::vector<Vec> e_src = embed_all(s, s.source);
    std::vector<Vec> e_tgt = embed_all(s, s.target);
    std::vector<Vec> e_all = e_src;
    e_all.insert(e_all.end(), e_tgt.begin(), e_tgt.end());

    std::size_t k_min = s.cfg.k_min ? s.cfg.k_min : s.n_known();
    std::size_t k_max = std::min(s.cfg.k_max, e_all.size() - 1);
    std::size_t K;
    if (s.cfg.k_fixed) {
        K = s.cfg.k_fixed;
        if (K < s.n_known()) throw Error(Err::BadK, "k_fixed below |C_kwn|");
    } else {
        KMethod method = s.cfg.k_method == "brent" ? KMethod::Brent : KMethod::Elbow;
        K = estimate_k(e_all, s.source_ranks, s.n_known(), k_min, k_max, method, s.cfg.seed);
    }

    PrototypeBank bank = compute_prototypes(e_src, s.source_ranks, s.n_known());
    PinSet pins;
    for (std::size_t i = 0; i < e_src.size(); ++i)
        pins.pins[i] = static_cast<std::size_t>(s.source_ranks[i]);
    for (const auto& [ti, k] : confident_pseudo_pins(e_tgt, bank.prototypes, s.cfg.pin_threshold))
        pins.pins[e_src.size() + ti] = k;

    InferenceOutput out;
    out.clustering = ss_kmeans(e_all, K, pins, s.cfg.seed, &bank.prototypes);

    out.report.cfg = s.cfg;
    out.report.trace = s.trace;
    out.report.estimated_k = K;

    out.report.labels_available =
        std::all_of(s.target.samples.begin(), s.target.samples.end(),
                    [](const Sample& t) { return t.label != kUnlabeled; });
    if (out.report.labels_available && s.target.size() > 0) {
        std::vector<int> assign(s.target.size()), labels(s.target.size());
        for (std::size_t i = 0; i < s.target.size(); ++i) {
            assign[i] = out.clustering.assignment[e_src.size() + i];
            labels[i] = s.target.samples[i].label;
        }
        out.report.metrics = gcd_accuracy(assign, labels, s.source.known_classes);

        std::vector<double> ent(s.target.size());
        std::vector<bool> is_novel(s.target.size());
        double ks = 0.0, ns = 0.0;
        std::size_t kn = 0, nn = 0;
        for (std::size_t i = 0; i < s.target.size(); ++i) {
            ent[i] = entropy(distance_profile(e_tgt[i], bank));
            is_novel[i] = !s.source.known_classes.count(labels[i]);
            if (is_novel[i]) {
                ns += ent[i];
                ++nn;
            } else {
                ks += ent[i];
                ++kn;
            }
        }
        out.report.entropy_known_mean = kn ? ks / kn : 0.0;
        out.report.entropy_novel_mean = nn ? ns / nn : 0.0;
        out.report.entropy_auroc = (kn && nn) ? auroc(ent, is_novel) : 0.0;
    }
    return out;
}

std::string RunReport::to_json() const {
    json j;
    json jc;
    std::istringstream cfg_text(config_to_text(cfg));
    for (const auto& [k, v] : parse_kv_lines(cfg_text)) jc[k] = v;
    j["config"] = jc;
    j["estimated_k"] = estimated_k;
    j["labels_available"] = labels_available;
    if (labels_available) {
        j["metrics"] = {{"all", metrics.all},
                        {"old", metrics.old_acc},
                        {"new", metrics.new_acc},
                        {"n_old", metrics.n_old},
                        {"n_new", metrics.n_new}};
        j["entropy"] = {{"known_mean", entropy_known_mean},
                        {"novel_mean", entropy_novel_mean},
                        {"auroc", entropy_auroc}};
    } else {
        j["metrics"] = nullptr;
        j["entropy"] = nullptr;
    }
    json jt = json::array();
    for (const EpochLosses& e : trace)
        jt.push_back({{"align", e.align},
                      {"con_l", e.con_l},
                      {"con_u", e.con_u},
                      {"inp", e.inp},
                      {"inp_skipped", e.inp_skipped}});
    j["trace"] = jt;
    return j.dump(2) + "\n";
}

std::string RunReport::to_csv() const {
    std::ostringstream out;
    out << "all,old,new,estimated_k,entropy_auroc,entropy_known_mean,entropy_novel_mean,epochs\n";
    out << metrics.all << ',' << metrics.old_acc << ',' << metrics.new_acc << ','
        << estimated_k << ',' << entropy_auroc << ',' << entropy_known_mean << ','
        << entropy_novel_mean << ',' << trace.size() << '\n';
    return out.str();
}

namespace {

constexpr char kCkptMagic[4] = {'G', 'C', 'D', 'P'};

void write_blob(std::ostream& out, const Vec& flat) {
    std::uint32_t n = static_cast<std::uint32_t>(flat.size());
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(double)));
}

void write_net(std::ostream& out, const Mlp& net) { write_blob(out, net.flatten()); }

Vec read_blob(std::istream& in) {
    std::uint32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    if (!in) throw Error(Err::MalformedHeader, "truncated checkpoint");
    Vec flat(n);
    in.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw Error(Err::MalformedHeader, "truncated checkpoint blob");
    return flat;
}

}  // namespace

void save_checkpoint(const TrainerState& s, const std::string& path) {
    std::ostringstream meta;
    meta << config_to_text(s.cfg);
    meta << "ckpt_known_ids=";
    for (std::size_t i = 0; i < s.known_ids.size(); ++i)
        meta << (i ? "," : "") << s.known_ids[i];
    meta << "\nckpt_patch_dim=" << s.source.patch_dim
         << "\nckpt_n_patches=" << s.source.n_patches << '\n';
    std::string meta_s = meta.str();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Err::IoFailure, "cannot write " + path);
    f.write(kCkptMagic, 4);
    std::uint32_t version = 1, mlen = static_cast<std::uint32_t>(meta_s.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&mlen), 4);
    f.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
    // layer order within each net: W (row-major) then b, first layer first
    write_net(f, s.f_e);
    write_net(f, s.f_disc);
    write_net(f, s.f_dec);
    write_blob(f, s.feat_mean);
    write_blob(f, s.feat_scale);
    if (!f) throw Error(Err::IoFailure, "write failed for " + path);
}

TrainerState load_checkpoint(const std::string& path, Dataset source, Dataset target) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(Err::IoFailure, "cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw Error(Err::MalformedHeader, "not a checkpoint file");
    std::uint32_t version = 0, mlen = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&mlen), 4);
    if (!f) throw Error(Err::MalformedHeader, "truncated checkpoint header");
    if (version != 1) throw Error(Err::UnknownVersion, "unsupported checkpoint version");
    std::string meta_s(mlen, '\0');
    f.read(meta_s.data(), mlen);
    if (!f) throw Error(Err::MalformedHeader, "truncated checkpoint metadata");

    std::istringstream meta(meta_s);
    std::map<std::string, std::string> kv = parse_kv_lines(meta);
    std::map<std::string, std::string> cfg_kv;
    std::string known_ids_s;
    std::size_t patch_dim = 0, n_patches = 0;
    for (const auto& [k, v] : kv) {
        if (k == "ckpt_known_ids") known_ids_s = v;
        else if (k == "ckpt_patch_dim") patch_dim = std::stoull(v);
        else if (k == "ckpt_n_patches") n_patches = std::stoull(v);
        else cfg_kv[k] = v;
    }
    TrainConfig cfg;
    apply_config_kv(cfg, cfg_kv);
    if (source.patch_dim != patch_dim || source.n_patches != n_patches)
        throw Error(Err::ShapeMismatch, "checkpoint trained on different patch shape");

    TrainerState s = make_state(std::move(source), std::move(target), cfg);
    {
        std::set<int> ckpt_known;
        std::istringstream cs(known_ids_s);
        std::string tok;
        while (std::getline(cs, tok, ','))
            if (!tok.empty()) ckpt_known.insert(std::stoi(tok));
        if (ckpt_known != s.source.known_classes)
            throw Error(Err::LabelOutOfRange, "checkpoint known classes differ from source");
    }
    s.f_e.unflatten(read_blob(f));
    s.f_disc.unflatten(read_blob(f));
    s.f_dec.unflatten(read_blob(f));
    Vec fm = read_blob(f), fs = read_blob(f);
    if (fm.size() != s.feat_mean.size() || fs.size() != s.feat_scale.size())
        throw Error(Err::ShapeMismatch, "checkpoint standardization shape mismatch");
    s.feat_mean = std::move(fm);
    s.feat_scale = std::move(fs);
    return s;
}

}  // namespace gcd
