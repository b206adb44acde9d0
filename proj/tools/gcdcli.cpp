// Command-line front end: generate / train / eval / estimate-k / report.

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gcd/pipeline.hpp"

namespace {

using namespace gcd;

FileFormat format_of(const std::string& path) {
    return path.size() >= 4 && path.substr(path.size() - 4) == ".csv" ? FileFormat::CSV
                                                                      : FileFormat::GCDE;
}

// Source files must arrive labeled; derive C_kwn if the file predates it.
Dataset load_source(const std::string& path) {
    Dataset ds = load_dataset(path, format_of(path));
    for (Sample& s : ds.samples) {
        s.domain = Domain::Source;
        if (s.label == kUnlabeled)
            throw Error(Err::MissingLabels, "source dataset must be fully labeled");
    }
    if (ds.known_classes.empty())
        for (const Sample& s : ds.samples) ds.known_classes.insert(s.label);
    ds.validate();
    return ds;
}

Dataset load_target(const std::string& path) {
    Dataset ds = load_dataset(path, format_of(path));
    for (Sample& s : ds.samples) s.domain = Domain::Target;
    ds.validate();
    return ds;
}

TrainConfig config_from(const std::string& path, std::uint64_t seed_override, bool has_seed) {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
    if (has_seed) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(Err::IoFailure, "cannot write " + path);
    f << text;
}

int run(int argc, char** argv) {
    CLI::App app{"Across-domain generalized category discovery engine"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic cross-domain benchmark");
    SyntheticConfig syn;
    std::string out_source = "source.gcde", out_target = "target.gcde";
    double rotation = 0.0, scale = 1.0, translation = 0.0;
    gen->add_option("--n-known", syn.n_known);
    gen->add_option("--n-novel", syn.n_novel);
    gen->add_option("--patch-dim", syn.patch_dim);
    gen->add_option("--n-patches", syn.n_patches);
    gen->add_option("--samples-per-class", syn.samples_per_class);
    gen->add_option("--class-sep", syn.class_sep);
    gen->add_option("--noise-std", syn.noise_std);
    gen->add_option("--rotation-deg", rotation);
    gen->add_option("--scale", scale);
    gen->add_option("--translation", translation);
    gen->add_option("--seed", syn.seed);
    gen->add_option("--out-source", out_source);
    gen->add_option("--out-target", out_target);

    // train
    auto* tr = app.add_subcommand("train", "Train on a source/target pair");
    std::string src_path, tgt_path, cfg_path, out_path = "model.gcdp", report_path;
    std::uint64_t seed = 0;
    bool has_seed = false;
    tr->add_option("--source", src_path)->required();
    tr->add_option("--target", tgt_path)->required();
    tr->add_option("--config", cfg_path);
    tr->add_option("--out", out_path);
    tr->add_option("--report", report_path);
    auto* seed_opt = tr->add_option("--seed", seed, "Override the config seed");

    // eval
    auto* ev = app.add_subcommand("eval", "Cluster + score a target set with a checkpoint");
    std::string ckpt_path, pca_path;
    ev->add_option("--checkpoint", ckpt_path)->required();
    ev->add_option("--source", src_path)->required();
    ev->add_option("--target", tgt_path)->required();
    ev->add_option("--report", report_path);
    ev->add_option("--pca-out", pca_path);

    // estimate-k
    auto* ek = app.add_subcommand("estimate-k", "Estimate the cluster count");
    std::string method = "brent";
    std::size_t k_min = 0, k_max = 0;
    ek->add_option("--checkpoint", ckpt_path)->required();
    ek->add_option("--source", src_path)->required();
    ek->add_option("--target", tgt_path)->required();
    ek->add_option("--method", method)->check(CLI::IsMember({"brent", "elbow"}));
    ek->add_option("--k-min", k_min);
    ek->add_option("--k-max", k_max);

    // report
    auto* rp = app.add_subcommand("report", "Summarize a run report JSON as CSV");
    std::string in_report, out_csv;
    rp->add_option("--in", in_report)->required();
    rp->add_option("--out", out_csv);

    CLI11_PARSE(app, argc, argv);
    worker_threads();  // validate GCD_THREADS up front

    if (gen->parsed()) {
        syn.shift = DomainShift{rotation, scale, translation};
        auto [source, target] = generate_synthetic(syn);
        save_dataset(source, out_source, format_of(out_source));
        save_dataset(target, out_target, format_of(out_target));
        std::cout << "wrote " << out_source << " (" << source.size() << " samples), "
                  << out_target << " (" << target.size() << " samples)\n";
        return 0;
    }

    if (tr->parsed()) {
        has_seed = seed_opt->count() > 0;
        TrainConfig cfg = config_from(cfg_path, seed, has_seed);
        TrainerState state = make_state(load_source(src_path), load_target(tgt_path), cfg);
        auto t0 = std::chrono::steady_clock::now();
        train(state);
        save_checkpoint(state, out_path);
        InferenceOutput out = run_inference(state);
        out.report.wall_clock_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!report_path.empty()) write_text(report_path, out.report.to_json());
        std::cerr << "wall clock: " << out.report.wall_clock_sec << " s\n";
        std::cout << out.report.to_csv();
        return 0;
    }

    if (ev->parsed()) {
        TrainerState state = load_checkpoint(ckpt_path, load_source(src_path),
                                             load_target(tgt_path));
        InferenceOutput out = run_inference(state);
        if (!report_path.empty()) write_text(report_path, out.report.to_json());
        if (!pca_path.empty()) {
            std::vector<Vec> e_tgt = embed_all(state, state.target);
            auto proj = pca2(e_tgt);
            std::ostringstream csv;
            csv << "pc1,pc2,label,cluster\n";
            for (std::size_t i = 0; i < proj.size(); ++i)
                csv << proj[i][0] << ',' << proj[i][1] << ',' << state.target.samples[i].label
                    << ',' << out.clustering.assignment[state.source.size() + i] << '\n';
            write_text(pca_path, csv.str());
        }
        std::cout << out.report.to_csv();
        return 0;
    }

    if (ek->parsed()) {
        TrainerState state = load_checkpoint(ckpt_path, load_source(src_path),
                                             load_target(tgt_path));
        state.cfg.k_method = method;
        if (k_min) state.cfg.k_min = k_min;
        if (k_max) state.cfg.k_max = k_max;
        std::vector<Vec> e_all = embed_all(state, state.source);
        std::vector<Vec> e_tgt = embed_all(state, state.target);
        e_all.insert(e_all.end(), e_tgt.begin(), e_tgt.end());
        std::size_t lo = state.cfg.k_min ? state.cfg.k_min : state.n_known();
        std::size_t hi = std::min(state.cfg.k_max, e_all.size() - 1);
        std::size_t K = estimate_k(e_all, state.source_ranks, state.n_known(), lo, hi,
                                   method == "brent" ? KMethod::Brent : KMethod::Elbow,
                                   state.cfg.seed);
        std::cout << K << '\n';
        return 0;
    }

    if (rp->parsed()) {
        std::ifstream f(in_report);
        if (!f) throw Error(Err::IoFailure, "cannot open " + in_report);
        nlohmann::json j = nlohmann::json::parse(f, nullptr, true);
        std::ostringstream csv;
        csv << "all,old,new,estimated_k,entropy_auroc\n";
        if (j["metrics"].is_null()) {
            csv << ",,," << j["estimated_k"].get<std::size_t>() << ",\n";
        } else {
            csv << j["metrics"]["all"].get<double>() << ',' << j["metrics"]["old"].get<double>()
                << ',' << j["metrics"]["new"].get<double>() << ','
                << j["estimated_k"].get<std::size_t>() << ','
                << j["entropy"]["auroc"].get<double>() << '\n';
        }
        if (out_csv.empty())
            std::cout << csv.str();
        else
            write_text(out_csv, csv.str());
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const gcd::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return gcd::exit_code_for(e.code());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
