#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "capsnet/analysis.hpp"
#include "capsnet/checkpoint.hpp"
#include "capsnet/config.hpp"
#include "capsnet/data.hpp"
#include "capsnet/png.hpp"

namespace capsnet {

// Train/test image sets for one evaluation condition. Sources are split by
// index so the SVM never sees a test digit's source image:
//   mnist: translated train half vs translated test half
//   a:     affine train half vs affine test half
//   b:     translated train half vs affine test half
struct ConditionSets {
    LabeledImageSet train;
    LabeledImageSet test;
};

inline ConditionSets build_condition_sets(const ExperimentConfig& cfg, const LabeledImageSet& raw,
                                          const std::string& condition) {
    require(condition == "a" || condition == "b" || condition == "mnist",
            "condition must be a, b, or mnist, got '" + condition + "'");
    require(raw.count() >= cfg.svm_train_count + cfg.svm_test_count,
            "dataset too small for svm_train_count + svm_test_count");
    auto train_src = raw.slice(0, cfg.svm_train_count);
    auto test_src = raw.slice(cfg.svm_train_count, cfg.svm_test_count);
    int canvas = cfg.geometry.canvas;

    ConditionSets out;
    if (condition == "mnist") {
        out.train = make_translated_set(train_src, canvas, cfg.data_seed + 11);
        out.test = make_translated_set(test_src, canvas, cfg.data_seed + 12);
    } else if (condition == "a") {
        out.train = make_affine_set(train_src, canvas, cfg.affine, cfg.affine_seed + 11);
        out.test = make_affine_set(test_src, canvas, cfg.affine, cfg.affine_seed + 12);
    } else {  // b: classifier fitted on the model's plain-MNIST output
        out.train = make_translated_set(train_src, canvas, cfg.data_seed + 11);
        out.test = make_affine_set(test_src, canvas, cfg.affine, cfg.affine_seed + 12);
    }
    return out;
}

inline EvalReport run_experiment(const Checkpoint& ck, const std::string& condition) {
    const ExperimentConfig& cfg = ck.config;
    cfg.validate_paths();
    auto raw = load_idx(cfg.images_path, cfg.labels_path);
    auto sets = build_condition_sets(cfg, raw, condition);
    return evaluate_condition(ck.model, cfg.sparsity, ck.sparsity, cfg.dense_mode(), cfg.svm,
                              sets.train, sets.test, condition, config_fingerprint(cfg));
}

// Renders one diagnostic figure from a trained checkpoint into out_dir.
//   2: reconstruction panels (input, full, per-capsule, leave-one-out, diffs)
//   4: ranked routing-coefficient curve (CSV)
//   5: capsule rank-frequency matrix (CSV)
//   6: equivariance sweep strip (11 reconstructions)
// Returns the paths written.
inline std::vector<std::string> run_analysis(const Checkpoint& ck, int fig,
                                             const std::string& out_dir) {
    const ExperimentConfig& cfg = ck.config;
    cfg.validate_paths();
    std::filesystem::create_directories(out_dir);
    std::string fp = config_fingerprint(cfg);
    bool dense = cfg.dense_mode();

    auto raw = load_idx(cfg.images_path, cfg.labels_path);
    require(raw.count() >= cfg.svm_train_count + cfg.svm_test_count,
            "dataset too small for the held-out diagnostics split");
    int n_eval = std::min(cfg.eval_images, cfg.svm_test_count);
    auto eval_set = make_translated_set(raw.slice(cfg.svm_train_count, n_eval), cfg.geometry.canvas,
                                        cfg.data_seed + 21);

    auto path = [&](const std::string& name) {
        return (std::filesystem::path(out_dir) / name).string();
    };
    auto meta_path = path("fig" + std::to_string(fig) + "-meta.json");
    nlohmann::json meta = {{"fig", fig}, {"fingerprint", fp}, {"n_images", n_eval},
                           {"mode", cfg.mode}, {"sweep_point", "post-mask v'"}};
    std::vector<std::string> written;

    if (fig == 2) {
        auto p = reconstruction_panels(ck.model, cfg.sparsity, ck.sparsity, dense, eval_set, 0);
        std::string png = path("fig2-panels.png");
        write_png_grid(p.all_images(), cfg.geometry.L + 2, png);
        meta["panel_counts"] = {{"input", 1}, {"full", 1}, {"per_capsule", cfg.geometry.L},
                                {"leave_one_out", cfg.geometry.L}, {"diffs", cfg.geometry.L}};
        meta["diff_mse"] = p.diff_mse;
        written.push_back(png);
    } else if (fig == 4 || fig == 5) {
        auto frozen = run_frozen(ck.model, cfg.sparsity, ck.sparsity, dense, eval_set);
        if (fig == 4) {
            auto curve = ranked_coefficient_curve(frozen.psi, frozen.n, cfg.geometry.L);
            std::string csv = path("fig4-ranked-coefficients.csv");
            write_csv_vector(curve, "rank,mean_support_scaled", csv);
            written.push_back(csv);
        } else {
            auto m = rank_frequency(frozen.ranks, frozen.n, cfg.geometry.L);
            std::string csv = path("fig5-rank-frequency.csv");
            write_csv_matrix(m, csv);
            written.push_back(csv);
        }
    } else if (fig == 6) {
        auto sweep = equivariance_sweep(ck.model, cfg.sparsity, ck.sparsity, dense, eval_set, 0,
                                        /*capsule=*/-1, /*dim=*/0);
        std::string png = path("fig6-sweep.png");
        write_png_grid(sweep.reconstructions, 11, png);
        meta["capsule"] = sweep.capsule;
        meta["dim"] = sweep.dim;
        meta["values"] = sweep.values;
        written.push_back(png);
    } else {
        throw std::runtime_error("analyze: unknown figure " + std::to_string(fig) +
                                 " (expected 2, 4, 5, or 6)");
    }

    std::ofstream ms(meta_path);
    require(bool(ms), "analyze: cannot write " + meta_path);
    ms << meta.dump(2) << "\n";
    written.push_back(meta_path);
    return written;
}

}  // namespace capsnet
