#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "capsnet/checkpoint.hpp"
#include "capsnet/config.hpp"
#include "capsnet/data.hpp"
#include "capsnet/pipeline.hpp"

namespace capsnet {

struct TrainResult {
    Checkpoint ckpt;
    std::string ckpt_path;
    std::string metrics_path;
    double last_loss = 0.0;
};

// Runs the unsupervised training loop: per step, sample a batch from the
// translated training set, run the full forward pipeline, backprop the
// reconstruction loss, apply Adam, then update the sparsity statistics.
// Dense-ablation mode still tracks the activity EMA (for diagnostics) but
// never changes the boosts. A non-finite loss or gradient aborts with a
// checkpoint of the last finite state.
inline TrainResult train(const ExperimentConfig& cfg, const std::optional<std::string>& resume = {},
                         std::ostream* log = &std::cerr) {
    cfg.validate();
    cfg.validate_paths();
    std::filesystem::create_directories(cfg.output_dir);
    std::string ckpt_path = (std::filesystem::path(cfg.output_dir) / "ckpt-final.bin").string();
    std::string abort_path = (std::filesystem::path(cfg.output_dir) / "ckpt-abort.bin").string();
    std::string metrics_path = (std::filesystem::path(cfg.output_dir) / "metrics.jsonl").string();

    Checkpoint ck;
    if (resume) {
        ck = load_checkpoint(*resume);
        require(config_fingerprint(ck.config) == config_fingerprint(cfg),
                "train: --resume checkpoint was produced with a different config");
    } else {
        ck.config = cfg;
        Rng wrng(cfg.weights_seed);
        ck.model = CapsNetModel<float>::init(cfg.geometry, wrng);
        auto params = ck.model.params();
        ck.adam.cfg = {float(cfg.lr), float(cfg.beta1), float(cfg.beta2), 1e-8f};
        ck.adam.init(params);
        ck.sparsity = SparsityState::init(cfg.geometry.L);
        ck.step = 0;
        ck.loop_rng = Rng(cfg.data_seed + 1);
    }

    auto raw = load_idx(cfg.images_path, cfg.labels_path);
    require(raw.count() >= cfg.train_subset, "train: dataset smaller than train_subset");
    auto train_set = make_translated_set(raw.slice(0, cfg.train_subset), cfg.geometry.canvas,
                                         cfg.data_seed);

    std::ofstream metrics(metrics_path, resume ? std::ios::app : std::ios::trunc);
    require(bool(metrics), "train: cannot write " + metrics_path);

    const bool dense = cfg.dense_mode();
    auto params = ck.model.params();
    double last_loss = 0.0;

    for (int64_t step = ck.step; step < cfg.steps; ++step) {
        std::vector<int> idx((size_t(cfg.batch_size)));
        for (auto& i : idx) i = int(ck.loop_rng.below(uint32_t(train_set.count())));
        auto images = gather_batch(train_set, idx);

        Tape<float> tp;
        auto r = forward_pipeline(tp, ck.model, images, cfg.sparsity, ck.sparsity, dense);
        auto target = tp.reshape(tp.stop_gradient(images),
                                 {cfg.batch_size, cfg.geometry.pixels()});
        auto loss = reconstruction_loss(tp, r.recon, target);
        last_loss = double(loss.item());

        auto abort_with = [&](const std::string& why) {
            ck.step = step;  // params/optimizer still hold the last finite state
            save_checkpoint(ck, abort_path);
            throw std::runtime_error("train: " + why + " at step " + std::to_string(step) +
                                     "; last finite state saved to " + abort_path);
        };
        if (!std::isfinite(last_loss)) abort_with("non-finite loss");

        ck.model.zero_grads();
        tp.backward(loss);
        for (auto& p : params)
            if (!all_finite(p.grad())) abort_with("non-finite gradient");
        ck.adam.step(params);

        if (dense) {
            // EMA tracked for diagnostics; boosts stay frozen at 1.
            if (cfg.sparsity.ema_every_batch || (ck.sparsity.n + 1) % cfg.sparsity.N == 0) {
                auto eps = batch_rank0_frequency(r.ranks, cfg.batch_size, cfg.geometry.L);
                ck.sparsity.mu = update_ema(ck.sparsity.mu, eps, cfg.sparsity.alpha);
            }
            ck.sparsity.n += 1;
        } else {
            observe_batch(ck.sparsity, r.ranks, cfg.batch_size, cfg.sparsity);
        }

        if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
            nlohmann::json line = {{"step", step + 1},
                                   {"loss", last_loss},
                                   {"g", ck.sparsity.g},
                                   {"mu", ck.sparsity.mu}};
            metrics << line.dump() << "\n";
            metrics.flush();
            if (log) *log << "step " << (step + 1) << "/" << cfg.steps << " loss " << last_loss << "\n";
        }
        ck.step = step + 1;
    }

    save_checkpoint(ck, ckpt_path);
    return {std::move(ck), ckpt_path, metrics_path, last_loss};
}

}  // namespace capsnet
