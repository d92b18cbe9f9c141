#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "capsnet/data.hpp"
#include "capsnet/model.hpp"
#include "capsnet/sparsity.hpp"
#include "capsnet/svm.hpp"

namespace capsnet {

struct ExperimentConfig {
    std::string images_path = "data/mnist/train-images-idx3-ubyte";
    std::string labels_path = "data/mnist/train-labels-idx1-ubyte";
    Geometry geometry;
    SparsityConfig sparsity;
    AffineRanges affine;
    SvmConfig svm;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch_size = 32;
    int steps = 3000;
    int train_subset = 10000;  // images used for unsupervised training
    int svm_train_count = 5000;
    int svm_test_count = 5000;
    int eval_images = 2000;  // diagnostics set size
    int log_every = 50;
    uint64_t weights_seed = 1;
    uint64_t data_seed = 2;
    uint64_t affine_seed = 3;
    std::string mode = "sparse";  // sparse | dense-ablation
    std::string output_dir = "out";

    bool dense_mode() const { return mode == "dense-ablation"; }

    void validate() const {
        require(batch_size >= 1, "config: batch_size must be >= 1");
        require(steps >= 1, "config: steps must be >= 1");
        require(mode == "sparse" || mode == "dense-ablation", "config: unknown mode '" + mode + "'");
        geometry.validate();
        sparsity.validate();
        affine.validate();
        require(geometry.L == sparsity.L, "config: geometry.L != sparsity.L");
    }

    void validate_paths() const {
        require(std::filesystem::exists(images_path), "config: missing images file " + images_path);
        require(std::filesystem::exists(labels_path), "config: missing labels file " + labels_path);
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{
        {"images_path", c.images_path},
        {"labels_path", c.labels_path},
        {"geometry",
         {{"canvas", c.geometry.canvas}, {"conv1_channels", c.geometry.conv1_channels},
          {"conv1_kernel", c.geometry.conv1_kernel}, {"conv1_stride", c.geometry.conv1_stride},
          {"primary_kernel", c.geometry.primary_kernel}, {"primary_stride", c.geometry.primary_stride},
          {"P", c.geometry.P}, {"Dp", c.geometry.Dp}, {"L", c.geometry.L}, {"Dl", c.geometry.Dl},
          {"routing_iterations", c.geometry.routing_iterations}, {"fc1", c.geometry.fc1},
          {"fc2", c.geometry.fc2}}},
        {"sparsity",
         {{"L", c.sparsity.L}, {"gamma", c.sparsity.gamma}, {"mask_floor", c.sparsity.mask_floor},
          {"alpha", c.sparsity.alpha}, {"d", c.sparsity.d}, {"N", c.sparsity.N},
          {"mu_min", c.sparsity.mu_min}, {"mu_max", c.sparsity.mu_max},
          {"ema_every_batch", c.sparsity.ema_every_batch}}},
        {"affine",
         {{"rotation_deg", c.affine.rotation_deg}, {"shear", c.affine.shear},
          {"scale_min", c.affine.scale_min}, {"scale_max", c.affine.scale_max}}},
        {"svm",
         {{"C", c.svm.C}, {"gamma", c.svm.gamma}, {"tol", c.svm.tol},
          {"max_iters", c.svm.max_iters}, {"train_cap", c.svm.train_cap}}},
        {"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2},
        {"batch_size", c.batch_size}, {"steps", c.steps}, {"train_subset", c.train_subset},
        {"svm_train_count", c.svm_train_count}, {"svm_test_count", c.svm_test_count},
        {"eval_images", c.eval_images}, {"log_every", c.log_every},
        {"weights_seed", c.weights_seed}, {"data_seed", c.data_seed}, {"affine_seed", c.affine_seed},
        {"mode", c.mode}, {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    ExperimentConfig d;
    auto get = [&](const nlohmann::json& o, const char* key, auto def) {
        using T = decltype(def);
        return o.contains(key) ? o.at(key).get<T>() : def;
    };
    c.images_path = get(j, "images_path", d.images_path);
    c.labels_path = get(j, "labels_path", d.labels_path);
    if (j.contains("geometry")) {
        const auto& g = j.at("geometry");
        c.geometry.canvas = get(g, "canvas", d.geometry.canvas);
        c.geometry.conv1_channels = get(g, "conv1_channels", d.geometry.conv1_channels);
        c.geometry.conv1_kernel = get(g, "conv1_kernel", d.geometry.conv1_kernel);
        c.geometry.conv1_stride = get(g, "conv1_stride", d.geometry.conv1_stride);
        c.geometry.primary_kernel = get(g, "primary_kernel", d.geometry.primary_kernel);
        c.geometry.primary_stride = get(g, "primary_stride", d.geometry.primary_stride);
        c.geometry.P = get(g, "P", d.geometry.P);
        c.geometry.Dp = get(g, "Dp", d.geometry.Dp);
        c.geometry.L = get(g, "L", d.geometry.L);
        c.geometry.Dl = get(g, "Dl", d.geometry.Dl);
        c.geometry.routing_iterations = get(g, "routing_iterations", d.geometry.routing_iterations);
        c.geometry.fc1 = get(g, "fc1", d.geometry.fc1);
        c.geometry.fc2 = get(g, "fc2", d.geometry.fc2);
    }
    if (j.contains("sparsity")) {
        const auto& s = j.at("sparsity");
        c.sparsity.L = get(s, "L", d.sparsity.L);
        c.sparsity.gamma = get(s, "gamma", d.sparsity.gamma);
        c.sparsity.mask_floor = get(s, "mask_floor", d.sparsity.mask_floor);
        c.sparsity.alpha = get(s, "alpha", d.sparsity.alpha);
        c.sparsity.d = get(s, "d", d.sparsity.d);
        c.sparsity.N = get(s, "N", d.sparsity.N);
        c.sparsity.mu_min = get(s, "mu_min", d.sparsity.mu_min);
        c.sparsity.mu_max = get(s, "mu_max", d.sparsity.mu_max);
        c.sparsity.ema_every_batch = get(s, "ema_every_batch", d.sparsity.ema_every_batch);
    } else {
        c.sparsity.L = c.geometry.L;
    }
    if (j.contains("affine")) {
        const auto& a = j.at("affine");
        c.affine.rotation_deg = get(a, "rotation_deg", d.affine.rotation_deg);
        c.affine.shear = get(a, "shear", d.affine.shear);
        c.affine.scale_min = get(a, "scale_min", d.affine.scale_min);
        c.affine.scale_max = get(a, "scale_max", d.affine.scale_max);
    }
    if (j.contains("svm")) {
        const auto& s = j.at("svm");
        c.svm.C = get(s, "C", d.svm.C);
        c.svm.gamma = get(s, "gamma", d.svm.gamma);
        c.svm.tol = get(s, "tol", d.svm.tol);
        c.svm.max_iters = get(s, "max_iters", d.svm.max_iters);
        c.svm.train_cap = get(s, "train_cap", d.svm.train_cap);
    }
    c.lr = get(j, "lr", d.lr);
    c.beta1 = get(j, "beta1", d.beta1);
    c.beta2 = get(j, "beta2", d.beta2);
    c.batch_size = get(j, "batch_size", d.batch_size);
    c.steps = get(j, "steps", d.steps);
    c.train_subset = get(j, "train_subset", d.train_subset);
    c.svm_train_count = get(j, "svm_train_count", d.svm_train_count);
    c.svm_test_count = get(j, "svm_test_count", d.svm_test_count);
    c.eval_images = get(j, "eval_images", d.eval_images);
    c.log_every = get(j, "log_every", d.log_every);
    c.weights_seed = get(j, "weights_seed", d.weights_seed);
    c.data_seed = get(j, "data_seed", d.data_seed);
    c.affine_seed = get(j, "affine_seed", d.affine_seed);
    c.mode = get(j, "mode", d.mode);
    c.output_dir = get(j, "output_dir", d.output_dir);
}

// Hash of the canonicalized (key-sorted) config JSON; embedded in every
// emitted artifact.
inline std::string config_fingerprint(const ExperimentConfig& c) {
    nlohmann::json j = c;
    std::string s = j.dump();
    uint32_t crc = uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(s.data()), uInt(s.size())));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", crc);
    return buf;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

}  // namespace capsnet
