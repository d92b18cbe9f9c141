#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsnet/data.hpp"
#include "capsnet/pipeline.hpp"
#include "capsnet/png.hpp"
#include "capsnet/svm.hpp"

namespace capsnet {

// ---- frozen forward over a dataset ----

struct FrozenOutputs {
    int n = 0;
    int L = 0;
    int Dl = 0;
    std::vector<float> features;  // [n, L*Dl], raw v'
    std::vector<float> psi;       // [n, L]
    std::vector<int> ranks;       // [n, L]
    double batch_mse = 0.0;       // mean per-image sum-of-squares reconstruction error
};

inline FrozenOutputs run_frozen(const CapsNetModel<float>& model, const SparsityConfig& cfg,
                                const SparsityState& state, bool dense_mode, const LabeledImageSet& set,
                                int batch = 64) {
    FrozenOutputs out;
    const Geometry& g = model.geo;
    out.n = set.count();
    out.L = g.L;
    out.Dl = g.Dl;
    out.features.reserve(size_t(out.n) * g.latent_width());
    out.psi.reserve(size_t(out.n) * g.L);
    out.ranks.reserve(size_t(out.n) * g.L);
    double sq_sum = 0.0;
    for (int at = 0; at < out.n; at += batch) {
        int k = std::min(batch, out.n - at);
        std::vector<int> idxs((size_t(k)));
        std::iota(idxs.begin(), idxs.end(), at);
        Tape<float> tp;
        tp.recording = false;
        auto images = gather_batch(set, idxs);
        auto r = forward_pipeline(tp, model, images, cfg, state, dense_mode);
        out.features.insert(out.features.end(), r.v_prime.values().begin(), r.v_prime.values().end());
        out.psi.insert(out.psi.end(), r.routing.psi.values().begin(), r.routing.psi.values().end());
        out.ranks.insert(out.ranks.end(), r.ranks.begin(), r.ranks.end());
        Tensor<float> target = Tensor<float>::from({k, g.pixels()},
                                                   std::vector<float>(images.values().begin(),
                                                                      images.values().end()));
        sq_sum += double(reconstruction_loss(tp, r.recon, target).item()) * k;
    }
    out.batch_mse = sq_sum / out.n;
    return out;
}

// ---- evaluation reports ----

struct EvalReport {
    std::string condition;  // a | b | mnist
    double accuracy = 0.0;
    double batch_mse = 0.0;
    int n_images = 0;
    std::string fingerprint;
    std::vector<std::vector<int>> confusion;  // [true][pred], 10x10
    bool sanity_overlap = false;              // train == test sanity mode
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"condition", r.condition},     {"accuracy", r.accuracy},
                       {"batch_mse", r.batch_mse},     {"n_images", r.n_images},
                       {"fingerprint", r.fingerprint}, {"confusion", r.confusion},
                       {"sanity_overlap", r.sanity_overlap}};
}

inline std::string report_text(const EvalReport& r) {
    std::ostringstream os;
    os << "condition " << r.condition << ": accuracy " << r.accuracy << " over " << r.n_images
       << " images, batch MSE " << r.batch_mse << " (config " << r.fingerprint << ")";
    if (r.sanity_overlap) os << " [sanity: train==test]";
    return os.str();
}

// Fits the classifier head on frozen features of svm_train, evaluates on
// frozen features of svm_test. Train and test must be disjoint by source id
// unless sanity_overlap deliberately re-tests the training set.
inline EvalReport evaluate_condition(const CapsNetModel<float>& model, const SparsityConfig& cfg,
                                     const SparsityState& state, bool dense_mode,
                                     const SvmConfig& svm_cfg, const LabeledImageSet& svm_train,
                                     const LabeledImageSet& svm_test, const std::string& condition,
                                     const std::string& fingerprint, bool sanity_overlap = false) {
    if (!sanity_overlap && !svm_train.ids.empty() && !svm_test.ids.empty()) {
        std::set<int> a(svm_train.ids.begin(), svm_train.ids.end());
        for (int id : svm_test.ids)
            require(!a.count(id), "evaluate_condition: train/test sets share source image " +
                                      std::to_string(id));
    }
    auto tr = run_frozen(model, cfg, state, dense_mode, svm_train);
    auto te = run_frozen(model, cfg, state, dense_mode, svm_test);
    int dim = model.geo.latent_width();
    SvmModel svm = svm_fit(tr.features, svm_train.labels, dim, svm_cfg);
    auto pred = svm_predict(svm, te.features, te.n);

    EvalReport rep;
    rep.condition = condition;
    rep.n_images = te.n;
    rep.batch_mse = te.batch_mse;
    rep.fingerprint = fingerprint;
    rep.sanity_overlap = sanity_overlap;
    rep.confusion.assign(10, std::vector<int>(10, 0));
    int correct = 0;
    for (int i = 0; i < te.n; ++i) {
        int t = svm_test.labels[size_t(i)], p = pred[size_t(i)];
        rep.confusion[size_t(t)][size_t(p)]++;
        if (t == p) ++correct;
    }
    rep.accuracy = double(correct) / te.n;
    return rep;
}

// ---- diagnostics ----

// Per image, sort psi descending; average per rank position; normalize by
// the rank-0 average. result[0] == 1 and the curve is non-increasing.
inline std::vector<double> ranked_coefficient_curve(const std::vector<float>& psi, int n, int L) {
    require(n >= 1 && int(psi.size()) == n * L, "ranked_curve: bad psi buffer");
    std::vector<double> acc(size_t(L), 0.0);
    std::vector<float> row((size_t(L)));
    for (int i = 0; i < n; ++i) {
        std::copy(psi.begin() + size_t(i) * L, psi.begin() + size_t(i + 1) * L, row.begin());
        std::sort(row.begin(), row.end(), std::greater<float>());
        for (int j = 0; j < L; ++j) acc[size_t(j)] += row[size_t(j)];
    }
    double top = acc[0];
    require(top > 0, "ranked_curve: degenerate zero support");
    for (auto& v : acc) v /= top;
    return acc;
}

// F[j][rho] = frequency with which capsule j attains rank rho. Columns
// (fixed rho) sum to 1.
struct RankFrequencyMatrix {
    int L = 0;
    std::vector<double> f;  // [L, L] row j, col rho
    double at(int j, int rho) const { return f[size_t(j) * L + rho]; }
};

inline RankFrequencyMatrix rank_frequency(const std::vector<int>& ranks, int n, int L) {
    require(int(ranks.size()) == n * L, "rank_frequency: bad rank buffer");
    RankFrequencyMatrix m;
    m.L = L;
    m.f.assign(size_t(L) * L, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < L; ++j) m.f[size_t(j) * L + ranks[size_t(i) * L + j]] += 1.0;
    for (auto& v : m.f) v /= n;
    return m;
}

// ---- single-image probes ----

struct SweepResult {
    int capsule = 0;
    int dim = 0;
    std::vector<Tensor<float>> reconstructions;  // 11 canvas x canvas images
    std::vector<double> values;                  // the overwritten values
};

// Forward once, then overwrite v'[j,d] with each value in {-1,-0.8,...,1}
// and decode. j < 0 selects the most active capsule after routing.
inline SweepResult equivariance_sweep(const CapsNetModel<float>& model, const SparsityConfig& cfg,
                                        const SparsityState& state, bool dense_mode,
                                        const LabeledImageSet& set, int image_index, int capsule,
                                        int dim) {
    const Geometry& g = model.geo;
    require(capsule < g.L, "sweep: capsule index out of range");
    require(dim >= 0 && dim < g.Dl, "sweep: dim index out of range");
    Tape<float> tp;
    tp.recording = false;
    auto images = gather_batch(set, {image_index});
    auto r = forward_pipeline(tp, model, images, cfg, state, dense_mode);
    if (capsule < 0) {
        // default: the most active capsule after routing (rank 0)
        for (int j = 0; j < g.L; ++j)
            if (r.ranks[size_t(j)] == 0) capsule = j;
    }
    SweepResult out;
    out.capsule = capsule;
    out.dim = dim;
    for (int step = 0; step <= 10; ++step) {
        double v = -1.0 + 0.2 * step;
        out.values.push_back(v);
        Tensor<float> vp = Tensor<float>::from(r.v_prime.shape(), r.v_prime.values());
        vp.values()[size_t(capsule) * g.Dl + dim] = float(v);
        auto recon = decode(tp, model, vp);
        out.reconstructions.push_back(
            Tensor<float>::from({g.canvas, g.canvas}, recon.values()));
    }
    return out;
}

struct ReconstructionPanels {
    Tensor<float> input;                        // canvas x canvas
    Tensor<float> full;                         // full reconstruction
    std::vector<Tensor<float>> per_capsule;     // capsule j alone
    std::vector<Tensor<float>> leave_one_out;   // capsule j removed
    std::vector<Tensor<float>> diffs;           // |full - leave_one_out|
    std::vector<double> diff_mse;               // per-capsule mean squared diff

    std::vector<Tensor<float>> all_images() const {
        std::vector<Tensor<float>> out;
        out.push_back(input);
        out.push_back(full);
        out.insert(out.end(), per_capsule.begin(), per_capsule.end());
        out.insert(out.end(), leave_one_out.begin(), leave_one_out.end());
        out.insert(out.end(), diffs.begin(), diffs.end());
        return out;
    }
};

inline ReconstructionPanels reconstruction_panels(const CapsNetModel<float>& model,
                                                  const SparsityConfig& cfg, const SparsityState& state,
                                                  bool dense_mode, const LabeledImageSet& set,
                                                  int image_index) {
    const Geometry& g = model.geo;
    Tape<float> tp;
    tp.recording = false;
    auto images = gather_batch(set, {image_index});
    auto r = forward_pipeline(tp, model, images, cfg, state, dense_mode);
    ReconstructionPanels out;
    out.input = Tensor<float>::from({g.canvas, g.canvas},
                                    std::vector<float>(images.values().begin(), images.values().end()));
    out.full = Tensor<float>::from({g.canvas, g.canvas}, r.recon.values());
    for (int j = 0; j < g.L; ++j) {
        Tensor<float> only = Tensor<float>::zeros(r.v_prime.shape());
        Tensor<float> loo = Tensor<float>::from(r.v_prime.shape(), r.v_prime.values());
        for (int d = 0; d < g.Dl; ++d) {
            only.values()[size_t(j) * g.Dl + d] = r.v_prime.values()[size_t(j) * g.Dl + d];
            loo.values()[size_t(j) * g.Dl + d] = 0.0f;
        }
        auto ro = decode(tp, model, only);
        auto rl = decode(tp, model, loo);
        out.per_capsule.push_back(Tensor<float>::from({g.canvas, g.canvas}, ro.values()));
        out.leave_one_out.push_back(Tensor<float>::from({g.canvas, g.canvas}, rl.values()));
        Tensor<float> diff = Tensor<float>::zeros({g.canvas, g.canvas});
        double mse = 0;
        for (size_t p = 0; p < diff.values().size(); ++p) {
            double d = double(out.full.values()[p]) - rl.values()[p];
            diff.values()[p] = float(std::abs(d));
            mse += d * d;
        }
        out.diffs.push_back(diff);
        out.diff_mse.push_back(mse / double(diff.values().size()));
    }
    return out;
}

// Mean per-capsule leave-one-out diff-MSE over several images; the
// max/min ratio of this vector is the dominance diagnostic.
inline std::vector<double> mean_loo_diff_mse(const CapsNetModel<float>& model, const SparsityConfig& cfg,
                                             const SparsityState& state, bool dense_mode,
                                             const LabeledImageSet& set, int n_images) {
    n_images = std::min(n_images, set.count());
    std::vector<double> acc(size_t(model.geo.L), 0.0);
    for (int i = 0; i < n_images; ++i) {
        auto p = reconstruction_panels(model, cfg, state, dense_mode, set, i);
        for (int j = 0; j < model.geo.L; ++j) acc[size_t(j)] += p.diff_mse[size_t(j)];
    }
    for (auto& v : acc) v /= n_images;
    return acc;
}

// ---- CSV export ----

inline void write_csv_vector(const std::vector<double>& v, const std::string& header,
                             const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("csv: cannot write " + path);
    os << header << "\n";
    for (size_t i = 0; i < v.size(); ++i) os << i << "," << v[i] << "\n";
}

inline void write_csv_matrix(const RankFrequencyMatrix& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("csv: cannot write " + path);
    os << "capsule";
    for (int r = 0; r < m.L; ++r) os << ",rank" << r;
    os << "\n";
    for (int j = 0; j < m.L; ++j) {
        os << j;
        for (int r = 0; r < m.L; ++r) os << "," << m.at(j, r);
        os << "\n";
    }
}

}  // namespace capsnet
