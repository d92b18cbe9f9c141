#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "capsnet/rng.hpp"
#include "capsnet/tensor.hpp"

namespace capsnet {

constexpr int kMnistSide = 28;

struct AffineParams {
    double rotation_deg = 0.0;
    double shear = 0.0;
    double scale_x = 1.0;
    double scale_y = 1.0;
    int translate_x = 0;  // relative to centered placement
    int translate_y = 0;
};

struct AffineRanges {
    double rotation_deg = 20.0;  // +/- range
    double shear = 0.2;          // +/- range
    double scale_min = 0.8;
    double scale_max = 1.2;

    void validate() const {
        require(scale_min > 0 && scale_min <= scale_max, "affine: invalid scale range");
        require(rotation_deg >= 0 && shear >= 0, "affine: negative range half-width");
    }
};

struct LabeledImageSet {
    Tensor<float> images;  // [N, canvas, canvas], values in [0,1]
    std::vector<int> labels;
    std::vector<int> ids;  // source image identifiers, for train/test disjointness checks
    std::string provenance = "mnist-raw";  // mnist-raw | translated | affine
    uint64_t seed = 0;
    std::vector<AffineParams> params;  // one per image for affine sets

    int count() const { return images.defined() ? images.dim(0) : 0; }
    int canvas() const { return images.defined() ? images.dim(1) : 0; }

    const float* image(int i) const {
        return images.data() + static_cast<int64_t>(i) * canvas() * canvas();
    }

    LabeledImageSet slice(int from, int n) const {
        require(from >= 0 && from + n <= count(), "slice: range out of bounds");
        LabeledImageSet out;
        int c = canvas();
        std::vector<float> vals(images.values().begin() + static_cast<int64_t>(from) * c * c,
                                images.values().begin() + static_cast<int64_t>(from + n) * c * c);
        out.images = Tensor<float>::from({n, c, c}, std::move(vals));
        out.labels.assign(labels.begin() + from, labels.begin() + from + n);
        if (!ids.empty()) out.ids.assign(ids.begin() + from, ids.begin() + from + n);
        out.provenance = provenance;
        out.seed = seed;
        if (!params.empty()) out.params.assign(params.begin() + from, params.begin() + from + n);
        return out;
    }
};

// ---- IDX files (gzip or raw, auto-detected) ----

namespace detail {

inline std::vector<uint8_t> read_file_auto(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");  // transparently handles non-gzip input
    if (!f) throw std::runtime_error("idx: cannot open " + path);
    std::vector<uint8_t> out;
    std::array<uint8_t, 1 << 16> buf;
    int n = 0;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0)
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    bool bad = n < 0;
    gzclose(f);
    if (bad) throw std::runtime_error("idx: read error in " + path);
    return out;
}

inline uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void put_be32(std::ofstream& os, uint32_t v) {
    uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path) {
    auto ib = detail::read_file_auto(images_path);
    if (ib.size() < 16) throw std::runtime_error("idx: truncated image file " + images_path);
    if (detail::be32(ib.data()) != 0x00000803u)
        throw std::runtime_error("idx: bad image magic in " + images_path);
    uint32_t n = detail::be32(ib.data() + 4);
    uint32_t rows = detail::be32(ib.data() + 8);
    uint32_t cols = detail::be32(ib.data() + 12);
    if (ib.size() != 16 + size_t(n) * rows * cols)
        throw std::runtime_error("idx: truncated image payload in " + images_path);

    auto lb = detail::read_file_auto(labels_path);
    if (lb.size() < 8) throw std::runtime_error("idx: truncated label file " + labels_path);
    if (detail::be32(lb.data()) != 0x00000801u)
        throw std::runtime_error("idx: bad label magic in " + labels_path);
    uint32_t nl = detail::be32(lb.data() + 4);
    if (nl != n)
        throw std::runtime_error("idx: image/label count mismatch: " + std::to_string(n) + " vs " +
                                 std::to_string(nl));
    if (lb.size() != 8 + size_t(nl)) throw std::runtime_error("idx: truncated label payload in " + labels_path);

    LabeledImageSet set;
    std::vector<float> vals(size_t(n) * rows * cols);
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = ib[16 + i] / 255.0f;
    set.images = Tensor<float>::from({int(n), int(rows), int(cols)}, std::move(vals));
    set.labels.resize(n);
    set.ids.resize(n);
    for (uint32_t i = 0; i < n; ++i) set.ids[i] = int(i);
    for (uint32_t i = 0; i < n; ++i) {
        int lab = lb[8 + i];
        require(lab >= 0 && lab <= 9, "idx: label out of range at index " + std::to_string(i));
        set.labels[i] = lab;
    }
    return set;
}

// Writes an IDX pair plus a JSON sidecar with provenance.
inline void save_idx(const LabeledImageSet& set, const std::string& images_path,
                     const std::string& labels_path) {
    int n = set.count(), c = set.canvas();
    std::ofstream si(images_path, std::ios::binary);
    if (!si) throw std::runtime_error("idx: cannot write " + images_path);
    detail::put_be32(si, 0x00000803u);
    detail::put_be32(si, uint32_t(n));
    detail::put_be32(si, uint32_t(c));
    detail::put_be32(si, uint32_t(c));
    std::vector<uint8_t> row(size_t(c) * c);
    for (int i = 0; i < n; ++i) {
        const float* img = set.image(i);
        for (size_t p = 0; p < row.size(); ++p)
            row[p] = uint8_t(std::lround(std::min(1.0f, std::max(0.0f, img[p])) * 255.0f));
        si.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    require(bool(si), "idx: write failed for " + images_path);

    std::ofstream sl(labels_path, std::ios::binary);
    if (!sl) throw std::runtime_error("idx: cannot write " + labels_path);
    detail::put_be32(sl, 0x00000801u);
    detail::put_be32(sl, uint32_t(n));
    for (int i = 0; i < n; ++i) {
        uint8_t b = uint8_t(set.labels[size_t(i)]);
        sl.write(reinterpret_cast<const char*>(&b), 1);
    }
    require(bool(sl), "idx: write failed for " + labels_path);

    nlohmann::json side;
    side["provenance"] = set.provenance;
    side["seed"] = set.seed;
    side["count"] = n;
    side["canvas"] = c;
    if (!set.params.empty()) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : set.params)
            arr.push_back({{"rotation_deg", p.rotation_deg}, {"shear", p.shear},
                           {"scale_x", p.scale_x}, {"scale_y", p.scale_y},
                           {"translate_x", p.translate_x}, {"translate_y", p.translate_y}});
        side["affine_params"] = std::move(arr);
    }
    std::ofstream sj(images_path + ".json");
    sj << side.dump(2) << "\n";
    require(bool(sj), "idx: sidecar write failed for " + images_path);
}

// ---- digit placement ----

// Place a 28x28 digit on a larger canvas at a uniformly random offset.
// Background stays exactly 0; pure translation conserves pixel mass.
inline std::vector<float> place_translated(const float* img28, int canvas, Rng& rng) {
    require(canvas >= kMnistSide, "place_translated: canvas " + std::to_string(canvas) + " < 28");
    int slack = canvas - kMnistSide;
    int ox = slack > 0 ? int(rng.below(uint32_t(slack + 1))) : 0;
    int oy = slack > 0 ? int(rng.below(uint32_t(slack + 1))) : 0;
    std::vector<float> out(size_t(canvas) * canvas, 0.0f);
    for (int y = 0; y < kMnistSide; ++y)
        for (int x = 0; x < kMnistSide; ++x)
            out[size_t(oy + y) * canvas + (ox + x)] = img28[y * kMnistSide + x];
    return out;
}

namespace detail {

struct Mat2 {
    double a, b, c, d;  // [[a,b],[c,d]]
    Mat2 operator*(const Mat2& o) const {
        return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
    }
    Mat2 inverse() const {
        double det = a * d - b * c;
        require(std::abs(det) > 1e-12, "affine: singular transform");
        return {d / det, -b / det, -c / det, a / det};
    }
};

inline Mat2 affine_matrix(const AffineParams& p) {
    double th = p.rotation_deg * M_PI / 180.0;
    Mat2 rot{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
    Mat2 shear{1.0, p.shear, 0.0, 1.0};
    Mat2 scale{p.scale_x, 0.0, 0.0, p.scale_y};
    return rot * shear * scale;
}

inline float bilinear(const float* img, int side, double x, double y) {
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto at = [&](int xx, int yy) -> double {
        if (xx < 0 || yy < 0 || xx >= side || yy >= side) return 0.0;
        return img[yy * side + xx];
    };
    double v = at(x0, y0) * (1 - fx) * (1 - fy) + at(x0 + 1, y0) * fx * (1 - fy) +
               at(x0, y0 + 1) * (1 - fx) * fy + at(x0 + 1, y0 + 1) * fx * fy;
    return float(v);
}

}  // namespace detail

// Apply an affine transform (rotation . shear . scale about the digit
// centroid) to a 28x28 digit, destination-driven with bilinear sampling.
// translate_x/y are relative to centered placement on the canvas.
inline std::vector<float> apply_affine(const float* img28, int canvas, const AffineParams& p) {
    double mass = 0, cx = 0, cy = 0;
    for (int y = 0; y < kMnistSide; ++y)
        for (int x = 0; x < kMnistSide; ++x) {
            double v = img28[y * kMnistSide + x];
            mass += v;
            cx += v * x;
            cy += v * y;
        }
    if (mass > 0) {
        cx /= mass;
        cy /= mass;
    } else {
        cx = cy = (kMnistSide - 1) / 2.0;
    }
    double dc = (canvas - kMnistSide) / 2.0;  // centering offset
    auto inv = detail::affine_matrix(p).inverse();
    std::vector<float> out(size_t(canvas) * canvas, 0.0f);
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            double qx = x - dc - p.translate_x - cx;
            double qy = y - dc - p.translate_y - cy;
            double sx = inv.a * qx + inv.b * qy + cx;
            double sy = inv.c * qx + inv.d * qy + cy;
            float v = detail::bilinear(img28, kMnistSide, sx, sy);
            out[size_t(y) * canvas + x] = std::min(1.0f, std::max(0.0f, v));
        }
    return out;
}

// Sample affine params from the ranges and a translation under which the
// transformed digit fits the canvas entirely; bounded retries, then error.
inline std::pair<std::vector<float>, AffineParams> random_affine(const float* img28, int canvas,
                                                                 const AffineRanges& ranges, Rng& rng) {
    ranges.validate();

    // bounding box of the digit's nonzero pixels
    int bx0 = kMnistSide, by0 = kMnistSide, bx1 = -1, by1 = -1;
    double mass = 0, cx = 0, cy = 0;
    for (int y = 0; y < kMnistSide; ++y)
        for (int x = 0; x < kMnistSide; ++x) {
            double v = img28[y * kMnistSide + x];
            if (v > 0) {
                bx0 = std::min(bx0, x); by0 = std::min(by0, y);
                bx1 = std::max(bx1, x); by1 = std::max(by1, y);
            }
            mass += v; cx += v * x; cy += v * y;
        }
    if (bx1 < 0) { bx0 = by0 = 0; bx1 = by1 = kMnistSide - 1; }
    if (mass > 0) { cx /= mass; cy /= mass; } else { cx = cy = (kMnistSide - 1) / 2.0; }

    // Resample the whole transform until the transformed box fits: large
    // digits may not fit the canvas under extreme rotation/scale draws.
    const int max_retries = 100;
    AffineParams p;
    double dc = (canvas - kMnistSide) / 2.0;
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        p.rotation_deg = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg);
        p.shear = rng.uniform(-ranges.shear, ranges.shear);
        p.scale_x = rng.uniform(ranges.scale_min, ranges.scale_max);
        p.scale_y = rng.uniform(ranges.scale_min, ranges.scale_max);

        auto A = detail::affine_matrix(p);
        double minx = 1e9, maxx = -1e9, miny = 1e9, maxy = -1e9;
        for (int corner = 0; corner < 4; ++corner) {
            double px = (corner & 1) ? bx1 : bx0;
            double py = (corner & 2) ? by1 : by0;
            double qx = A.a * (px - cx) + A.b * (py - cy) + cx + dc;
            double qy = A.c * (px - cx) + A.d * (py - cy) + cy + dc;
            minx = std::min(minx, qx); maxx = std::max(maxx, qx);
            miny = std::min(miny, qy); maxy = std::max(maxy, qy);
        }
        // Bilinear sampling spills up to 1 source pixel beyond the box; the
        // forward image of that neighborhood is |row| of A in each axis.
        double mx = std::abs(A.a) + std::abs(A.b) + 1e-6;
        double my = std::abs(A.c) + std::abs(A.d) + 1e-6;
        // valid translations keep the transformed box inside [0, canvas-1]
        int tx_lo = int(std::ceil(mx - minx)), tx_hi = int(std::floor(canvas - 1 - mx - maxx));
        int ty_lo = int(std::ceil(my - miny)), ty_hi = int(std::floor(canvas - 1 - my - maxy));
        if (tx_lo > tx_hi || ty_lo > ty_hi) continue;  // transform too large for the canvas
        p.translate_x = tx_lo + int(rng.below(uint32_t(tx_hi - tx_lo + 1)));
        p.translate_y = ty_lo + int(rng.below(uint32_t(ty_hi - ty_lo + 1)));
        return {apply_affine(img28, canvas, p), p};
    }
    throw std::runtime_error("random_affine: transform does not fit canvas " + std::to_string(canvas));
}

// ---- generated sets ----

inline LabeledImageSet make_translated_set(const LabeledImageSet& src, int canvas, uint64_t seed) {
    require(src.canvas() == kMnistSide, "make_translated_set: source must be 28x28");
    Rng rng(seed);
    LabeledImageSet out;
    int n = src.count();
    std::vector<float> vals(size_t(n) * canvas * canvas);
    for (int i = 0; i < n; ++i) {
        auto img = place_translated(src.image(i), canvas, rng);
        std::copy(img.begin(), img.end(), vals.begin() + static_cast<int64_t>(i) * canvas * canvas);
    }
    out.images = Tensor<float>::from({n, canvas, canvas}, std::move(vals));
    out.labels = src.labels;
    out.ids = src.ids;
    out.provenance = "translated";
    out.seed = seed;
    return out;
}

inline LabeledImageSet make_affine_set(const LabeledImageSet& src, int canvas,
                                       const AffineRanges& ranges, uint64_t seed) {
    require(src.canvas() == kMnistSide, "make_affine_set: source must be 28x28");
    Rng rng(seed);
    LabeledImageSet out;
    int n = src.count();
    std::vector<float> vals(size_t(n) * canvas * canvas);
    out.params.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        auto [img, p] = random_affine(src.image(i), canvas, ranges, rng);
        std::copy(img.begin(), img.end(), vals.begin() + static_cast<int64_t>(i) * canvas * canvas);
        out.params[size_t(i)] = p;
    }
    out.images = Tensor<float>::from({n, canvas, canvas}, std::move(vals));
    out.labels = src.labels;
    out.ids = src.ids;
    out.provenance = "affine";
    out.seed = seed;
    return out;
}

// ---- batching ----

// Seeded shuffle per epoch; training drops the final partial batch,
// evaluation keeps it.
inline std::vector<std::vector<int>> shuffled_batches(int n, int K, Rng& rng, bool drop_last) {
    require(K >= 1 && K <= n, "batches: batch size " + std::to_string(K) + " invalid for " +
                                  std::to_string(n) + " samples");
    std::vector<int> order((size_t(n)));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<int>> out;
    for (int at = 0; at < n; at += K) {
        int take = std::min(K, n - at);
        if (take < K && drop_last) break;
        out.emplace_back(order.begin() + at, order.begin() + at + take);
    }
    return out;
}

// Gather selected images as a network input batch [K,1,canvas,canvas].
inline Tensor<float> gather_batch(const LabeledImageSet& set, const std::vector<int>& idxs) {
    int c = set.canvas();
    int k = int(idxs.size());
    std::vector<float> vals(size_t(k) * c * c);
    for (int i = 0; i < k; ++i) {
        const float* img = set.image(idxs[size_t(i)]);
        std::copy(img, img + size_t(c) * c, vals.begin() + static_cast<int64_t>(i) * c * c);
    }
    return Tensor<float>::from({k, 1, c, c}, std::move(vals));
}

template <class S>
Tensor<S> gather_batch_as(const LabeledImageSet& set, const std::vector<int>& idxs) {
    auto f = gather_batch(set, idxs);
    std::vector<S> vals(f.values().begin(), f.values().end());
    return Tensor<S>::from(f.shape(), std::move(vals));
}

}  // namespace capsnet
