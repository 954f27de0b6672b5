#pragma once

// Synthetic detection scenes: shapes on a plain background rendered under
// four appearance domains with identical geometry.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "didm/error.hpp"
#include "didm/rng.hpp"
#include "json.hpp"

namespace didm::toy {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kCellSize = 8;
inline constexpr std::size_t kGridSize = kImageSize / kCellSize;
inline constexpr std::size_t kNumCells = kGridSize * kGridSize;

enum class Domain : std::uint8_t { clear, night, fog, rain };

inline constexpr std::array<std::string_view, 4> kDomainNames{"clear", "night", "fog", "rain"};
inline constexpr std::array<std::string_view, 3> kShapeNames{"circle", "square", "triangle"};

[[nodiscard]] inline std::string_view to_string(Domain d) { return kDomainNames[static_cast<std::size_t>(d)]; }

[[nodiscard]] inline Domain domain_from_string(std::string_view s)
{
    for (std::size_t i = 0; i < kDomainNames.size(); ++i) {
        if (kDomainNames[i] == s) {
            return static_cast<Domain>(i);
        }
    }
    throw Error("unknown domain '" + std::string(s) + "'");
}

/// H×W×3, channel-interleaved, values in [0, 1].
struct Image {
    std::size_t height = kImageSize;
    std::size_t width = kImageSize;
    std::vector<double> data = std::vector<double>(kImageSize * kImageSize * 3, 0.0);

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }

    [[nodiscard]] double mean() const
    {
        double s = 0.0;
        for (double v : data) {
            s += v;
        }
        return s / static_cast<double>(data.size());
    }

    bool operator==(const Image&) const = default;
};

struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    [[nodiscard]] double width() const { return x2 - x1; }
    [[nodiscard]] double height() const { return y2 - y1; }
    [[nodiscard]] double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    [[nodiscard]] double cx() const { return 0.5 * (x1 + x2); }
    [[nodiscard]] double cy() const { return 0.5 * (y1 + y2); }

    bool operator==(const Box&) const = default;
    auto operator<=>(const Box&) const = default;
};

[[nodiscard]] inline double iou(const Box& a, const Box& b)
{
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0.0 || iy <= 0.0) {
        return 0.0;
    }
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

/// Grid cell containing (x, y), or -1 when outside the image.
[[nodiscard]] inline int cell_of(double x, double y)
{
    if (x < 0.0 || y < 0.0 || x >= static_cast<double>(kImageSize) || y >= static_cast<double>(kImageSize)) {
        return -1;
    }
    const auto col = static_cast<std::size_t>(x / static_cast<double>(kCellSize));
    const auto row = static_cast<std::size_t>(y / static_cast<double>(kCellSize));
    return static_cast<int>(row * kGridSize + col);
}

struct Scene {
    Image image;
    std::vector<Box> gt_boxes;
    std::vector<int> gt_labels;
    Domain domain = Domain::clear;

    bool operator==(const Scene&) const = default;
};

struct SceneOptions {
    std::size_t num_classes = 3;
    double min_size = 9.0;
    double max_size = 15.0;
};

namespace detail {

inline bool inside_shape(int label, double px, double py, double cx, double cy, double size)
{
    const double h = 0.5 * size;
    switch (label % 3) {
    case 0: {
        const double dx = px - cx, dy = py - cy;
        return dx * dx + dy * dy <= h * h;
    }
    case 1:
        return std::abs(px - cx) <= h && std::abs(py - cy) <= h;
    default: {
        // Apex up, base on the box bottom.
        const double t = (py - (cy - h)) / size;
        return t >= 0.0 && t <= 1.0 && std::abs(px - cx) <= 0.5 * size * t;
    }
    }
}

inline void gaussian_blur(Image& img, double sigma)
{
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * i * i / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = w;
        ksum += w;
    }
    for (double& w : kernel) {
        w /= ksum;
    }
    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
    Image tmp = img;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int xx = std::clamp(x + k, 0, w - 1);
                    s += kernel[static_cast<std::size_t>(k + radius)] *
                         img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(xx), c);
                }
                tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
            }
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int yy = std::clamp(y + k, 0, h - 1);
                    s += kernel[static_cast<std::size_t>(k + radius)] *
                         tmp.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(x), c);
                }
                img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
            }
        }
    }
}

inline void clamp01(Image& img)
{
    for (double& v : img.data) {
        v = std::clamp(v, 0.0, 1.0);
    }
}

}  // namespace detail

/// Applies a domain's appearance to a clear render. `rng` drives only
/// appearance noise; geometry is already fixed.
inline void apply_domain(Image& img, Domain domain, Rng& rng)
{
    switch (domain) {
    case Domain::clear:
        break;
    case Domain::night:
        for (std::size_t y = 0; y < img.height; ++y) {
            for (std::size_t x = 0; x < img.width; ++x) {
                img.at(y, x, 0) = 0.3 * img.at(y, x, 0);
                img.at(y, x, 1) = 0.3 * img.at(y, x, 1) + 0.02;
                img.at(y, x, 2) = 0.3 * img.at(y, x, 2) + 0.12;
            }
        }
        break;
    case Domain::fog: {
        detail::gaussian_blur(img, 1.2);
        const double m = img.mean();
        for (double& v : img.data) {
            v = 0.5 * (v - m) + m;
        }
        break;
    }
    case Domain::rain: {
        const int streaks = rng.integer(18, 28);
        for (int s = 0; s < streaks; ++s) {
            int x = rng.integer(-16, static_cast<int>(img.width) - 1);
            int y = rng.integer(0, static_cast<int>(img.height) - 1);
            const int len = rng.integer(8, 18);
            const double gain = rng.uniform(0.25, 0.45);
            for (int k = 0; k < len; ++k, ++x, ++y) {
                if (x < 0 || y >= static_cast<int>(img.height) || x >= static_cast<int>(img.width)) {
                    continue;
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    double& v = img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
                    v = v + gain * (1.0 - v);
                }
            }
        }
        for (double& v : img.data) {
            v += rng.normal(0.0, 0.03);
        }
        break;
    }
    }
    detail::clamp01(img);
}

/// Deterministic scene for a seed. Geometry, colors and background come from
/// one stream; the domain's appearance noise from another, so every domain
/// shares the same objects.
[[nodiscard]] inline Scene generate_scene(Domain domain, std::uint64_t seed, const SceneOptions& opts = {})
{
    Rng rng(mix_seed(seed, 0x5ce7e));
    Scene scene;
    scene.domain = domain;

    std::array<double, 3> bg{};
    const double base = rng.uniform(0.7, 0.92);
    for (double& c : bg) {
        c = std::clamp(base + rng.uniform(-0.06, 0.06), 0.0, 1.0);
    }
    const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
    for (std::size_t y = 0; y < kImageSize; ++y) {
        for (std::size_t x = 0; x < kImageSize; ++x) {
            const double ramp = gx * (static_cast<double>(x) / 63.0 - 0.5) + gy * (static_cast<double>(y) / 63.0 - 0.5);
            for (std::size_t c = 0; c < 3; ++c) {
                scene.image.at(y, x, c) = bg[c] + ramp;
            }
        }
    }

    const int count = rng.integer(1, 4);
    std::vector<int> used_cells;
    for (int obj = 0; obj < count; ++obj) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const double size = rng.uniform(opts.min_size, opts.max_size);
            const double h = 0.5 * size;
            const double cx = rng.uniform(h, static_cast<double>(kImageSize) - h);
            const double cy = rng.uniform(h, static_cast<double>(kImageSize) - h);
            const int label = static_cast<int>(rng.index(opts.num_classes));
            std::array<double, 3> color{};
            for (double& c : color) {
                c = rng.uniform(0.0, 0.45);
            }
            const int cell = cell_of(cx, cy);
            if (std::find(used_cells.begin(), used_cells.end(), cell) != used_cells.end()) {
                continue;
            }
            used_cells.push_back(cell);
            const Box box{cx - h, cy - h, cx + h, cy + h};
            for (std::size_t y = 0; y < kImageSize; ++y) {
                for (std::size_t x = 0; x < kImageSize; ++x) {
                    if (detail::inside_shape(label, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx,
                                             cy, size)) {
                        for (std::size_t c = 0; c < 3; ++c) {
                            scene.image.at(y, x, c) = color[c];
                        }
                    }
                }
            }
            scene.gt_boxes.push_back(box);
            scene.gt_labels.push_back(label);
            break;
        }
    }
    detail::clamp01(scene.image);

    Rng appearance(mix_seed(seed, 0xd0a1 + static_cast<std::uint64_t>(domain)));
    apply_domain(scene.image, domain, appearance);
    return scene;
}

struct AugmentParams {
    double crop_scale_min = 0.8;
    double crop_scale_max = 1.0;
    double grayscale_p = 0.3;
    double jitter = 0.2;
};

/// Square crop window in source pixels; resized back to the full image.
struct CropWindow {
    double x0 = 0.0;
    double y0 = 0.0;
    double size = static_cast<double>(kImageSize);
};

[[nodiscard]] inline CropWindow sample_crop(const AugmentParams& p, Rng& rng)
{
    const double s = rng.uniform(p.crop_scale_min, p.crop_scale_max);
    CropWindow w;
    w.size = s * static_cast<double>(kImageSize);
    const double slack = static_cast<double>(kImageSize) - w.size;
    w.x0 = rng.uniform(0.0, 1.0) * slack;
    w.y0 = rng.uniform(0.0, 1.0) * slack;
    return w;
}

/// Bilinear crop-and-resize.
[[nodiscard]] inline Image crop_resize(const Image& src, const CropWindow& w)
{
    Image out;
    const double f = w.size / static_cast<double>(kImageSize);
    const double lim = static_cast<double>(kImageSize) - 1.0;
    for (std::size_t y = 0; y < kImageSize; ++y) {
        for (std::size_t x = 0; x < kImageSize; ++x) {
            const double sx = std::clamp(w.x0 + (static_cast<double>(x) + 0.5) * f - 0.5, 0.0, lim);
            const double sy = std::clamp(w.y0 + (static_cast<double>(y) + 0.5) * f - 0.5, 0.0, lim);
            const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, kImageSize - 1), y1 = std::min(y0 + 1, kImageSize - 1);
            const double ax = sx - static_cast<double>(x0), ay = sy - static_cast<double>(y0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = (1 - ax) * src.at(y0, x0, c) + ax * src.at(y0, x1, c);
                const double bot = (1 - ax) * src.at(y1, x0, c) + ax * src.at(y1, x1, c);
                out.at(y, x, c) = (1 - ay) * top + ay * bot;
            }
        }
    }
    return out;
}

/// Maps boxes into the resized crop. Objects whose center leaves the crop are
/// dropped; the rest are clipped to the image.
inline void crop_boxes(const CropWindow& w, std::vector<Box>& boxes, std::vector<int>& labels)
{
    const double inv = static_cast<double>(kImageSize) / w.size;
    const double lim = static_cast<double>(kImageSize);
    std::vector<Box> kept;
    std::vector<int> kept_labels;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Box& b = boxes[i];
        Box t{(b.x1 - w.x0) * inv, (b.y1 - w.y0) * inv, (b.x2 - w.x0) * inv, (b.y2 - w.y0) * inv};
        if (cell_of(t.cx(), t.cy()) < 0) {
            continue;
        }
        t.x1 = std::clamp(t.x1, 0.0, lim);
        t.y1 = std::clamp(t.y1, 0.0, lim);
        t.x2 = std::clamp(t.x2, 0.0, lim);
        t.y2 = std::clamp(t.y2, 0.0, lim);
        if (t.x2 <= t.x1 || t.y2 <= t.y1) {
            continue;
        }
        kept.push_back(t);
        kept_labels.push_back(labels[i]);
    }
    boxes = std::move(kept);
    labels = std::move(kept_labels);
}

/// Grayscale with probability p, then per-channel contrast and brightness
/// jitter of ±`jitter`, clamped to [0, 1].
[[nodiscard]] inline Image photometric(const Image& src, const AugmentParams& p, Rng& rng)
{
    Image out = src;
    const bool gray = rng.bernoulli(p.grayscale_p);
    if (gray) {
        for (std::size_t y = 0; y < out.height; ++y) {
            for (std::size_t x = 0; x < out.width; ++x) {
                const double g = 0.299 * out.at(y, x, 0) + 0.587 * out.at(y, x, 1) + 0.114 * out.at(y, x, 2);
                out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = g;
            }
        }
    }
    std::array<double, 3> contrast{}, brightness{}, means{};
    for (std::size_t c = 0; c < 3; ++c) {
        contrast[c] = 1.0 + rng.uniform(-p.jitter, p.jitter);
        brightness[c] = rng.uniform(-p.jitter, p.jitter);
    }
    if (gray) {
        // One jitter for all channels so the output stays gray.
        contrast.fill(contrast[0]);
        brightness.fill(brightness[0]);
    }
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                means[c] += out.at(y, x, c);
            }
        }
    }
    const double n = static_cast<double>(out.height * out.width);
    for (double& m : means) {
        m /= n;
    }
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double& v = out.at(y, x, c);
                v = std::clamp((v - means[c]) * contrast[c] + means[c] + brightness[c], 0.0, 1.0);
            }
        }
    }
    return out;
}

struct Augmented {
    Image image;
    std::vector<Box> boxes;
    std::vector<int> labels;
    CropWindow crop;
};

/// Random crop-and-resize, probabilistic grayscale and color jitter.
[[nodiscard]] inline Augmented augment(const Image& image, std::uint64_t seed, const AugmentParams& p = {},
                                       std::vector<Box> boxes = {}, std::vector<int> labels = {})
{
    Rng rng(mix_seed(seed, 0xa06));
    Augmented out;
    out.crop = sample_crop(p, rng);
    out.image = photometric(crop_resize(image, out.crop), p, rng);
    crop_boxes(out.crop, boxes, labels);
    out.boxes = std::move(boxes);
    out.labels = std::move(labels);
    return out;
}

/// Binary PPM (P6) plus a JSON sidecar with boxes and labels.
inline void dump_scene(const Scene& scene, const std::filesystem::path& stem)
{
    {
        std::ofstream ppm(stem.string() + ".ppm", std::ios::binary);
        if (!ppm) {
            throw Error("dump_scene: cannot write " + stem.string() + ".ppm");
        }
        ppm << "P6\n" << scene.image.width << " " << scene.image.height << "\n255\n";
        for (double v : scene.image.data) {
            ppm.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
        }
    }
    nlohmann::json j;
    j["domain"] = std::string(to_string(scene.domain));
    j["objects"] = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.gt_boxes.size(); ++i) {
        const Box& b = scene.gt_boxes[i];
        j["objects"].push_back({{"box", {b.x1, b.y1, b.x2, b.y2}},
                                {"label", scene.gt_labels[i]},
                                {"class", std::string(kShapeNames[static_cast<std::size_t>(scene.gt_labels[i]) % 3])}});
    }
    std::ofstream js(stem.string() + ".json");
    js << j.dump(2) << "\n";
}

}  // namespace didm::toy
