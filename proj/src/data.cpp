#include "meat/data.hpp"

#include <algorithm>
#include <cmath>

#include "meat/bytes.hpp"
#include "meat/error.hpp"
#include "meat/rng.hpp"

namespace meat {

namespace {

struct Palette {
    double bg[3];
    double fg[3];
    double accent[3];
};

// Backgrounds are far apart per channel so distinct palettes shift the
// dataset statistics by a detectable margin.
constexpr Palette kPalettes[] = {
    {{0.15, 0.35, 0.60}, {0.95, 0.85, 0.30}, {0.90, 0.25, 0.20}},
    {{0.65, 0.20, 0.15}, {0.20, 0.90, 0.75}, {0.95, 0.90, 0.85}},
    {{0.10, 0.55, 0.25}, {0.90, 0.40, 0.85}, {0.15, 0.10, 0.40}},
    {{0.80, 0.75, 0.70}, {0.10, 0.15, 0.35}, {0.55, 0.50, 0.10}},
    {{0.35, 0.10, 0.45}, {0.75, 0.95, 0.20}, {0.20, 0.75, 0.90}},
    {{0.05, 0.05, 0.10}, {0.95, 0.95, 0.90}, {0.60, 0.60, 0.20}},
};
constexpr int kPaletteCount = static_cast<int>(sizeof(kPalettes) / sizeof(kPalettes[0]));

constexpr double kPi = 3.141592653589793;

void fill(std::vector<double>& img, std::size_t hw, const double rgb[3]) {
    for (std::size_t c = 0; c < 3; ++c) {
        std::fill(img.begin() + c * hw * hw, img.begin() + (c + 1) * hw * hw, rgb[c]);
    }
}

void set_px(std::vector<double>& img, std::size_t hw, std::size_t x, std::size_t y,
            const double rgb[3]) {
    for (std::size_t c = 0; c < 3; ++c) img[c * hw * hw + y * hw + x] = rgb[c];
}

// Bar through (cx, cy) at angle theta: pixels within `thick` of the axis and
// `len` along it.
void draw_bar(std::vector<double>& img, std::size_t hw, double cx, double cy, double theta,
              double thick, double len, const double rgb[3]) {
    const double dx = std::cos(theta), dy = std::sin(theta);
    for (std::size_t y = 0; y < hw; ++y) {
        for (std::size_t x = 0; x < hw; ++x) {
            const double rx = static_cast<double>(x) - cx;
            const double ry = static_cast<double>(y) - cy;
            const double along = rx * dx + ry * dy;
            const double across = std::abs(rx * dy - ry * dx);
            if (across <= thick && std::abs(along) <= len) set_px(img, hw, x, y, rgb);
        }
    }
}

std::vector<double> render(const TaskFamily& fam, int label, Rng& rng) {
    const std::size_t hw = fam.image_size;
    const Palette& pal = kPalettes[fam.palette % kPaletteCount];
    std::vector<double> img(3 * hw * hw);
    const double s = static_cast<double>(hw);
    const double jx = rng.uniform(-fam.jitter, fam.jitter);
    const double jy = rng.uniform(-fam.jitter, fam.jitter);

    switch (fam.kind) {
        case FamilyKind::OrientedBars: {
            fill(img, hw, pal.bg);
            const double theta = kPi * label / static_cast<double>(fam.num_classes);
            draw_bar(img, hw, s / 2 + jx, s / 2 + jy, theta, 2.0, 0.4 * s, pal.fg);
            break;
        }
        case FamilyKind::TexturedPatches: {
            const double freq = 2.0 + static_cast<double>(label % 4);
            const double phi = kPi / 4.0 * static_cast<double>(label / 4);
            const double phase = rng.uniform(0.0, 2.0 * kPi);
            for (std::size_t y = 0; y < hw; ++y) {
                for (std::size_t x = 0; x < hw; ++x) {
                    const double u = (x * std::cos(phi) + y * std::sin(phi)) / s;
                    const bool on = std::sin(2.0 * kPi * freq * u + phase) > 0.0;
                    set_px(img, hw, x, y, on ? pal.fg : pal.bg);
                }
            }
            break;
        }
        case FamilyKind::ColorGrid: {
            const double* colors[3] = {pal.bg, pal.fg, pal.accent};
            int code = label;
            for (std::size_t cell = 0; cell < 4; ++cell) {
                const double* rgb = colors[code % 3];
                code /= 3;
                const std::size_t x0 = (cell % 2) * (hw / 2);
                const std::size_t y0 = (cell / 2) * (hw / 2);
                for (std::size_t y = y0; y < y0 + hw / 2; ++y) {
                    for (std::size_t x = x0; x < x0 + hw / 2; ++x) set_px(img, hw, x, y, rgb);
                }
            }
            break;
        }
        case FamilyKind::BarsDistractor: {
            fill(img, hw, pal.bg);
            // Distractor bars in the outer ring, same color as the signal bar.
            const int distractors = 5;
            for (int i = 0; i < distractors; ++i) {
                const double angle = rng.uniform(0.0, kPi);
                double cx, cy;
                do {
                    cx = rng.uniform(0.1 * s, 0.9 * s);
                    cy = rng.uniform(0.1 * s, 0.9 * s);
                } while (cx >= 0.3 * s && cx < 0.7 * s && cy >= 0.3 * s && cy < 0.7 * s);
                draw_bar(img, hw, cx, cy, angle, 1.5, 0.14 * s, pal.fg);
            }
            // Class signal confined to the central patches.
            const double theta = kPi * label / static_cast<double>(fam.num_classes);
            draw_bar(img, hw, s / 2 + jx * 0.5, s / 2 + jy * 0.5, theta, 1.5, 0.2 * s, pal.fg);
            break;
        }
    }

    for (double& v : img) {
        v += rng.uniform(-fam.noise, fam.noise);
        v = std::min(1.0, std::max(0.0, v));
        v = std::round(v * 255.0) / 255.0;  // keep pixels on the container grid
    }
    return img;
}

Dataset generate_split(const TaskFamily& fam, std::size_t n, const char* split,
                       std::uint64_t split_tag) {
    Dataset ds;
    ds.count = n;
    ds.channels = fam.channels;
    ds.height = fam.image_size;
    ds.width = fam.image_size;
    ds.num_classes = fam.num_classes;
    ds.split = split;
    ds.provenance = to_string(fam.kind) + "/classes=" + std::to_string(fam.num_classes) +
                    "/palette=" + std::to_string(fam.palette) +
                    "/seed=" + std::to_string(fam.seed);
    ds.images.resize(n * ds.image_size());
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % fam.num_classes);
        Rng rng(seed_mix(fam.seed, seed_mix(split_tag, i)));
        std::vector<double> img = render(fam, label, rng);
        std::copy(img.begin(), img.end(), ds.images.begin() + i * ds.image_size());
        ds.labels[i] = label;
    }
    return ds;
}

}  // namespace

FamilyKind family_kind_from_string(const std::string& name) {
    if (name == "bars") return FamilyKind::OrientedBars;
    if (name == "textures") return FamilyKind::TexturedPatches;
    if (name == "colorgrid") return FamilyKind::ColorGrid;
    if (name == "bars_distractor") return FamilyKind::BarsDistractor;
    throw ConfigError("unknown task family: " + name);
}

std::string to_string(FamilyKind kind) {
    switch (kind) {
        case FamilyKind::OrientedBars: return "bars";
        case FamilyKind::TexturedPatches: return "textures";
        case FamilyKind::ColorGrid: return "colorgrid";
        case FamilyKind::BarsDistractor: return "bars_distractor";
    }
    return "?";
}

std::pair<Dataset, Dataset> generate_task(const TaskFamily& family, std::size_t n_train,
                                          std::size_t n_test) {
    if (n_train == 0 || n_test == 0) throw ConfigError("generate_task: empty split");
    if (family.num_classes == 0 || family.channels != 3) {
        throw ConfigError("generate_task: bad family");
    }
    if (family.kind == FamilyKind::ColorGrid && family.num_classes > 81) {
        throw ConfigError("generate_task: colorgrid supports at most 81 classes");
    }
    if (n_train % family.num_classes != 0 || n_test % family.num_classes != 0) {
        throw ConfigError("generate_task: split size not divisible by class count");
    }
    return {generate_split(family, n_train, "train", 1), generate_split(family, n_test, "test", 2)};
}

ChannelStats compute_channel_stats(const Dataset& ds) {
    ChannelStats st;
    st.mean.assign(ds.channels, 0.0);
    st.std_dev.assign(ds.channels, 0.0);
    const std::size_t plane = ds.height * ds.width;
    const std::size_t per_channel = ds.count * plane;
    for (std::size_t i = 0; i < ds.count; ++i) {
        const double* img = ds.image(i);
        for (std::size_t c = 0; c < ds.channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) st.mean[c] += img[c * plane + p];
        }
    }
    for (std::size_t c = 0; c < ds.channels; ++c) st.mean[c] /= static_cast<double>(per_channel);
    for (std::size_t i = 0; i < ds.count; ++i) {
        const double* img = ds.image(i);
        for (std::size_t c = 0; c < ds.channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                const double d = img[c * plane + p] - st.mean[c];
                st.std_dev[c] += d * d;
            }
        }
    }
    for (std::size_t c = 0; c < ds.channels; ++c) {
        st.std_dev[c] = std::max(std::sqrt(st.std_dev[c] / static_cast<double>(per_channel)), 1e-6);
    }
    return st;
}

void normalize(Dataset& ds, const ChannelStats& stats) {
    if (ds.normalized) throw ContractError("dataset already normalized");
    if (stats.mean.size() != ds.channels) throw ShapeError("normalize: channel mismatch");
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t i = 0; i < ds.count; ++i) {
        double* img = ds.images.data() + i * ds.image_size();
        for (std::size_t c = 0; c < ds.channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                img[c * plane + p] = (img[c * plane + p] - stats.mean[c]) / stats.std_dev[c];
            }
        }
    }
    ds.normalized = true;
}

// ---------------------------------------------------------------------------
// "MEATDAT1" container
// ---------------------------------------------------------------------------

namespace {
constexpr char kDataMagic[9] = "MEATDAT1";
}

std::vector<std::uint8_t> dataset_bytes(const Dataset& ds) {
    if (ds.normalized) throw ContractError("cannot serialize a normalized dataset");
    if (ds.num_classes == 0 || ds.num_classes > 255) {
        throw ConfigError("dataset container supports 1..255 classes");
    }
    ByteWriter w;
    w.magic(kDataMagic);
    w.u8(1);  // version
    w.u32(static_cast<std::uint32_t>(ds.count));
    w.u32(static_cast<std::uint32_t>(ds.channels));
    w.u32(static_cast<std::uint32_t>(ds.height));
    w.u32(static_cast<std::uint32_t>(ds.width));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    w.u8(ds.split == "test" ? 1 : 0);
    for (double v : ds.images) {
        w.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    for (int label : ds.labels) w.u8(static_cast<std::uint8_t>(label));
    return w.data();
}

Dataset dataset_from_bytes(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    r.expect_magic(kDataMagic, "dataset file");
    if (r.u8("version") != 1) throw FormatError("dataset file: unsupported version");
    Dataset ds;
    ds.count = r.u32("count");
    ds.channels = r.u32("channels");
    ds.height = r.u32("height");
    ds.width = r.u32("width");
    ds.num_classes = r.u32("num_classes");
    if (ds.num_classes == 0) throw FormatError("dataset file: num_classes field is zero");
    ds.split = r.u8("split tag") == 1 ? "test" : "train";
    const std::size_t total = ds.count * ds.image_size();
    ds.images.resize(total);
    for (std::size_t i = 0; i < total; ++i) {
        ds.images[i] = static_cast<double>(r.u8("pixel")) / 255.0;
    }
    ds.labels.resize(ds.count);
    for (std::size_t i = 0; i < ds.count; ++i) {
        const std::size_t at = r.offset();
        const std::uint8_t label = r.u8("label");
        if (label >= ds.num_classes) {
            throw FormatError("label overflow at byte " + std::to_string(at) + ": " +
                              std::to_string(label) + " >= " + std::to_string(ds.num_classes));
        }
        ds.labels[i] = label;
    }
    r.expect_done("dataset file");
    ds.provenance = "container/digest=" + std::to_string(fnv1a(bytes.data(), bytes.size()));
    return ds;
}

void save_raw_dataset(const Dataset& ds, const std::string& path) {
    write_file_bytes(path, dataset_bytes(ds));
}

Dataset load_raw_dataset(const std::string& path) {
    return dataset_from_bytes(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

BatchIter::BatchIter(std::size_t count, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : count_(count), batch_size_(batch_size), shuffle_(shuffle), seed_(seed) {
    if (batch_size_ == 0) throw ConfigError("batch size must be >= 1");
}

std::vector<std::vector<std::size_t>> BatchIter::epoch() {
    std::vector<std::size_t> order(count_);
    for (std::size_t i = 0; i < count_; ++i) order[i] = i;
    if (shuffle_) {
        Rng rng(seed_mix(seed_, 0xB000 + epoch_index_));
        rng.shuffle(order);
    }
    ++epoch_index_;
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count_; start += batch_size_) {
        const std::size_t end = std::min(count_, start + batch_size_);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace meat
