#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace meat {

// In-memory image classification dataset. Pixels are row-major N x C x H x W
// doubles on the 1/255 grid in [0,1] until normalize() is applied.
struct Dataset {
    std::vector<double> images;
    std::vector<int> labels;
    std::size_t count = 0;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t num_classes = 0;
    std::string split;       // "train" or "test"
    std::string provenance;  // generator parameters or file digest
    bool normalized = false;

    std::size_t image_size() const { return channels * height * width; }
    const double* image(std::size_t i) const { return images.data() + i * image_size(); }
};

enum class FamilyKind {
    OrientedBars,     // class = bar orientation, full image
    TexturedPatches,  // class = stripe frequency/orientation texture
    ColorGrid,        // class = block color permutation
    BarsDistractor,   // class bar confined to the center; outer patches carry
                      // high-contrast random-orientation distractor bars
};

FamilyKind family_kind_from_string(const std::string& name);
std::string to_string(FamilyKind kind);

// Deterministic generator description: same (kind, parameters, seed) always
// produces byte-identical datasets.
struct TaskFamily {
    FamilyKind kind = FamilyKind::OrientedBars;
    std::size_t num_classes = 10;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    int palette = 0;       // index into the built-in palette table
    double noise = 0.05;   // additive pixel noise half-range
    double jitter = 2.0;   // positional jitter in pixels
    std::uint64_t seed = 0;
};

// Class-balanced train/test pair; throws ConfigError when n % num_classes != 0.
std::pair<Dataset, Dataset> generate_task(const TaskFamily& family, std::size_t n_train,
                                          std::size_t n_test);

// Per-channel statistics of the base task, reused to normalize every task.
struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std_dev;
};
ChannelStats compute_channel_stats(const Dataset& ds);

// (x - mean_c) / std_c in place; a dataset can only be normalized once.
void normalize(Dataset& ds, const ChannelStats& stats);

// ---------------------------------------------------------------------------
// "MEATDAT1" container: uint8 pixels + one label byte per image.
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> dataset_bytes(const Dataset& ds);
Dataset dataset_from_bytes(const std::vector<std::uint8_t>& bytes);
void save_raw_dataset(const Dataset& ds, const std::string& path);
Dataset load_raw_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// Seeded epoch iteration: reshuffles per epoch, final partial batch included.
// ---------------------------------------------------------------------------

class BatchIter {
public:
    BatchIter(std::size_t count, std::size_t batch_size, std::uint64_t seed, bool shuffle);

    // Index sets of one full epoch, in iteration order.
    std::vector<std::vector<std::size_t>> epoch();

private:
    std::size_t count_;
    std::size_t batch_size_;
    bool shuffle_;
    std::uint64_t seed_;
    std::size_t epoch_index_ = 0;
};

}  // namespace meat
