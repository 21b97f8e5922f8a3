#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "meat/data.hpp"
#include "meat/error.hpp"

using namespace meat;

namespace {

TaskFamily bars_family(int palette = 0, std::uint64_t seed = 7) {
    TaskFamily f;
    f.kind = FamilyKind::OrientedBars;
    f.num_classes = 10;
    f.image_size = 32;
    f.palette = palette;
    f.noise = 0.05;
    f.seed = seed;
    return f;
}

std::vector<double> channel_means(const Dataset& ds) {
    std::vector<double> mean(ds.channels, 0.0);
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t i = 0; i < ds.count; ++i) {
        const double* img = ds.image(i);
        for (std::size_t c = 0; c < ds.channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) mean[c] += img[c * plane + p];
        }
    }
    for (double& m : mean) m /= static_cast<double>(ds.count * plane);
    return mean;
}

}  // namespace

TEST_CASE("generation is deterministic and class-balanced") {
    TaskFamily fam = bars_family();
    auto [train_a, test_a] = generate_task(fam, 1000, 100);
    auto [train_b, test_b] = generate_task(fam, 1000, 100);
    CHECK(train_a.images == train_b.images);
    CHECK(train_a.labels == train_b.labels);
    CHECK(test_a.images == test_b.images);

    std::vector<int> per_class(10, 0);
    for (int y : train_a.labels) per_class[static_cast<std::size_t>(y)]++;
    for (int count : per_class) CHECK(count == 100);

    CHECK(train_a.count == 1000);
    CHECK(train_a.split == "train");
    CHECK(test_a.split == "test");
    CHECK(train_a.num_classes == 10);
    for (int y : train_a.labels) CHECK(y < 10);

    // Different seeds and different splits differ.
    auto [train_c, test_c] = generate_task(bars_family(0, 8), 1000, 100);
    CHECK(train_a.images != train_c.images);
    CHECK(std::vector<double>(train_a.images.begin(), train_a.images.begin() + 3072) !=
          std::vector<double>(test_a.images.begin(), test_a.images.begin() + 3072));

    CHECK_THROWS_AS(generate_task(fam, 1001, 100), ConfigError);
    CHECK_THROWS_AS(generate_task(fam, 0, 100), ConfigError);
}

TEST_CASE("pixels stay on the 1/255 grid in [0,1]") {
    for (FamilyKind kind : {FamilyKind::OrientedBars, FamilyKind::TexturedPatches,
                            FamilyKind::ColorGrid, FamilyKind::BarsDistractor}) {
        TaskFamily fam = bars_family(1, 3);
        fam.kind = kind;
        auto [train, test] = generate_task(fam, 10, 10);
        for (double v : train.images) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(v == std::round(v * 255.0) / 255.0);
        }
    }
}

TEST_CASE("disjoint palettes shift channel statistics") {
    auto [a_train, a_test] = generate_task(bars_family(0), 200, 10);
    auto [b_train, b_test] = generate_task(bars_family(1), 200, 10);
    std::vector<double> ma = channel_means(a_train);
    std::vector<double> mb = channel_means(b_train);
    double max_diff = 0.0;
    for (std::size_t c = 0; c < 3; ++c) max_diff = std::max(max_diff, std::abs(ma[c] - mb[c]));
    CHECK(max_diff > 0.1);
}

TEST_CASE("normalization applies once and reuses base statistics") {
    auto [train, test] = generate_task(bars_family(), 100, 10);
    ChannelStats stats = compute_channel_stats(train);
    CHECK(stats.mean.size() == 3);

    Dataset normalized = train;
    normalize(normalized, stats);
    CHECK(normalized.normalized);
    std::vector<double> post = channel_means(normalized);
    for (double m : post) CHECK(std::abs(m) < 1e-9);

    CHECK_THROWS_AS(normalize(normalized, stats), ContractError);
}

TEST_CASE("dataset container round-trips") {
    auto [train, test] = generate_task(bars_family(2, 77), 50, 10);
    std::vector<std::uint8_t> bytes = dataset_bytes(train);

    // header(30) + pixels + one label byte per image
    CHECK(bytes.size() == 30 + 50 * 3 * 32 * 32 + 50);

    Dataset back = dataset_from_bytes(bytes);
    CHECK(back.images == train.images);  // pixels preserved exactly
    CHECK(back.labels == train.labels);
    CHECK(back.count == train.count);
    CHECK(back.num_classes == train.num_classes);
    CHECK(back.split == train.split);
    CHECK(dataset_bytes(back) == bytes);

    Dataset norm = train;
    normalize(norm, compute_channel_stats(train));
    CHECK_THROWS_AS(dataset_bytes(norm), ContractError);
}

TEST_CASE("dataset container errors name the field and offset") {
    auto [train, test] = generate_task(bars_family(), 10, 10);
    std::vector<std::uint8_t> bytes = dataset_bytes(train);

    std::vector<std::uint8_t> bad_magic = bytes;
    bad_magic[2] ^= 0x10;
    CHECK_THROWS_AS(dataset_from_bytes(bad_magic), FormatError);

    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
    try {
        dataset_from_bytes(truncated);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("byte") != std::string::npos);
    }

    // Label >= num_classes reports the offending byte offset.
    std::vector<std::uint8_t> overflow = bytes;
    overflow[overflow.size() - 1] = 200;
    try {
        dataset_from_bytes(overflow);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("label overflow") != std::string::npos);
        CHECK(msg.find(std::to_string(overflow.size() - 1)) != std::string::npos);
    }
}

TEST_CASE("batch iteration partitions each epoch") {
    BatchIter iter(10, 4, 99, true);
    auto batches = iter.epoch();
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 4);
    CHECK(batches[1].size() == 4);
    CHECK(batches[2].size() == 2);

    std::set<std::size_t> seen;
    for (const auto& b : batches) {
        for (std::size_t i : b) seen.insert(i);
    }
    CHECK(seen.size() == 10);

    // Same seed reproduces the same epoch permutations.
    BatchIter again(10, 4, 99, true);
    CHECK(again.epoch() == batches);

    // Epochs differ from each other; unshuffled iteration is the identity.
    CHECK(iter.epoch() != batches);
    BatchIter plain(6, 4, 1, false);
    auto ordered = plain.epoch();
    CHECK(ordered[0] == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(ordered[1] == std::vector<std::size_t>{4, 5});

    CHECK_THROWS_AS(BatchIter(10, 0, 1, true), ConfigError);
}

TEST_CASE("family name round-trip") {
    for (FamilyKind kind : {FamilyKind::OrientedBars, FamilyKind::TexturedPatches,
                            FamilyKind::ColorGrid, FamilyKind::BarsDistractor}) {
        CHECK(family_kind_from_string(to_string(kind)) == kind);
    }
    CHECK_THROWS_AS(family_kind_from_string("nope"), ConfigError);
}
