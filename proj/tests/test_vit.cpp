#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "meat/error.hpp"
#include "meat/grad_check.hpp"
#include "meat/ops.hpp"
#include "meat/rng.hpp"
#include "meat/vit.hpp"
#include "oracles.hpp"

using namespace meat;

namespace {

ViTConfig mini_config() {
    ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.channels = 3;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ffn_hidden = 32;
    return cfg;
}

Tensor random_image(const ViTConfig& cfg, Rng& rng) {
    std::vector<double> v(cfg.channels * cfg.image_size * cfg.image_size);
    for (double& x : v) x = rng.uniform();
    return Tensor::from({cfg.channels, cfg.image_size, cfg.image_size}, std::move(v));
}

// Standard (unmasked) MHSA computed with the plain softmax path; the reference
// the masked block must reduce to when every token weight is 1.
Tensor standard_mhsa(const ViTModel& model, const Tensor& x, std::size_t layer,
                     std::size_t batch) {
    const EncoderLayer& e = model.layers[layer];
    const ViTConfig& cfg = model.config();
    const std::size_t dk = cfg.head_dim();
    Tensor q = add_rowvec(matmul(x, e.wq), e.bq);
    Tensor k = add_rowvec(matmul(x, e.wk), e.bk);
    Tensor v = add_rowvec(matmul(x, e.wv), e.bv);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor probs = softmax_rows(attn_scores(qh, kh, batch, 1.0 / std::sqrt(double(dk))));
        heads.push_back(attn_apply(probs, vh, batch));
    }
    return add_rowvec(matmul(concat_cols(heads), e.wo), e.bo);
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("config validation and derived sizes") {
    ViTConfig cfg;  // desk defaults
    cfg.validate();
    CHECK(cfg.num_image_tokens() == 16);
    CHECK(cfg.seq_len() == 17);
    CHECK(cfg.head_dim() == 16);
    CHECK(cfg.patch_dim() == 192);

    ViTConfig bad = cfg;
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.patch_size = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(config_digest(cfg) != config_digest(mini_config()));
    CHECK(config_digest(cfg) == config_digest(ViTConfig{}));
}

TEST_CASE("patch_embed shape, zero case, determinism") {
    ViTConfig cfg;  // 32x32, patch 8 -> 16 image tokens + class token
    ViTModel model(cfg, 7);
    Rng rng(1);
    Tensor img = random_image(cfg, rng);
    Tensor emb = model.patch_embed(img);
    CHECK(emb.shape() == std::vector<std::size_t>{17, 64});

    Tensor emb2 = model.patch_embed(img);
    CHECK(same_bits(emb, emb2));

    // Zero image: embedding is class token + position rows.
    Tensor zero = Tensor::zeros({cfg.channels, cfg.image_size, cfg.image_size});
    Tensor ze = model.patch_embed(zero);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        CHECK(ze.at(0, j) == model.cls_token.data()[j] + model.pos_embed.at(0, j));
        CHECK(ze.at(5, j) ==
              model.patch_bias.data()[j] + model.pos_embed.at(5, j));
    }

    CHECK_THROWS_AS(model.patch_embed(Tensor::zeros({3, 8, 8})), ConfigError);
}

TEST_CASE("mhsa with all-ones weights equals standard attention") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 13);
    Rng rng(5);
    const std::size_t s = cfg.seq_len();
    std::vector<double> xd(s * cfg.embed_dim);
    for (double& v : xd) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from({s, cfg.embed_dim}, xd);

    Tensor masked = model.mhsa_forward(x, 0, Tensor::ones({cfg.num_image_tokens()}));
    Tensor plain = standard_mhsa(model, x, 0, 1);
    for (std::size_t i = 0; i < masked.numel(); ++i) {
        CHECK(std::abs(masked.data()[i] - plain.data()[i]) <= 1e-15);
    }
}

TEST_CASE("mhsa with all-zero weights attends only to the class token") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 99);
    Rng rng(3);
    const std::size_t s = cfg.seq_len();
    std::vector<double> xd(s * cfg.embed_dim);
    for (double& v : xd) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from({s, cfg.embed_dim}, xd);

    MhsaTrace trace;
    model.mhsa_forward(x, 0, Tensor::zeros({cfg.num_image_tokens()}), 1, &trace);
    REQUIRE(trace.attn.size() == cfg.heads);
    for (const Tensor& probs : trace.attn) {
        for (std::size_t i = 0; i < s; ++i) {
            CHECK(probs.at(i, 0) == 1.0);
            for (std::size_t j = 1; j < s; ++j) CHECK(probs.at(i, j) == 0.0);
        }
    }
}

TEST_CASE("mhsa attention rows match the delete-and-renormalize oracle") {
    ViTConfig cfg = mini_config();  // n = 4
    ViTModel model(cfg, 21);
    Rng rng(9);
    const std::size_t s = cfg.seq_len();
    std::vector<double> xd(s * cfg.embed_dim);
    for (double& v : xd) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from({s, cfg.embed_dim}, xd);

    Tensor w = Tensor::from({4}, {1.0, 0.0, 1.0, 0.0});
    MhsaTrace trace;
    model.mhsa_forward(x, 0, w, 1, &trace);

    // Rebuild per-head scores independently and compare each row.
    const EncoderLayer& e = model.layers[0];
    const std::size_t dk = cfg.head_dim();
    Tensor q = add_rowvec(matmul(x, e.wq), e.bq);
    Tensor k = add_rowvec(matmul(x, e.wk), e.bk);
    const std::vector<double> key_w = {1.0, 1.0, 0.0, 1.0, 0.0};
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor scores = attn_scores(qh, kh, 1, 1.0 / std::sqrt(double(dk)));
        for (std::size_t i = 0; i < s; ++i) {
            std::vector<double> row(s);
            for (std::size_t j = 0; j < s; ++j) row[j] = scores.at(i, j);
            std::vector<double> want = oracle::delete_and_renormalize(row, key_w);
            for (std::size_t j = 0; j < s; ++j) {
                CHECK(std::abs(trace.attn[h].at(i, j) - want[j]) < 1e-12);
            }
        }
    }
}

TEST_CASE("key-side masking: zero column, intact query row, class always active") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 31);
    Rng rng(17);
    const std::size_t s = cfg.seq_len();
    std::vector<double> xd(s * cfg.embed_dim);
    for (double& v : xd) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from({s, cfg.embed_dim}, xd);

    // Isolate image token 1 (sequence position 2).
    Tensor w = Tensor::from({4}, {1.0, 0.0, 1.0, 1.0});
    MhsaTrace trace;
    Tensor out = model.mhsa_forward(x, 0, w, 1, &trace);
    for (const Tensor& probs : trace.attn) {
        for (std::size_t i = 0; i < s; ++i) {
            CHECK(probs.at(i, 2) == 0.0);  // nobody attends to the isolated key
            CHECK(probs.at(i, 0) > 0.0);   // class token stays attendable
            double total = 0.0;
            for (std::size_t j = 0; j < s; ++j) {
                CHECK(probs.at(i, j) >= 0.0);
                total += probs.at(i, j);
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
    // The isolated token's own output row is still computed (nonzero in general).
    double row_norm = 0.0;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) row_norm += std::abs(out.at(2, j));
    CHECK(row_norm > 0.0);
}

TEST_CASE("ffn mask cases") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 41);
    Rng rng(23);
    const std::size_t s = cfg.seq_len();
    std::vector<double> xd(s * cfg.embed_dim);
    for (double& v : xd) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from({s, cfg.embed_dim}, xd);

    const EncoderLayer& e = model.layers[0];
    Tensor ones1 = Tensor::ones(e.w1.shape());
    Tensor ones2 = Tensor::ones(e.w2.shape());

    // All-ones masks reproduce the unmasked block bitwise.
    Tensor masked = model.ffn_forward(x, 0, ones1, ones2);
    Tensor plain = add_rowvec(matmul(gelu(add_rowvec(matmul(x, e.w1), e.b1)), e.w2), e.b2);
    CHECK(same_bits(masked, plain));

    // All-zero masks with zero biases produce exactly zero.
    ViTModel zb = model.clone();
    std::fill(zb.layers[0].b1.data().begin(), zb.layers[0].b1.data().end(), 0.0);
    std::fill(zb.layers[0].b2.data().begin(), zb.layers[0].b2.data().end(), 0.0);
    Tensor zeroed = zb.ffn_forward(x, 0, Tensor::zeros(e.w1.shape()), Tensor::zeros(e.w2.shape()));
    for (double v : zeroed.data()) CHECK(v == 0.0);

    // A single weight of 3.5 contributes nothing under m=0 and its full value
    // under m=1.
    ViTModel probe(cfg, 43);
    std::fill(probe.layers[0].w1.data().begin(), probe.layers[0].w1.data().end(), 0.0);
    probe.layers[0].w1.data()[0 * cfg.ffn_hidden + 0] = 3.5;  // W1[0,0]
    std::fill(probe.layers[0].b1.data().begin(), probe.layers[0].b1.data().end(), 0.0);
    Tensor xin = Tensor::zeros({1, cfg.embed_dim});
    xin.data()[0] = 1.0;
    Tensor m0 = Tensor::zeros(e.w1.shape());
    Tensor m1 = Tensor::zeros(e.w1.shape());
    m1.data()[0] = 1.0;
    Tensor pre0 = matmul(xin, mul(m0, probe.layers[0].w1));
    Tensor pre1 = matmul(xin, mul(m1, probe.layers[0].w1));
    CHECK(pre0.at(0, 0) == 0.0);
    CHECK(pre1.at(0, 0) == 3.5);

    CHECK_THROWS_AS(model.ffn_forward(x, 0, Tensor::ones({2, 2}), ones2), ContractError);
}

TEST_CASE("forward: task-0 pattern, determinism, shapes, errors") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 55);
    model.add_head(0, 7, 1);
    model.add_head(3, 4, 2);
    Rng rng(29);
    Tensor img = random_image(cfg, rng);

    Tensor implicit = model.forward(img, 0);
    MaskStack ones = all_ones_masks(cfg);
    Tensor explicit_ones = model.forward(img, 0, &ones);
    CHECK(same_bits(implicit, explicit_ones));

    CHECK(same_bits(model.forward(img, 0), model.forward(img, 0)));
    CHECK(implicit.shape() == std::vector<std::size_t>{7});
    CHECK(model.forward(img, 3).shape() == std::vector<std::size_t>{4});

    CHECK_THROWS_AS(model.forward(img, 1), LookupError);
    MaskStack short_stack(1, ones[0]);
    CHECK_THROWS_AS(model.forward(img, 0, &short_stack), ContractError);
}

TEST_CASE("frozen backbone: logits are a pure function of (image, task, masks)") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 77);
    model.add_head(0, 5, 1);
    model.freeze_backbone();
    CHECK(model.frozen());
    const std::uint64_t checksum = model.backbone_checksum();

    Rng rng(31);
    Tensor img = random_image(cfg, rng);
    Tensor before = model.forward(img, 0);

    // Register and mutate another task's head; task-0 logits must not move.
    model.add_head(2, 9, 123);
    for (double& v : model.head(2).weight.data()) v += 1.0;
    Tensor after = model.forward(img, 0);
    CHECK(same_bits(before, after));
    CHECK(model.backbone_checksum() == checksum);

    // Backward through a frozen model deposits no gradients on the backbone.
    MaskStack ones = all_ones_masks(cfg);
    Tensor logits = model.forward_rows(patch_rows(cfg, {img.data().data()}), 1, 0, &ones);
    backward(cross_entropy(logits, {1}));
    CHECK_FALSE(model.patch_proj.has_grad());
    CHECK_FALSE(model.layers[0].wq.has_grad());
    CHECK(model.head(0).weight.has_grad());
}

TEST_CASE("full-model gradient flows to relaxed masks and matches finite differences") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 91);
    model.add_head(1, 3, 5);
    model.freeze_backbone();
    Rng rng(37);
    Tensor img = random_image(cfg, rng);
    Tensor rows = patch_rows(cfg, {img.data().data()});

    // Token-weight gradients of layer 0 under a full forward + cross-entropy.
    auto f = [&](const Tensor& tw) {
        MaskStack masks = all_ones_masks(cfg);
        masks[0].token_weights = tw;
        Tensor logits = model.forward_rows(rows, 1, 1, &masks);
        return cross_entropy(logits, {2});
    };
    Tensor tw0 = Tensor::from({cfg.num_image_tokens()}, {0.3, 0.9, 0.6, 0.8});
    CHECK(grad_check(f, tw0, 1e-5) < 1e-4);

    // FFN mask gradients, sampled entries.
    auto g = [&](const Tensor& m1) {
        MaskStack masks = all_ones_masks(cfg);
        masks[1].ffn1 = m1;
        Tensor logits = model.forward_rows(rows, 1, 1, &masks);
        return cross_entropy(logits, {0});
    };
    std::vector<double> m1d(cfg.embed_dim * cfg.ffn_hidden);
    for (double& v : m1d) v = rng.uniform(0.2, 0.8);
    Tensor m1 = Tensor::from({cfg.embed_dim, cfg.ffn_hidden}, m1d);
    CHECK(grad_check_sampled(g, m1, 1e-5, 48, 1234) < 1e-4);
}

TEST_CASE("checkpoint round-trip is byte-exact") {
    ViTConfig cfg = mini_config();
    ViTModel model(cfg, 101);
    model.add_head(0, 6, 11);
    model.add_head(4, 3, 12);
    model.freeze_backbone();

    std::vector<std::uint8_t> bytes = checkpoint_bytes(model);
    ViTModel loaded = model_from_checkpoint_bytes(bytes);
    CHECK(checkpoint_bytes(loaded) == bytes);
    CHECK(loaded.frozen());
    CHECK(loaded.backbone_checksum() == model.backbone_checksum());
    CHECK(loaded.config() == cfg);

    Rng rng(41);
    Tensor img = random_image(cfg, rng);
    CHECK(same_bits(model.forward(img, 4), loaded.forward(img, 4)));

    std::vector<std::uint8_t> corrupt = bytes;
    corrupt[0] ^= 0xFF;
    CHECK_THROWS_AS(model_from_checkpoint_bytes(corrupt), FormatError);

    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 40);
    try {
        model_from_checkpoint_bytes(truncated);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
}
