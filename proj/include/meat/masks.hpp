#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meat/rng.hpp"
#include "meat/tensor.hpp"
#include "meat/vit.hpp"

namespace meat {

// Mask-training hyperparameters. Defaults follow the standard recipe:
// init half-range 4, drop-control weight 2, target activation 0.9.
struct MeatHyper {
    double gamma = 4.0;
    double alpha = 2.0;
    double lambda = 0.9;
    double tau = 1.0;
    bool anneal_tau = false;  // optional linear anneal of tau to 0.5 over training
};

// Seeded Gumbel noise stream. pinned() builds a test sampler that returns a
// fixed value on every draw.
class GumbelSampler {
public:
    explicit GumbelSampler(std::uint64_t seed) : rng_(seed) {}
    static GumbelSampler pinned(double value) {
        GumbelSampler s(0);
        s.pinned_ = true;
        s.pin_value_ = value;
        return s;
    }
    double gumbel() { return pinned_ ? pin_value_ : rng_.gumbel(); }
    std::vector<double> draw(std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = gumbel();
        return v;
    }

private:
    Rng rng_;
    bool pinned_ = false;
    double pin_value_ = 0.0;
};

// Trainable per-task mask logits. Column 0 of every logit pair scores
// "active", column 1 scores "isolated".
struct MaskParams {
    std::vector<Tensor> token_logits;  // per layer, [n, 2]
    std::vector<Tensor> ffn1_logits;   // per layer, [d*d', 2]
    std::vector<Tensor> ffn2_logits;   // per layer, [d'*d, 2]
    double tau = 1.0;
    double gamma = 4.0;

    std::vector<Tensor> trainables() const;
};

// Every logit i.i.d. Uniform(-gamma, gamma) from the seeded stream.
MaskParams init_mask_params(const ViTConfig& cfg, double gamma, double tau, std::uint64_t seed);

// Two-way Gumbel-softmax relaxation of one mask entry; logits shape [2].
// Returns a scalar tensor strictly inside (0,1), differentiable w.r.t. logits.
Tensor sample_relaxed_mask(const Tensor& logits, double tau, GumbelSampler& sampler);

// Plain-double variant used for sampling-law statistics.
double sample_relaxed_value(double active_logit, double isolated_logit, double tau,
                            GumbelSampler& sampler);

// One fresh relaxed mask stack for a forward pass: new Gumbel noise for every
// entry, drawn layer by layer (token, ffn1, ffn2).
MaskStack sample_relaxed_masks(const MaskParams& params, const ViTConfig& cfg, double tau,
                               GumbelSampler& sampler);

// ---------------------------------------------------------------------------
// Binarized per-task storage
// ---------------------------------------------------------------------------

inline bool get_bit(const std::vector<std::uint8_t>& bits, std::size_t i) {
    return (bits[i / 8] >> (i % 8)) & 1u;
}
inline void set_bit(std::vector<std::uint8_t>& bits, std::size_t i, bool v) {
    if (v) {
        bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    } else {
        bits[i / 8] &= static_cast<std::uint8_t>(~(1u << (i % 8)));
    }
}

struct TaskMaskSet {
    int task_id = 0;
    std::uint64_t config_digest = 0;
    std::uint64_t seed = 0;  // creation metadata
    std::uint32_t epochs = 0;
    std::vector<std::vector<std::uint8_t>> token_bits;  // per layer, n bits packed
    std::vector<std::vector<std::uint8_t>> ffn1_bits;   // per layer, d*d' bits
    std::vector<std::vector<std::uint8_t>> ffn2_bits;   // per layer, d'*d bits
    Tensor head_weight;  // [d, C]
    Tensor head_bias;    // [C]
};

// Hard decision per entry: active iff active-logit >= isolated-logit
// (ties break to active).
TaskMaskSet binarize(const MaskParams& params, const ViTConfig& cfg);

// Constant {0,1} mask tensors for inference.
MaskStack hard_masks(const TaskMaskSet& set, const ViTConfig& cfg);

// Fraction of set bits per layer for tokens / ffn1 / ffn2.
struct ActivationRatios {
    std::vector<double> token;
    std::vector<double> ffn1;
    std::vector<double> ffn2;
};
ActivationRatios activation_ratios(const TaskMaskSet& set, const ViTConfig& cfg);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over layers of (lambda - mean_i m_i)^2 on token masks.
Tensor drop_control_loss(const std::vector<Tensor>& relaxed_token_masks, double lambda);

// cross_entropy + alpha * drop_control_loss
Tensor total_loss(const Tensor& logits, const std::vector<int>& labels,
                  const std::vector<Tensor>& relaxed_token_masks, double alpha, double lambda);

// ---------------------------------------------------------------------------
// Mask container ("MEATMSK1")
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> serialize_masks(const TaskMaskSet& set, const ViTConfig& cfg);
TaskMaskSet deserialize_masks(const std::vector<std::uint8_t>& bytes);
TaskMaskSet deserialize_masks(const std::vector<std::uint8_t>& bytes,
                              std::uint64_t expected_digest);
void save_masks(const TaskMaskSet& set, const ViTConfig& cfg, const std::string& path);
TaskMaskSet load_masks(const std::string& path, std::uint64_t expected_digest);

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

std::size_t backbone_param_count(const ViTConfig& cfg);

struct OverheadReport {
    std::size_t num_tasks = 0;
    std::size_t mask_bits_per_task = 0;
    std::size_t mask_payload_bytes_per_task = 0;  // bit-packed, per-segment padding
    std::size_t mask_file_fixed_bytes = 0;        // header + metadata before payload
    std::size_t backbone_bytes = 0;
    std::vector<std::size_t> head_bytes;  // per task

    std::size_t mask_total_bytes() const { return mask_payload_bytes_per_task * num_tasks; }
    std::size_t heads_total_bytes() const;
    std::size_t mask_file_bytes(std::size_t task_index) const;  // full file size prediction
    std::size_t meat_total_bytes() const;        // backbone + all mask files
    double meat_overhead_ratio() const;          // extra bytes / backbone bytes
    std::size_t individual_total_bytes() const;  // (1 + T) backbones + heads
    double individual_multiplier() const;
};

// classes_per_task sizes the per-task classifier heads; pass {} to account for
// masks only.
OverheadReport overhead_report(const ViTConfig& cfg, std::size_t num_tasks,
                               const std::vector<std::size_t>& classes_per_task = {});

}  // namespace meat
