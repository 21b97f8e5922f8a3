#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "meat/tensor.hpp"

namespace meat {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t ffn_hidden = 128;

    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_image_tokens() const { return grid() * grid(); }
    std::size_t seq_len() const { return num_image_tokens() + 1; }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }

    void validate() const;  // throws ConfigError
    bool operator==(const ViTConfig&) const = default;
};

// Digest of the architecture; mask files carry it so masks trained against
// one backbone shape cannot be applied to another.
std::uint64_t config_digest(const ViTConfig& cfg);

// Per-layer mask inputs for one forward pass. Token weights cover image
// tokens only (the class token is implicitly always active). Entries may be
// relaxed values in (0,1) during training or hard {0,1} constants at
// inference.
struct LayerMaskView {
    Tensor token_weights;  // [n]
    Tensor ffn1;           // [d, d']
    Tensor ffn2;           // [d', d]
};
using MaskStack = std::vector<LayerMaskView>;

MaskStack all_ones_masks(const ViTConfig& cfg);

// Per-head attention probabilities captured during mhsa_forward, for tests
// and mask visualization.
struct MhsaTrace {
    std::vector<Tensor> attn;  // H matrices of shape [batch*S, S]
};

struct EncoderLayer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
};

struct Head {
    Tensor weight;  // [d, C]
    Tensor bias;    // [C]
    std::size_t classes() const { return bias.numel(); }
};

// Small pre-norm ViT whose MHSA and FFN blocks take per-task masks as forward
// inputs. The backbone (everything except the per-task heads) can be frozen
// after base-task training; frozen parameters receive no gradients.
class ViTModel {
public:
    ViTModel(ViTConfig cfg, std::uint64_t seed);

    const ViTConfig& config() const { return cfg_; }

    void add_head(int task_id, std::size_t classes, std::uint64_t seed);
    bool has_head(int task_id) const { return heads_.count(task_id) > 0; }
    const Head& head(int task_id) const;
    Head& head(int task_id);
    const std::map<int, Head>& heads() const { return heads_; }

    void freeze_backbone();
    bool frozen() const { return frozen_; }
    std::uint64_t backbone_checksum() const;

    // Fixed-order parameter lists (used by optimizers and the checkpoint).
    std::vector<Tensor> backbone_params() const;
    std::vector<Tensor> head_params(int task_id) const;

    // Single image [C*H*W] -> [(n+1), d]: patch projection, class token
    // prepended at sequence index 0, position embeddings added.
    Tensor patch_embed(const Tensor& image) const;

    // MHSA block over a stacked batch x of shape [batch*S, d] (already
    // normalized by the caller). token_weights has length n and is shared by
    // all heads; key weights are [1, token_weights] so the class token is
    // always attendable.
    Tensor mhsa_forward(const Tensor& x, std::size_t layer, const Tensor& token_weights,
                        std::size_t batch = 1, MhsaTrace* trace = nullptr) const;

    // FFN block with elementwise weight masks: phi(x(m1.W1)+b1)(m2.W2)+b2.
    Tensor ffn_forward(const Tensor& x, std::size_t layer, const Tensor& w1_mask,
                       const Tensor& w2_mask) const;

    // Encoder stack over patch rows [batch*n, patch_dim] -> class-token
    // features [batch, d]. masks == nullptr means the standard all-ones
    // interaction pattern (the base task's pattern).
    Tensor features_rows(const Tensor& patch_rows, std::size_t batch,
                         const MaskStack* masks = nullptr) const;

    // Full encoder stack -> task-head logits. masks == nullptr means the
    // standard all-ones interaction pattern (the base task's pattern).
    // Single image input [C*H*W]; returns logits of shape [C_task].
    Tensor forward(const Tensor& image, int task_id, const MaskStack* masks = nullptr) const;

    // Batched variant over pre-extracted patch rows [batch*n, patch_dim];
    // returns [batch, C_task] logits.
    Tensor forward_rows(const Tensor& patch_rows, std::size_t batch, int task_id,
                        const MaskStack* masks = nullptr) const;

    ViTModel clone() const;

    // Storage in checkpoint order.
    Tensor patch_proj, patch_bias;  // [patch_dim, d], [d]
    Tensor cls_token;               // [d]
    Tensor pos_embed;               // [S, d]
    std::vector<EncoderLayer> layers;
    Tensor final_gain, final_bias;  // closing layer norm

private:
    ViTConfig cfg_;
    bool frozen_ = false;
    std::map<int, Head> heads_;
};

// Gather image patches into matrix rows. `images` are pointers to C*H*W
// blocks; result is [count*n, patch_dim] with patch p of image b at row b*n+p.
Tensor patch_rows(const ViTConfig& cfg, const std::vector<const double*>& images);

// ---------------------------------------------------------------------------
// Checkpoint container: byte-exact round-trip of config, backbone, heads and
// the frozen flag.
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> checkpoint_bytes(const ViTModel& model);
ViTModel model_from_checkpoint_bytes(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const ViTModel& model, const std::string& path);
ViTModel load_checkpoint(const std::string& path);

}  // namespace meat
