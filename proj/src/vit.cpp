#include "meat/vit.hpp"

#include <cmath>
#include <fstream>

#include "meat/bytes.hpp"
#include "meat/error.hpp"
#include "meat/ops.hpp"
#include "meat/rng.hpp"

namespace meat {

void ViTConfig::validate() const {
    if (layers < 1) throw ConfigError("config: layers must be >= 1");
    if (heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("config: embed_dim must be divisible by heads");
    }
    if (patch_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("config: image_size must be divisible by patch_size");
    }
    if (channels == 0 || ffn_hidden == 0) throw ConfigError("config: zero-sized dimension");
}

static void config_block(ByteWriter& w, const ViTConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.image_size));
    w.u32(static_cast<std::uint32_t>(c.patch_size));
    w.u32(static_cast<std::uint32_t>(c.channels));
    w.u32(static_cast<std::uint32_t>(c.embed_dim));
    w.u32(static_cast<std::uint32_t>(c.heads));
    w.u32(static_cast<std::uint32_t>(c.layers));
    w.u32(static_cast<std::uint32_t>(c.ffn_hidden));
}

std::uint64_t config_digest(const ViTConfig& cfg) {
    ByteWriter w;
    config_block(w, cfg);
    return fnv1a(w.data().data(), w.size());
}

MaskStack all_ones_masks(const ViTConfig& cfg) {
    MaskStack masks;
    masks.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        masks.push_back({Tensor::ones({cfg.num_image_tokens()}),
                         Tensor::ones({cfg.embed_dim, cfg.ffn_hidden}),
                         Tensor::ones({cfg.ffn_hidden, cfg.embed_dim})});
    }
    return masks;
}

namespace {

Tensor init_normal(std::vector<std::size_t> shape, Rng& rng, double std_dev) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = std_dev * rng.normal();
    return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

ViTModel::ViTModel(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed_mix(seed, 0x5654));
    const std::size_t d = cfg_.embed_dim;
    const std::size_t dp = cfg_.patch_dim();
    const std::size_t dh = cfg_.ffn_hidden;
    constexpr double std_dev = 0.02;

    patch_proj = init_normal({dp, d}, rng, std_dev);
    patch_bias = Tensor::zeros({d}, true);
    cls_token = init_normal({d}, rng, std_dev);
    pos_embed = init_normal({cfg_.seq_len(), d}, rng, std_dev);
    layers.reserve(cfg_.layers);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        EncoderLayer e;
        e.ln1_gain = Tensor::ones({d}, true);
        e.ln1_bias = Tensor::zeros({d}, true);
        e.wq = init_normal({d, d}, rng, std_dev);
        e.bq = Tensor::zeros({d}, true);
        e.wk = init_normal({d, d}, rng, std_dev);
        e.bk = Tensor::zeros({d}, true);
        e.wv = init_normal({d, d}, rng, std_dev);
        e.bv = Tensor::zeros({d}, true);
        e.wo = init_normal({d, d}, rng, std_dev);
        e.bo = Tensor::zeros({d}, true);
        e.ln2_gain = Tensor::ones({d}, true);
        e.ln2_bias = Tensor::zeros({d}, true);
        e.w1 = init_normal({d, dh}, rng, std_dev);
        e.b1 = Tensor::zeros({dh}, true);
        e.w2 = init_normal({dh, d}, rng, std_dev);
        e.b2 = Tensor::zeros({d}, true);
        layers.push_back(std::move(e));
    }
    final_gain = Tensor::ones({d}, true);
    final_bias = Tensor::zeros({d}, true);
}

void ViTModel::add_head(int task_id, std::size_t classes, std::uint64_t seed) {
    if (classes == 0) throw ConfigError("head: zero classes");
    Rng rng(seed_mix(seed, 0x4845));
    Head h;
    h.weight = init_normal({cfg_.embed_dim, classes}, rng, 0.02);
    h.bias = Tensor::zeros({classes}, true);
    heads_[task_id] = std::move(h);
}

const Head& ViTModel::head(int task_id) const {
    auto it = heads_.find(task_id);
    if (it == heads_.end()) {
        throw LookupError("no classifier head registered for task " + std::to_string(task_id));
    }
    return it->second;
}

Head& ViTModel::head(int task_id) {
    return const_cast<Head&>(static_cast<const ViTModel*>(this)->head(task_id));
}

std::vector<Tensor> ViTModel::backbone_params() const {
    std::vector<Tensor> out{patch_proj, patch_bias, cls_token, pos_embed};
    for (const EncoderLayer& e : layers) {
        for (const Tensor& t :
             {e.ln1_gain, e.ln1_bias, e.wq, e.bq, e.wk, e.bk, e.wv, e.bv, e.wo, e.bo,
              e.ln2_gain, e.ln2_bias, e.w1, e.b1, e.w2, e.b2}) {
            out.push_back(t);
        }
    }
    out.push_back(final_gain);
    out.push_back(final_bias);
    return out;
}

std::vector<Tensor> ViTModel::head_params(int task_id) const {
    const Head& h = head(task_id);
    return {h.weight, h.bias};
}

void ViTModel::freeze_backbone() {
    for (Tensor& t : backbone_params()) t.set_requires_grad(false);
    frozen_ = true;
}

std::uint64_t ViTModel::backbone_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& t : backbone_params()) {
        h = fnv1a(t.data().data(), t.data().size() * sizeof(double), h);
    }
    return h;
}

Tensor patch_rows(const ViTConfig& cfg, const std::vector<const double*>& images) {
    const std::size_t n = cfg.num_image_tokens();
    const std::size_t g = cfg.grid();
    const std::size_t ps = cfg.patch_size;
    const std::size_t dp = cfg.patch_dim();
    const std::size_t hw = cfg.image_size;
    std::vector<double> out(images.size() * n * dp);
    for (std::size_t b = 0; b < images.size(); ++b) {
        const double* img = images[b];
        for (std::size_t gy = 0; gy < g; ++gy) {
            for (std::size_t gx = 0; gx < g; ++gx) {
                double* row = out.data() + (b * n + gy * g + gx) * dp;
                for (std::size_t c = 0; c < cfg.channels; ++c) {
                    for (std::size_t py = 0; py < ps; ++py) {
                        for (std::size_t px = 0; px < ps; ++px) {
                            row[c * ps * ps + py * ps + px] =
                                img[c * hw * hw + (gy * ps + py) * hw + (gx * ps + px)];
                        }
                    }
                }
            }
        }
    }
    return Tensor::from({images.size() * n, dp}, std::move(out));
}

Tensor ViTModel::patch_embed(const Tensor& image) const {
    if (image.numel() != cfg_.channels * cfg_.image_size * cfg_.image_size) {
        throw ConfigError("patch_embed: image size does not match config");
    }
    Tensor rows = patch_rows(cfg_, {image.data().data()});
    Tensor tokens = add_rowvec(matmul(rows, patch_proj), patch_bias);
    Tensor with_cls = prepend_row_per_block(tokens, cls_token, 1);
    return add_per_block(with_cls, pos_embed, 1);
}

Tensor ViTModel::mhsa_forward(const Tensor& x, std::size_t layer, const Tensor& token_weights,
                              std::size_t batch, MhsaTrace* trace) const {
    if (layer >= layers.size()) throw LookupError("mhsa_forward: layer out of range");
    if (token_weights.numel() != cfg_.num_image_tokens()) {
        throw ContractError("mhsa_forward: token weight length must equal image token count");
    }
    const EncoderLayer& e = layers[layer];
    const std::size_t dk = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Tensor q = add_rowvec(matmul(x, e.wq), e.bq);
    Tensor k = add_rowvec(matmul(x, e.wk), e.bk);
    Tensor v = add_rowvec(matmul(x, e.wv), e.bv);
    Tensor key_weights = prepend_one(token_weights);

    std::vector<Tensor> heads_out;
    heads_out.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor scores = attn_scores(qh, kh, batch, scale);
        Tensor probs = masked_softmax_rows(scores, key_weights);
        if (trace) trace->attn.push_back(probs);
        heads_out.push_back(attn_apply(probs, vh, batch));
    }
    return add_rowvec(matmul(concat_cols(heads_out), e.wo), e.bo);
}

Tensor ViTModel::ffn_forward(const Tensor& x, std::size_t layer, const Tensor& w1_mask,
                             const Tensor& w2_mask) const {
    if (layer >= layers.size()) throw LookupError("ffn_forward: layer out of range");
    const EncoderLayer& e = layers[layer];
    if (w1_mask.shape() != e.w1.shape() || w2_mask.shape() != e.w2.shape()) {
        throw ContractError("ffn_forward: mask shapes must match W1/W2");
    }
    Tensor h = gelu(add_rowvec(matmul(x, mul(w1_mask, e.w1)), e.b1));
    return add_rowvec(matmul(h, mul(w2_mask, e.w2)), e.b2);
}

Tensor ViTModel::features_rows(const Tensor& rows, std::size_t batch,
                               const MaskStack* masks) const {
    MaskStack ones;
    if (!masks) {
        ones = all_ones_masks(cfg_);
        masks = &ones;
    }
    if (masks->size() != cfg_.layers) {
        throw ContractError("forward: need one mask view per layer");
    }

    Tensor tokens = add_rowvec(matmul(rows, patch_proj), patch_bias);
    Tensor x = add_per_block(prepend_row_per_block(tokens, cls_token, batch), pos_embed, batch);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const LayerMaskView& m = (*masks)[l];
        x = add(x, mhsa_forward(layer_norm(x, layers[l].ln1_gain, layers[l].ln1_bias), l,
                                m.token_weights, batch));
        x = add(x, ffn_forward(layer_norm(x, layers[l].ln2_gain, layers[l].ln2_bias), l,
                               m.ffn1, m.ffn2));
    }
    return take_block_row0(layer_norm(x, final_gain, final_bias), batch);
}

Tensor ViTModel::forward_rows(const Tensor& rows, std::size_t batch, int task_id,
                              const MaskStack* masks) const {
    const Head& h = head(task_id);
    Tensor cls = features_rows(rows, batch, masks);
    return add_rowvec(matmul(cls, h.weight), h.bias);
}

Tensor ViTModel::forward(const Tensor& image, int task_id, const MaskStack* masks) const {
    if (image.numel() != cfg_.channels * cfg_.image_size * cfg_.image_size) {
        throw ConfigError("forward: image size does not match config");
    }
    Tensor logits = forward_rows(patch_rows(cfg_, {image.data().data()}), 1, task_id, masks);
    return reshape(logits, {logits.cols()});
}

ViTModel ViTModel::clone() const {
    ViTModel out(cfg_, 0);
    auto copy_into = [](Tensor& dst, const Tensor& src) { dst = src.clone(); };
    copy_into(out.patch_proj, patch_proj);
    copy_into(out.patch_bias, patch_bias);
    copy_into(out.cls_token, cls_token);
    copy_into(out.pos_embed, pos_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        EncoderLayer& d = out.layers[l];
        const EncoderLayer& s = layers[l];
        copy_into(d.ln1_gain, s.ln1_gain);
        copy_into(d.ln1_bias, s.ln1_bias);
        copy_into(d.wq, s.wq);
        copy_into(d.bq, s.bq);
        copy_into(d.wk, s.wk);
        copy_into(d.bk, s.bk);
        copy_into(d.wv, s.wv);
        copy_into(d.bv, s.bv);
        copy_into(d.wo, s.wo);
        copy_into(d.bo, s.bo);
        copy_into(d.ln2_gain, s.ln2_gain);
        copy_into(d.ln2_bias, s.ln2_bias);
        copy_into(d.w1, s.w1);
        copy_into(d.b1, s.b1);
        copy_into(d.w2, s.w2);
        copy_into(d.b2, s.b2);
    }
    copy_into(out.final_gain, final_gain);
    copy_into(out.final_bias, final_bias);
    out.frozen_ = frozen_;
    for (const auto& [id, h] : heads_) {
        out.heads_[id] = Head{h.weight.clone(), h.bias.clone()};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kVitMagic[9] = "MEATVIT1";

void write_named_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
}

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

NamedTensor read_named_tensor(ByteReader& r) {
    const std::uint32_t name_len = r.u32("tensor name length");
    auto name_bytes = r.bytes(name_len, "tensor name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t ndim = r.u32("tensor rank");
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        shape[i] = r.u32("tensor dimension");
        numel *= shape[i];
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64("tensor data");
    return {std::move(name), Tensor::from(std::move(shape), std::move(data))};
}

std::vector<std::pair<std::string, Tensor>> named_backbone(const ViTModel& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch_proj.weight", m.patch_proj);
    out.emplace_back("patch_proj.bias", m.patch_bias);
    out.emplace_back("cls_token", m.cls_token);
    out.emplace_back("pos_embed", m.pos_embed);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const EncoderLayer& e = m.layers[l];
        const std::string p = "layer." + std::to_string(l) + ".";
        out.emplace_back(p + "ln1.gain", e.ln1_gain);
        out.emplace_back(p + "ln1.bias", e.ln1_bias);
        out.emplace_back(p + "wq", e.wq);
        out.emplace_back(p + "bq", e.bq);
        out.emplace_back(p + "wk", e.wk);
        out.emplace_back(p + "bk", e.bk);
        out.emplace_back(p + "wv", e.wv);
        out.emplace_back(p + "bv", e.bv);
        out.emplace_back(p + "wo", e.wo);
        out.emplace_back(p + "bo", e.bo);
        out.emplace_back(p + "ln2.gain", e.ln2_gain);
        out.emplace_back(p + "ln2.bias", e.ln2_bias);
        out.emplace_back(p + "w1", e.w1);
        out.emplace_back(p + "b1", e.b1);
        out.emplace_back(p + "w2", e.w2);
        out.emplace_back(p + "b2", e.b2);
    }
    out.emplace_back("final.gain", m.final_gain);
    out.emplace_back("final.bias", m.final_bias);
    return out;
}

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const ViTModel& model) {
    ByteWriter w;
    w.magic(kVitMagic);
    w.u8(1);  // version
    config_block(w, model.config());
    w.u8(model.frozen() ? 1 : 0);

    auto backbone = named_backbone(model);
    w.u32(static_cast<std::uint32_t>(backbone.size() + 2 * model.heads().size()));
    for (const auto& [name, t] : backbone) write_named_tensor(w, name, t);
    for (const auto& [id, h] : model.heads()) {
        write_named_tensor(w, "head." + std::to_string(id) + ".weight", h.weight);
        write_named_tensor(w, "head." + std::to_string(id) + ".bias", h.bias);
    }
    return w.data();
}

ViTModel model_from_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    r.expect_magic(kVitMagic, "checkpoint");
    const std::uint8_t version = r.u8("version");
    if (version != 1) throw FormatError("checkpoint: unsupported version");
    ViTConfig cfg;
    cfg.image_size = r.u32("config.image_size");
    cfg.patch_size = r.u32("config.patch_size");
    cfg.channels = r.u32("config.channels");
    cfg.embed_dim = r.u32("config.embed_dim");
    cfg.heads = r.u32("config.heads");
    cfg.layers = r.u32("config.layers");
    cfg.ffn_hidden = r.u32("config.ffn_hidden");
    const bool frozen = r.u8("frozen flag") != 0;

    ViTModel model(cfg, 0);
    const std::uint32_t count = r.u32("tensor count");
    std::map<std::string, Tensor> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt = read_named_tensor(r);
        tensors.emplace(std::move(nt.name), std::move(nt.tensor));
    }
    r.expect_done("checkpoint");

    // Tensors in named_backbone alias the model's storage; writing through
    // .data() fills the model in place.
    for (auto& [name, t] : named_backbone(model)) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
        if (it->second.shape() != t.shape()) {
            throw FormatError("checkpoint: shape mismatch for " + name);
        }
        t.data() = it->second.data();
        tensors.erase(it);
    }
    // Heads: whatever head.<id>.* tensors remain.
    std::map<int, std::pair<Tensor, Tensor>> heads;
    for (auto& [name, t] : tensors) {
        if (name.rfind("head.", 0) != 0) throw FormatError("checkpoint: unknown tensor " + name);
        const std::size_t dot = name.find('.', 5);
        if (dot == std::string::npos) throw FormatError("checkpoint: malformed head name " + name);
        int id = 0;
        try {
            id = std::stoi(name.substr(5, dot - 5));
        } catch (const std::exception&) {
            throw FormatError("checkpoint: malformed head name " + name);
        }
        const std::string part = name.substr(dot + 1);
        if (part == "weight") {
            heads[id].first = t;
        } else if (part == "bias") {
            heads[id].second = t;
        } else {
            throw FormatError("checkpoint: malformed head name " + name);
        }
    }
    for (auto& [id, wb] : heads) {
        if (wb.first.numel() == 0 || wb.second.numel() == 0) {
            throw FormatError("checkpoint: incomplete head " + std::to_string(id));
        }
        model.add_head(id, wb.second.numel(), 0);
        model.head(id).weight.data() = wb.first.data();
        model.head(id).bias.data() = wb.second.data();
    }
    if (frozen) model.freeze_backbone();
    return model;
}

void save_checkpoint(const ViTModel& model, const std::string& path) {
    write_file_bytes(path, checkpoint_bytes(model));
}

ViTModel load_checkpoint(const std::string& path) {
    return model_from_checkpoint_bytes(read_file_bytes(path));
}

}  // namespace meat
