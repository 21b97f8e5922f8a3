#include "meat/masks.hpp"

#include <cmath>

#include "meat/bytes.hpp"
#include "meat/error.hpp"
#include "meat/ops.hpp"

namespace meat {

std::vector<Tensor> MaskParams::trainables() const {
    std::vector<Tensor> out;
    for (const Tensor& t : token_logits) out.push_back(t);
    for (const Tensor& t : ffn1_logits) out.push_back(t);
    for (const Tensor& t : ffn2_logits) out.push_back(t);
    return out;
}

MaskParams init_mask_params(const ViTConfig& cfg, double gamma, double tau, std::uint64_t seed) {
    if (gamma <= 0.0) throw ConfigError("init_mask_params: gamma must be positive");
    if (tau <= 0.0) throw ConfigError("init_mask_params: tau must be positive");
    Rng rng(seed_mix(seed, 0x4d41534bULL));
    MaskParams p;
    p.tau = tau;
    p.gamma = gamma;
    auto uniform_logits = [&](std::size_t entries) {
        std::vector<double> v(entries * 2);
        for (double& x : v) x = rng.uniform(-gamma, gamma);
        return Tensor::from({entries, 2}, std::move(v), true);
    };
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        p.token_logits.push_back(uniform_logits(cfg.num_image_tokens()));
        p.ffn1_logits.push_back(uniform_logits(cfg.embed_dim * cfg.ffn_hidden));
        p.ffn2_logits.push_back(uniform_logits(cfg.ffn_hidden * cfg.embed_dim));
    }
    return p;
}

Tensor sample_relaxed_mask(const Tensor& logits, double tau, GumbelSampler& sampler) {
    if (logits.numel() != 2) throw ShapeError("sample_relaxed_mask: logits must have 2 entries");
    Tensor pair = reshape(logits, {1, 2});
    return gumbel_relax(pair, {sampler.gumbel(), sampler.gumbel()}, tau);
}

double sample_relaxed_value(double active_logit, double isolated_logit, double tau,
                            GumbelSampler& sampler) {
    if (tau <= 0.0) throw ConfigError("sample_relaxed_value: tau must be positive");
    const double g0 = sampler.gumbel();
    const double g1 = sampler.gumbel();
    const double z = ((active_logit + g0) - (isolated_logit + g1)) / tau;
    double v;
    if (z >= 0.0) {
        v = 1.0 / (1.0 + std::exp(-z));
    } else {
        const double e = std::exp(z);
        v = e / (1.0 + e);
    }
    return std::min(std::max(v, std::nextafter(0.0, 1.0)), std::nextafter(1.0, 0.0));
}

MaskStack sample_relaxed_masks(const MaskParams& params, const ViTConfig& cfg, double tau,
                               GumbelSampler& sampler) {
    if (params.token_logits.size() != cfg.layers) {
        throw ContractError("sample_relaxed_masks: layer count mismatch");
    }
    MaskStack stack;
    stack.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        Tensor token = gumbel_relax(params.token_logits[l],
                                    sampler.draw(2 * cfg.num_image_tokens()), tau);
        Tensor f1 = reshape(gumbel_relax(params.ffn1_logits[l],
                                         sampler.draw(2 * cfg.embed_dim * cfg.ffn_hidden), tau),
                            {cfg.embed_dim, cfg.ffn_hidden});
        Tensor f2 = reshape(gumbel_relax(params.ffn2_logits[l],
                                         sampler.draw(2 * cfg.ffn_hidden * cfg.embed_dim), tau),
                            {cfg.ffn_hidden, cfg.embed_dim});
        stack.push_back({std::move(token), std::move(f1), std::move(f2)});
    }
    return stack;
}

// ---------------------------------------------------------------------------
// Binarization
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> pack_bits(const Tensor& logits) {
    const std::size_t entries = logits.rows();
    std::vector<std::uint8_t> bits((entries + 7) / 8, 0);
    for (std::size_t i = 0; i < entries; ++i) {
        set_bit(bits, i, logits.data()[2 * i] >= logits.data()[2 * i + 1]);
    }
    return bits;
}

}  // namespace

TaskMaskSet binarize(const MaskParams& params, const ViTConfig& cfg) {
    if (params.token_logits.size() != cfg.layers) {
        throw ContractError("binarize: layer count mismatch");
    }
    TaskMaskSet set;
    set.config_digest = config_digest(cfg);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        set.token_bits.push_back(pack_bits(params.token_logits[l]));
        set.ffn1_bits.push_back(pack_bits(params.ffn1_logits[l]));
        set.ffn2_bits.push_back(pack_bits(params.ffn2_logits[l]));
    }
    return set;
}

namespace {

Tensor bits_to_tensor(const std::vector<std::uint8_t>& bits, std::vector<std::size_t> shape,
                      std::size_t count) {
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = get_bit(bits, i) ? 1.0 : 0.0;
    return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

MaskStack hard_masks(const TaskMaskSet& set, const ViTConfig& cfg) {
    if (set.token_bits.size() != cfg.layers) throw ContractError("hard_masks: layer mismatch");
    MaskStack stack;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        stack.push_back(
            {bits_to_tensor(set.token_bits[l], {cfg.num_image_tokens()}, cfg.num_image_tokens()),
             bits_to_tensor(set.ffn1_bits[l], {cfg.embed_dim, cfg.ffn_hidden},
                            cfg.embed_dim * cfg.ffn_hidden),
             bits_to_tensor(set.ffn2_bits[l], {cfg.ffn_hidden, cfg.embed_dim},
                            cfg.ffn_hidden * cfg.embed_dim)});
    }
    return stack;
}

ActivationRatios activation_ratios(const TaskMaskSet& set, const ViTConfig& cfg) {
    auto ratio = [](const std::vector<std::uint8_t>& bits, std::size_t count) {
        std::size_t on = 0;
        for (std::size_t i = 0; i < count; ++i) on += get_bit(bits, i) ? 1 : 0;
        return static_cast<double>(on) / static_cast<double>(count);
    };
    ActivationRatios r;
    for (std::size_t l = 0; l < set.token_bits.size(); ++l) {
        r.token.push_back(ratio(set.token_bits[l], cfg.num_image_tokens()));
        r.ffn1.push_back(ratio(set.ffn1_bits[l], cfg.embed_dim * cfg.ffn_hidden));
        r.ffn2.push_back(ratio(set.ffn2_bits[l], cfg.ffn_hidden * cfg.embed_dim));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor drop_control_loss(const std::vector<Tensor>& relaxed_token_masks, double lambda) {
    if (relaxed_token_masks.empty()) throw ContractError("drop_control_loss: no layers");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("drop_control_loss: lambda in [0,1]");
    Tensor target = Tensor::scalar(lambda);
    Tensor acc;
    bool first = true;
    for (const Tensor& m : relaxed_token_masks) {
        Tensor diff = sub(target, mean(m));
        Tensor term = mul(diff, diff);
        acc = first ? term : add(acc, term);
        first = false;
    }
    return scale(acc, 1.0 / static_cast<double>(relaxed_token_masks.size()));
}

Tensor total_loss(const Tensor& logits, const std::vector<int>& labels,
                  const std::vector<Tensor>& relaxed_token_masks, double alpha, double lambda) {
    if (alpha < 0.0) throw ConfigError("total_loss: alpha must be >= 0");
    Tensor ce = cross_entropy(logits, labels);
    if (alpha == 0.0) return ce;
    return add(ce, scale(drop_control_loss(relaxed_token_masks, lambda), alpha));
}

// ---------------------------------------------------------------------------
// "MEATMSK1" container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMaskMagic[9] = "MEATMSK1";

}  // namespace

std::vector<std::uint8_t> serialize_masks(const TaskMaskSet& set, const ViTConfig& cfg) {
    if (set.token_bits.size() != cfg.layers || set.ffn1_bits.size() != cfg.layers ||
        set.ffn2_bits.size() != cfg.layers) {
        throw ContractError("serialize_masks: layer count mismatch");
    }
    const std::size_t n = cfg.num_image_tokens();
    const std::size_t f = cfg.embed_dim * cfg.ffn_hidden;
    ByteWriter w;
    w.magic(kMaskMagic);
    w.u8(1);  // version
    w.u32(static_cast<std::uint32_t>(set.task_id));
    w.u64(set.config_digest);
    w.u64(set.seed);
    w.u32(set.epochs);
    w.u32(static_cast<std::uint32_t>(cfg.layers));
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(static_cast<std::uint32_t>(cfg.embed_dim));
    w.u32(static_cast<std::uint32_t>(cfg.ffn_hidden));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (set.token_bits[l].size() != (n + 7) / 8 || set.ffn1_bits[l].size() != (f + 7) / 8 ||
            set.ffn2_bits[l].size() != (f + 7) / 8) {
            throw ContractError("serialize_masks: bitset length mismatch");
        }
        w.bytes(set.token_bits[l].data(), set.token_bits[l].size());
        w.bytes(set.ffn1_bits[l].data(), set.ffn1_bits[l].size());
        w.bytes(set.ffn2_bits[l].data(), set.ffn2_bits[l].size());
    }
    const std::size_t classes = set.head_bias.numel();
    w.u32(static_cast<std::uint32_t>(classes));
    if (classes > 0) {
        if (set.head_weight.shape() != std::vector<std::size_t>{cfg.embed_dim, classes}) {
            throw ContractError("serialize_masks: head shape mismatch");
        }
        for (double v : set.head_weight.data()) w.f64(v);
        for (double v : set.head_bias.data()) w.f64(v);
    }
    return w.data();
}

TaskMaskSet deserialize_masks(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    r.expect_magic(kMaskMagic, "mask file");
    if (r.u8("version") != 1) throw FormatError("mask file: unsupported version");
    TaskMaskSet set;
    set.task_id = static_cast<int>(r.u32("task_id"));
    set.config_digest = r.u64("config digest");
    set.seed = r.u64("seed");
    set.epochs = r.u32("epochs");
    const std::uint32_t layers = r.u32("layer count");
    const std::uint32_t n = r.u32("token count");
    const std::uint32_t d = r.u32("embed_dim");
    const std::uint32_t dh = r.u32("ffn_hidden");
    const std::size_t f = static_cast<std::size_t>(d) * dh;
    for (std::uint32_t l = 0; l < layers; ++l) {
        set.token_bits.push_back(r.bytes((n + 7) / 8, "token bits"));
        set.ffn1_bits.push_back(r.bytes((f + 7) / 8, "ffn1 bits"));
        set.ffn2_bits.push_back(r.bytes((f + 7) / 8, "ffn2 bits"));
    }
    const std::uint32_t classes = r.u32("head classes");
    if (classes > 0) {
        std::vector<double> hw(static_cast<std::size_t>(d) * classes);
        for (double& v : hw) v = r.f64("head weight");
        std::vector<double> hb(classes);
        for (double& v : hb) v = r.f64("head bias");
        set.head_weight = Tensor::from({d, classes}, std::move(hw));
        set.head_bias = Tensor::from({classes}, std::move(hb));
    }
    r.expect_done("mask file");
    return set;
}

TaskMaskSet deserialize_masks(const std::vector<std::uint8_t>& bytes,
                              std::uint64_t expected_digest) {
    TaskMaskSet set = deserialize_masks(bytes);
    if (set.config_digest != expected_digest) {
        throw FormatError("mask file: config digest mismatch (masks belong to another backbone)");
    }
    return set;
}

void save_masks(const TaskMaskSet& set, const ViTConfig& cfg, const std::string& path) {
    write_file_bytes(path, serialize_masks(set, cfg));
}

TaskMaskSet load_masks(const std::string& path, std::uint64_t expected_digest) {
    return deserialize_masks(read_file_bytes(path), expected_digest);
}

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

std::size_t backbone_param_count(const ViTConfig& cfg) {
    const std::size_t d = cfg.embed_dim;
    const std::size_t dh = cfg.ffn_hidden;
    std::size_t count = cfg.patch_dim() * d + d;  // patch projection
    count += d;                                   // class token
    count += cfg.seq_len() * d;                   // position embeddings
    const std::size_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + d * dh + dh + dh * d + d;
    count += cfg.layers * per_layer;
    count += 2 * d;  // final layer norm
    return count;
}

std::size_t OverheadReport::heads_total_bytes() const {
    std::size_t total = 0;
    for (std::size_t b : head_bytes) total += b;
    return total;
}

std::size_t OverheadReport::mask_file_bytes(std::size_t task_index) const {
    const std::size_t head = task_index < head_bytes.size() ? head_bytes[task_index] : 0;
    return mask_file_fixed_bytes + mask_payload_bytes_per_task + 4 + head;
}

std::size_t OverheadReport::meat_total_bytes() const {
    std::size_t total = backbone_bytes;
    for (std::size_t t = 0; t < num_tasks; ++t) total += mask_file_bytes(t);
    return total;
}

double OverheadReport::meat_overhead_ratio() const {
    return static_cast<double>(meat_total_bytes() - backbone_bytes) /
           static_cast<double>(backbone_bytes);
}

std::size_t OverheadReport::individual_total_bytes() const {
    return (1 + num_tasks) * backbone_bytes + heads_total_bytes();
}

double OverheadReport::individual_multiplier() const {
    return static_cast<double>(individual_total_bytes()) / static_cast<double>(backbone_bytes);
}

OverheadReport overhead_report(const ViTConfig& cfg, std::size_t num_tasks,
                               const std::vector<std::size_t>& classes_per_task) {
    if (!classes_per_task.empty() && classes_per_task.size() != num_tasks) {
        throw ConfigError("overhead_report: classes_per_task must have one entry per task");
    }
    OverheadReport r;
    r.num_tasks = num_tasks;
    const std::size_t n = cfg.num_image_tokens();
    const std::size_t f = cfg.embed_dim * cfg.ffn_hidden;
    r.mask_bits_per_task = cfg.layers * (n + 2 * f);
    r.mask_payload_bytes_per_task = cfg.layers * ((n + 7) / 8 + 2 * ((f + 7) / 8));
    // magic + version + task_id + digest + seed + epochs + layers + n + d + d'
    r.mask_file_fixed_bytes = 8 + 1 + 4 + 8 + 8 + 4 + 4 + 4 + 4 + 4;
    r.backbone_bytes = backbone_param_count(cfg) * sizeof(double);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        const std::size_t c = classes_per_task.empty() ? 0 : classes_per_task[t];
        r.head_bytes.push_back((cfg.embed_dim * c + c) * sizeof(double));
    }
    return r;
}

}  // namespace meat
