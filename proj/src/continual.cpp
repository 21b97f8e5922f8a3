#include "meat/continual.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "meat/bytes.hpp"
#include "meat/error.hpp"
#include "meat/ops.hpp"

namespace meat {

namespace fs = std::filesystem;

std::string to_string(Method m) {
    switch (m) {
        case Method::Meat: return "meat";
        case Method::ClassifierOnly: return "classifier";
        case Method::Individual: return "individual";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "meat") return Method::Meat;
    if (s == "classifier") return Method::ClassifierOnly;
    if (s == "individual") return Method::Individual;
    throw ConfigError("unknown method: " + s);
}

double rule_classifier_lr(std::size_t batch_size) {
    return static_cast<double>(batch_size) / 1024.0 * 5e-4;
}

double rule_mask_lr(std::size_t batch_size) {
    return static_cast<double>(batch_size) / 1024.0 * 0.1;
}

void ExperimentPlan::validate() const {
    model.validate();
    if (meat.gamma <= 0.0) throw ConfigError("plan: meat.gamma must be positive");
    if (meat.alpha < 0.0) throw ConfigError("plan: meat.alpha must be >= 0");
    if (meat.lambda < 0.0 || meat.lambda > 1.0) throw ConfigError("plan: meat.lambda in [0,1]");
    if (meat.tau <= 0.0) throw ConfigError("plan: meat.tau must be positive");
    if (run_seeds.empty()) throw ConfigError("plan: train.seeds must not be empty");
    if (orders.empty()) throw ConfigError("plan: need at least one task order");
    if (base.task_id != 0) throw ConfigError("plan: base task id must be 0");
    auto check_spec = [](const TaskSpec& s, const std::string& what) {
        if (s.train_file.empty() && (s.n_train == 0 || s.n_test == 0)) {
            throw ConfigError("plan: " + what + " split empty");
        }
        if (s.epochs == 0) throw ConfigError("plan: " + what + " epochs must be >= 1");
        if (s.batch_size == 0) throw ConfigError("plan: " + what + " batch must be >= 1");
        if (s.classifier_lr < 0.0 || s.mask_lr < 0.0) {
            throw ConfigError("plan: " + what + " learning rates must be positive");
        }
    };
    check_spec(base, "base");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        check_spec(tasks[i], "tasks[" + std::to_string(i) + "]");
        if (tasks[i].task_id != static_cast<int>(i) + 1) {
            throw ConfigError("plan: tasks[" + std::to_string(i) + "] must have task id " +
                              std::to_string(i + 1));
        }
    }
    for (const auto& order : orders) {
        if (order.size() != tasks.size()) throw ConfigError("plan: order length mismatch");
        std::vector<bool> seen(tasks.size(), false);
        for (std::size_t idx : order) {
            if (idx >= tasks.size() || seen[idx]) {
                throw ConfigError("plan: order is not a permutation of the task list");
            }
            seen[idx] = true;
        }
    }
}

std::vector<std::vector<std::size_t>> make_orders(std::size_t n, std::size_t count,
                                                  std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> orders;
    std::vector<std::size_t> identity(n);
    for (std::size_t i = 0; i < n; ++i) identity[i] = i;
    for (std::size_t o = 0; o < count; ++o) {
        std::vector<std::size_t> perm = identity;
        if (o > 0) {
            Rng rng(seed_mix(seed, 0x09D0 + o));
            rng.shuffle(perm);
        }
        orders.push_back(std::move(perm));
    }
    return orders;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Optimizer(OptimKind kind, std::vector<ParamGroup> groups)
    : kind_(kind), groups_(std::move(groups)) {
    if (kind_ == OptimKind::Adam) {
        for (const ParamGroup& g : groups_) {
            for (const Tensor& p : g.params) {
                m_.emplace_back(p.numel(), 0.0);
                v_.emplace_back(p.numel(), 0.0);
            }
        }
    }
}

void Optimizer::zero_grad() {
    for (ParamGroup& g : groups_) {
        for (Tensor& p : g.params) p.zero_grad();
    }
}

void Optimizer::step() {
    ++t_;
    std::size_t slot = 0;
    for (ParamGroup& g : groups_) {
        for (Tensor& p : g.params) {
            if (!p.has_grad()) {
                ++slot;
                continue;
            }
            const std::vector<double>& grad = p.grad();
            std::vector<double>& data = p.data();
            if (kind_ == OptimKind::Sgd) {
                for (std::size_t i = 0; i < data.size(); ++i) data[i] -= g.lr * grad[i];
            } else {
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                std::vector<double>& m = m_[slot];
                std::vector<double>& v = v_[slot];
                const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (std::size_t i = 0; i < data.size(); ++i) {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    data[i] -= g.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
                }
            }
            ++slot;
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct BatchData {
    Tensor rows;
    std::vector<int> labels;
};

BatchData gather(const Dataset& ds, const std::vector<std::size_t>& idx, const ViTConfig& cfg) {
    std::vector<const double*> imgs;
    imgs.reserve(idx.size());
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) {
        imgs.push_back(ds.image(i));
        labels.push_back(ds.labels[i]);
    }
    return {patch_rows(cfg, imgs), std::move(labels)};
}

// Snapshot of a parameter: same values, detached from training.
Tensor snapshot(const Tensor& t) {
    return Tensor::from(t.shape(), t.data());
}

[[noreturn]] void diverged(const char* what, std::size_t step, const std::string& why) {
    throw DivergenceError(std::string(what) + " diverged at step " + std::to_string(step) +
                          (why.empty() ? "" : ": " + why));
}

void check_dataset(const Dataset& ds, const TaskSpec& spec, const ViTConfig& cfg,
                   const char* what) {
    if (ds.count == 0) throw ConfigError(std::string(what) + ": empty dataset");
    if (ds.channels != cfg.channels || ds.height != cfg.image_size || ds.width != cfg.image_size) {
        throw ConfigError(std::string(what) + ": dataset dimensions do not match model config");
    }
    if (ds.num_classes != spec.num_classes()) {
        throw ConfigError(std::string(what) + ": dataset class count does not match task spec");
    }
}

}  // namespace

void train_base(ViTModel& model, const TaskSpec& spec, const Dataset& train, OptimKind optim,
                std::vector<double>* epoch_losses) {
    if (model.frozen()) throw ContractError("train_base: backbone already frozen");
    if (spec.task_id != 0) throw ContractError("train_base: base task id must be 0");
    check_dataset(train, spec, model.config(), "train_base");

    model.add_head(0, spec.num_classes(), seed_mix(spec.seed, 0x0EAD));
    std::vector<Tensor> params = model.backbone_params();
    for (const Tensor& t : model.head_params(0)) params.push_back(t);
    Optimizer opt(optim, {{std::move(params), spec.effective_classifier_lr()}});
    BatchIter iter(train.count, spec.batch_size, seed_mix(spec.seed, 0x5183), true);

    if (epoch_losses) epoch_losses->clear();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        double epoch_sum = 0.0;
        std::size_t epoch_batches = 0;
        for (const auto& batch : iter.epoch()) {
            BatchData b = gather(train, batch, model.config());
            Tensor loss;
            try {
                Tensor logits = model.forward_rows(b.rows, batch.size(), 0, nullptr);
                loss = cross_entropy(logits, b.labels);
            } catch (const NumericError& e) {
                diverged("base training", step, e.what());
            }
            if (!std::isfinite(loss.item())) diverged("base training", step, "non-finite loss");
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_sum += loss.item();
            ++epoch_batches;
            ++step;
        }
        if (epoch_losses) epoch_losses->push_back(epoch_sum / static_cast<double>(epoch_batches));
    }
    model.freeze_backbone();
}

TaskMaskSet train_task(ViTModel& model, const TaskSpec& spec, const MeatHyper& hyper,
                       const Dataset& train, OptimKind optim) {
    if (!model.frozen()) throw ContractError("train_task: backbone must be frozen first");
    if (spec.task_id == 0) {
        throw ContractError("train_task: task 0 keeps the standard all-ones pattern");
    }
    check_dataset(train, spec, model.config(), "train_task");
    const ViTConfig& cfg = model.config();

    MaskParams params = init_mask_params(cfg, hyper.gamma, hyper.tau, seed_mix(spec.seed, 0x3A5C));
    model.add_head(spec.task_id, spec.num_classes(), seed_mix(spec.seed, 0x0EAD));
    GumbelSampler sampler(seed_mix(spec.seed, 0x6B31));
    Optimizer opt(optim, {{model.head_params(spec.task_id), spec.effective_classifier_lr()},
                          {params.trainables(), spec.effective_mask_lr()}});
    BatchIter iter(train.count, spec.batch_size, seed_mix(spec.seed, 0x5183), true);

    const std::size_t steps_per_epoch = (train.count + spec.batch_size - 1) / spec.batch_size;
    const std::size_t total_steps = spec.epochs * steps_per_epoch;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        for (const auto& batch : iter.epoch()) {
            double tau = hyper.tau;
            if (hyper.anneal_tau && total_steps > 1) {
                tau += (0.5 - hyper.tau) * static_cast<double>(step) /
                       static_cast<double>(total_steps - 1);
            }
            BatchData b = gather(train, batch, cfg);
            Tensor loss;
            try {
                MaskStack masks = sample_relaxed_masks(params, cfg, tau, sampler);
                std::vector<Tensor> token_masks;
                for (const LayerMaskView& m : masks) token_masks.push_back(m.token_weights);
                Tensor logits = model.forward_rows(b.rows, batch.size(), spec.task_id, &masks);
                loss = total_loss(logits, b.labels, token_masks, hyper.alpha, hyper.lambda);
            } catch (const NumericError& e) {
                diverged("mask training", step, e.what());
            }
            if (!std::isfinite(loss.item())) diverged("mask training", step, "non-finite loss");
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
        }
    }

    TaskMaskSet set = binarize(params, cfg);
    set.task_id = spec.task_id;
    set.seed = spec.seed;
    set.epochs = static_cast<std::uint32_t>(spec.epochs);
    const Head& h = model.head(spec.task_id);
    set.head_weight = snapshot(h.weight);
    set.head_bias = snapshot(h.bias);
    return set;
}

void train_classifier_only(ViTModel& model, const TaskSpec& spec, const Dataset& train,
                           OptimKind optim) {
    if (!model.frozen()) throw ContractError("classifier baseline: backbone must be frozen");
    check_dataset(train, spec, model.config(), "train_classifier_only");
    model.add_head(spec.task_id, spec.num_classes(), seed_mix(spec.seed, 0x0EAD));
    Optimizer opt(optim, {{model.head_params(spec.task_id), spec.effective_classifier_lr()}});
    BatchIter iter(train.count, spec.batch_size, seed_mix(spec.seed, 0x5183), true);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        for (const auto& batch : iter.epoch()) {
            BatchData b = gather(train, batch, model.config());
            Tensor loss;
            try {
                Tensor logits = model.forward_rows(b.rows, batch.size(), spec.task_id, nullptr);
                loss = cross_entropy(logits, b.labels);
            } catch (const NumericError& e) {
                diverged("classifier training", step, e.what());
            }
            if (!std::isfinite(loss.item())) diverged("classifier training", step, "non-finite loss");
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> logits_over(const ViTModel& model, const MaskStack& masks,
                                             const Tensor& head_w, const Tensor& head_b,
                                             const Dataset& ds) {
    constexpr std::size_t chunk = 64;
    std::vector<std::vector<double>> out;
    out.reserve(ds.count);
    const std::size_t classes = head_b.numel();
    for (std::size_t start = 0; start < ds.count; start += chunk) {
        const std::size_t end = std::min(ds.count, start + chunk);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        BatchData b = gather(ds, idx, model.config());
        Tensor feats = model.features_rows(b.rows, idx.size(), &masks);
        Tensor logits = add_rowvec(matmul(feats, head_w), head_b);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::vector<double> row(classes);
            for (std::size_t c = 0; c < classes; ++c) row[c] = logits.at(i, c);
            out.push_back(std::move(row));
        }
    }
    return out;
}

double accuracy_of(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits[i].size(); ++c) {
            if (logits[i][c] > logits[i][best]) best = c;
        }
        if (static_cast<int>(best) == labels[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(logits.size());
}

}  // namespace

std::vector<std::vector<double>> eval_logits(const ViTModel& model, int task_id,
                                             const TaskMaskStore& store, const Dataset& ds) {
    if (task_id == 0) {
        const Head& h = model.head(0);
        return logits_over(model, all_ones_masks(model.config()), snapshot(h.weight),
                           snapshot(h.bias), ds);
    }
    auto it = store.find(task_id);
    if (it == store.end()) {
        throw LookupError("no mask set stored for task " + std::to_string(task_id));
    }
    const TaskMaskSet& set = it->second;
    if (set.config_digest != config_digest(model.config())) {
        throw FormatError("mask set belongs to a different backbone configuration");
    }
    return logits_over(model, hard_masks(set, model.config()), set.head_weight, set.head_bias, ds);
}

double evaluate(const ViTModel& model, int task_id, const TaskMaskStore& store,
                const Dataset& ds) {
    return accuracy_of(eval_logits(model, task_id, store, ds), ds.labels);
}

double evaluate_model_head(const ViTModel& model, int task_id, const Dataset& ds) {
    const Head& h = model.head(task_id);
    return accuracy_of(logits_over(model, all_ones_masks(model.config()), snapshot(h.weight),
                                   snapshot(h.bias), ds),
                       ds.labels);
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

std::pair<Dataset, Dataset> task_splits(const TaskSpec& spec) {
    if (spec.train_file.empty() != spec.test_file.empty()) {
        throw ConfigError("task " + std::to_string(spec.task_id) +
                          ": train_file and test_file must be set together");
    }
    if (spec.train_file.empty()) {
        return generate_task(spec.family, spec.n_train, spec.n_test);
    }
    Dataset train = load_raw_dataset(spec.train_file);
    Dataset test = load_raw_dataset(spec.test_file);
    if (train.num_classes != spec.num_classes() || test.num_classes != spec.num_classes()) {
        throw ConfigError("task " + std::to_string(spec.task_id) +
                          ": dataset file class count does not match the task spec");
    }
    return {std::move(train), std::move(test)};
}

PreparedExperimentData prepare_experiment_data(const ExperimentPlan& plan) {
    PreparedExperimentData d;
    auto [btr, bte] = task_splits(plan.base);
    ChannelStats stats = compute_channel_stats(btr);  // base statistics reused everywhere
    d.base_train = std::move(btr);
    d.base_test = std::move(bte);
    normalize(d.base_train, stats);
    normalize(d.base_test, stats);
    for (const TaskSpec& ts : plan.tasks) {
        auto [tr, te] = task_splits(ts);
        normalize(tr, stats);
        normalize(te, stats);
        d.task_train.push_back(std::move(tr));
        d.task_test.push_back(std::move(te));
    }
    return d;
}

namespace {

bool same_logits(const std::vector<std::vector<double>>& a,
                 const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return false;
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            if (std::memcmp(&a[i][j], &b[i][j], sizeof(double)) != 0) return false;
        }
    }
    return true;
}

std::string csv_escape_free(const std::string& s) { return s; }  // families carry no commas

}  // namespace

const char* kMetricsCsvHeader =
    "method,run_seed,order_index,stage,task_id,family,accuracy,base_accuracy_after,"
    "forgetting_delta,logits_bit_identical,mask_bytes,token_ratio_mean,ffn1_ratio_mean,"
    "ffn2_ratio_mean";

namespace {

void write_row(std::ostream& out, const TaskResultRow& r) {
    out << r.method << ',' << r.run_seed << ',' << r.order_index << ',' << r.stage << ','
        << r.task_id << ',' << csv_escape_free(r.family) << ',' << std::setprecision(17)
        << r.accuracy << ',' << r.base_accuracy_after << ',' << r.forgetting_delta << ','
        << (r.logits_bit_identical ? 1 : 0) << ',' << r.mask_bytes << ',' << r.token_ratio_mean
        << ',' << r.ffn1_ratio_mean << ',' << r.ffn2_ratio_mean << '\n';
}

double ratio_mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

}  // namespace

Metrics run_experiment(const ExperimentPlan& plan, const RunOptions& opts) {
    plan.validate();
    PreparedExperimentData data = prepare_experiment_data(plan);
    const ViTConfig& cfg = plan.model;

    Metrics metrics;
    metrics.backbone_bytes = backbone_param_count(cfg) * sizeof(double);

    std::ofstream csv;
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        csv.open(fs::path(opts.out_dir) / "metrics.csv", std::ios::trunc);
        csv << kMetricsCsvHeader << '\n' << std::flush;
    }
    auto emit = [&](const TaskResultRow& row) {
        metrics.rows.push_back(row);
        if (csv.is_open()) {
            write_row(csv, row);
            csv.flush();
        }
        if (opts.log) {
            *opts.log << "[" << row.method << " seed=" << row.run_seed
                      << " order=" << row.order_index << " stage=" << row.stage << "] task "
                      << row.task_id << " acc=" << std::fixed << std::setprecision(4)
                      << row.accuracy << " base_delta=" << std::setprecision(4)
                      << row.forgetting_delta << (row.logits_bit_identical ? "" : " BITFLIP")
                      << std::endl;
        }
    };

    const std::string method_name = to_string(plan.method);
    for (std::uint64_t run_seed : plan.run_seeds) {
        // Per-run effective seeds; order-independent by construction.
        TaskSpec base = plan.base;
        base.seed = seed_mix(run_seed, base.seed);
        std::vector<TaskSpec> tasks = plan.tasks;
        for (TaskSpec& t : tasks) t.seed = seed_mix(run_seed, t.seed);

        ViTModel frozen(cfg, seed_mix(base.seed, 0xBA5E));
        train_base(frozen, base, data.base_train, plan.optimizer);
        if (!opts.out_dir.empty()) {
            fs::path seed_dir = fs::path(opts.out_dir) / ("seed_" + std::to_string(run_seed));
            fs::create_directories(seed_dir);
            save_checkpoint(frozen, (seed_dir / "model.ckpt").string());
        }

        for (std::size_t order_idx = 0; order_idx < plan.orders.size(); ++order_idx) {
            ViTModel m = frozen.clone();
            TaskMaskStore store;
            std::map<int, ViTModel> solo_models;  // Individual baseline keeps one model per task
            std::map<int, std::vector<std::vector<double>>> refs;
            std::map<int, const Dataset*> tests;

            auto recompute = [&](int id) -> std::vector<std::vector<double>> {
                if (id == 0) return eval_logits(m, 0, store, *tests.at(0));
                switch (plan.method) {
                    case Method::Meat: return eval_logits(m, id, store, *tests.at(id));
                    case Method::ClassifierOnly: {
                        const Head& h = m.head(id);
                        return logits_over(m, all_ones_masks(cfg), snapshot(h.weight),
                                           snapshot(h.bias), *tests.at(id));
                    }
                    case Method::Individual: {
                        const ViTModel& solo = solo_models.at(id);
                        const Head& h = solo.head(0);
                        return logits_over(solo, all_ones_masks(cfg), snapshot(h.weight),
                                           snapshot(h.bias), *tests.at(id));
                    }
                }
                throw ContractError("unreachable");
            };

            tests[0] = &data.base_test;
            refs[0] = eval_logits(m, 0, store, data.base_test);
            const double base_acc0 = accuracy_of(refs[0], data.base_test.labels);

            TaskResultRow base_row;
            base_row.method = method_name;
            base_row.run_seed = run_seed;
            base_row.order_index = order_idx;
            base_row.stage = 0;
            base_row.task_id = 0;
            base_row.family = to_string(base.family.kind);
            base_row.accuracy = base_acc0;
            base_row.base_accuracy_after = base_acc0;
            emit(base_row);

            for (std::size_t pos = 0; pos < plan.orders[order_idx].size(); ++pos) {
                const std::size_t tidx = plan.orders[order_idx][pos];
                const TaskSpec& ts = tasks[tidx];
                const Dataset& train = data.task_train[tidx];
                const Dataset& test = data.task_test[tidx];
                tests[ts.task_id] = &test;

                TaskResultRow row;
                row.method = method_name;
                row.run_seed = run_seed;
                row.order_index = order_idx;
                row.stage = pos + 1;
                row.task_id = ts.task_id;
                row.family = to_string(ts.family.kind);

                switch (plan.method) {
                    case Method::Meat: {
                        TaskMaskSet set = train_task(m, ts, plan.meat, train, plan.optimizer);
                        std::vector<std::uint8_t> bytes = serialize_masks(set, cfg);
                        row.mask_bytes = bytes.size();
                        ActivationRatios ratios = activation_ratios(set, cfg);
                        row.token_ratio_mean = ratio_mean(ratios.token);
                        row.ffn1_ratio_mean = ratio_mean(ratios.ffn1);
                        row.ffn2_ratio_mean = ratio_mean(ratios.ffn2);
                        store[ts.task_id] = set;
                        if (!opts.out_dir.empty()) {
                            fs::path dir = fs::path(opts.out_dir) /
                                           ("seed_" + std::to_string(run_seed)) /
                                           ("order_" + std::to_string(order_idx));
                            fs::create_directories(dir);
                            write_file_bytes(
                                (dir / ("task_" + std::to_string(ts.task_id) + ".mask")).string(),
                                bytes);
                        }
                        break;
                    }
                    case Method::ClassifierOnly:
                        train_classifier_only(m, ts, train, plan.optimizer);
                        break;
                    case Method::Individual: {
                        TaskSpec solo_spec = ts;
                        solo_spec.task_id = 0;  // a fresh model owns this task outright
                        ViTModel solo(cfg, seed_mix(ts.seed, 0xBA5E));
                        train_base(solo, solo_spec, train, plan.optimizer);
                        solo_models.emplace(ts.task_id, std::move(solo));
                        break;
                    }
                }

                refs[ts.task_id] = recompute(ts.task_id);
                row.accuracy = accuracy_of(refs[ts.task_id], test.labels);

                // Audit every earlier task (including the base) for bit-exact logits.
                bool all_identical = true;
                for (const auto& [id, ref] : refs) {
                    if (id == ts.task_id) continue;
                    if (!same_logits(ref, recompute(id))) all_identical = false;
                }
                std::vector<std::vector<double>> base_now = recompute(0);
                row.base_accuracy_after = accuracy_of(base_now, data.base_test.labels);
                row.forgetting_delta = row.base_accuracy_after - base_acc0;
                row.logits_bit_identical = all_identical;
                emit(row);
            }
        }
    }

    if (!opts.out_dir.empty()) {
        std::ofstream summary(fs::path(opts.out_dir) / "summary.txt", std::ios::trunc);
        write_summary(metrics, plan, summary);
    }
    return metrics;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

Metrics::Aggregate Metrics::accuracy(const std::string& method, int task_id) const {
    Aggregate agg;
    double sum = 0.0, sq = 0.0;
    for (const TaskResultRow& r : rows) {
        if (r.method != method || r.task_id != task_id) continue;
        sum += r.accuracy;
        sq += r.accuracy * r.accuracy;
        ++agg.count;
    }
    if (agg.count == 0) return agg;
    agg.mean = sum / static_cast<double>(agg.count);
    const double var = std::max(0.0, sq / static_cast<double>(agg.count) - agg.mean * agg.mean);
    agg.std_dev = std::sqrt(var);
    return agg;
}

std::vector<int> Metrics::task_ids(const std::string& method) const {
    std::vector<int> ids;
    for (const TaskResultRow& r : rows) {
        if (r.method == method && std::find(ids.begin(), ids.end(), r.task_id) == ids.end()) {
            ids.push_back(r.task_id);
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<std::string> Metrics::methods() const {
    std::vector<std::string> out;
    for (const TaskResultRow& r : rows) {
        if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    }
    return out;
}

void write_metrics_csv(const Metrics& metrics, std::ostream& out) {
    out << kMetricsCsvHeader << '\n';
    for (const TaskResultRow& r : metrics.rows) write_row(out, r);
}

Metrics read_metrics_csv(std::istream& in) {
    Metrics metrics;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("metrics.csv: empty file");
    if (line != kMetricsCsvHeader) throw FormatError("metrics.csv: unexpected header");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 14) {
            throw FormatError("metrics.csv: line " + std::to_string(lineno) + " has " +
                              std::to_string(cells.size()) + " cells, want 14");
        }
        try {
            TaskResultRow r;
            r.method = cells[0];
            r.run_seed = std::stoull(cells[1]);
            r.order_index = std::stoul(cells[2]);
            r.stage = std::stoul(cells[3]);
            r.task_id = std::stoi(cells[4]);
            r.family = cells[5];
            r.accuracy = std::stod(cells[6]);
            r.base_accuracy_after = std::stod(cells[7]);
            r.forgetting_delta = std::stod(cells[8]);
            r.logits_bit_identical = cells[9] == "1";
            r.mask_bytes = std::stoul(cells[10]);
            r.token_ratio_mean = std::stod(cells[11]);
            r.ffn1_ratio_mean = std::stod(cells[12]);
            r.ffn2_ratio_mean = std::stod(cells[13]);
            metrics.rows.push_back(std::move(r));
        } catch (const std::exception&) {
            throw FormatError("metrics.csv: malformed line " + std::to_string(lineno));
        }
    }
    return metrics;
}

void write_summary(const Metrics& metrics, const ExperimentPlan& plan, std::ostream& out) {
    const ViTConfig& cfg = plan.model;
    std::vector<std::size_t> classes;
    for (const TaskSpec& t : plan.tasks) classes.push_back(t.num_classes());
    OverheadReport report = overhead_report(cfg, plan.tasks.size(), classes);

    out << "== task-continual learning report ==\n";
    out << "backbone: " << backbone_param_count(cfg) << " params, " << report.backbone_bytes
        << " bytes\n";
    out << "mask payload per task: " << report.mask_payload_bytes_per_task << " bytes ("
        << report.mask_bits_per_task << " bits)\n\n";

    for (const std::string& method : metrics.methods()) {
        out << "method: " << method << "\n";
        out << "  task  family             accuracy (mean+/-std)   forgetting   bit-identical\n";
        for (int id : metrics.task_ids(method)) {
            Metrics::Aggregate agg = metrics.accuracy(method, id);
            double worst_delta = 0.0;
            bool bits = true;
            std::string family;
            for (const TaskResultRow& r : metrics.rows) {
                if (r.method != method || r.task_id != id) continue;
                family = r.family;
                bits = bits && r.logits_bit_identical;
            }
            // The base-task drop is audited on every row of this method.
            for (const TaskResultRow& r : metrics.rows) {
                if (r.method != method) continue;
                worst_delta = std::min(worst_delta, r.forgetting_delta);
            }
            std::ostringstream fam;
            fam << std::left << std::setw(18) << family;
            out << "  " << std::left << std::setw(5) << id << " " << fam.str() << " "
                << std::fixed << std::setprecision(4) << agg.mean << " +/- " << agg.std_dev
                << "        (" << std::setprecision(2) << std::abs(worst_delta) << ")"
                << "         " << (bits ? "yes" : "NO") << "\n";
        }
        if (method == "meat") {
            out << "  storage: " << report.meat_total_bytes() << " bytes total, +"
                << std::fixed << std::setprecision(4) << report.meat_overhead_ratio()
                << "x backbone overhead\n";
        } else if (method == "individual") {
            out << "  storage: " << report.individual_total_bytes() << " bytes total, "
                << std::fixed << std::setprecision(2) << report.individual_multiplier()
                << "x backbone\n";
        }
        out << "\n";
    }
}

}  // namespace meat
