#include "meat/plan.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "meat/error.hpp"

namespace meat {

namespace {

using nlohmann::json;

const json* find(const json& obj, const std::string& path) {
    const json* cur = &obj;
    std::size_t start = 0;
    while (start < path.size()) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!cur->is_object() || !cur->contains(key)) return nullptr;
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    return cur;
}

template <typename T>
T require(const json& obj, const std::string& path) {
    const json* v = find(obj, path);
    if (!v) throw ConfigError("missing config key: " + path);
    try {
        return v->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key has wrong type: " + path);
    }
}

template <typename T>
T get_or(const json& obj, const std::string& path, T fallback) {
    const json* v = find(obj, path);
    if (!v) return fallback;
    try {
        return v->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key has wrong type: " + path);
    }
}

TaskSpec parse_task(const json& j, const std::string& prefix, int task_id,
                    const ViTConfig& model, bool is_base) {
    TaskSpec t;
    t.task_id = task_id;
    t.family.kind = family_kind_from_string(require<std::string>(j, prefix + ".family"));
    t.family.num_classes = require<std::size_t>(j, prefix + ".classes");
    t.family.image_size = model.image_size;
    t.family.channels = model.channels;
    t.family.palette = get_or<int>(j, prefix + ".palette", 0);
    t.family.noise = get_or<double>(j, prefix + ".noise", 0.05);
    t.family.jitter = get_or<double>(j, prefix + ".jitter", 2.0);
    t.family.seed = get_or<std::uint64_t>(j, prefix + ".data_seed",
                                          0xDA7A0000ULL + static_cast<std::uint64_t>(task_id));
    t.train_file = get_or<std::string>(j, prefix + ".train_file", "");
    t.test_file = get_or<std::string>(j, prefix + ".test_file", "");
    if (t.train_file.empty()) {
        t.n_train = require<std::size_t>(j, prefix + ".n_train");
        t.n_test = require<std::size_t>(j, prefix + ".n_test");
    }
    t.epochs = get_or<std::size_t>(j, prefix + ".epochs", 30);
    t.batch_size = get_or<std::size_t>(j, prefix + ".batch", 64);
    t.seed = get_or<std::uint64_t>(j, prefix + ".seed", 0x5EED0000ULL + task_id);
    if (is_base) {
        t.classifier_lr = get_or<double>(j, prefix + ".lr", 0.0);
    } else {
        t.classifier_lr = get_or<double>(j, prefix + ".classifier_lr", 0.0);
        t.mask_lr = get_or<double>(j, prefix + ".mask_lr", 0.0);
    }
    return t;
}

}  // namespace

ExperimentPlan plan_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }

    ExperimentPlan plan;
    plan.model.image_size = get_or<std::size_t>(j, "model.image_size", 32);
    plan.model.patch_size = get_or<std::size_t>(j, "model.patch_size", 8);
    plan.model.channels = get_or<std::size_t>(j, "model.channels", 3);
    plan.model.embed_dim = get_or<std::size_t>(j, "model.embed_dim", 64);
    plan.model.heads = get_or<std::size_t>(j, "model.heads", 4);
    plan.model.layers = get_or<std::size_t>(j, "model.layers", 4);
    plan.model.ffn_hidden = get_or<std::size_t>(j, "model.ffn_hidden", 128);

    plan.meat.gamma = get_or<double>(j, "meat.gamma", 4.0);
    plan.meat.alpha = get_or<double>(j, "meat.alpha", 2.0);
    plan.meat.lambda = get_or<double>(j, "meat.lambda", 0.9);
    plan.meat.tau = get_or<double>(j, "meat.tau", 1.0);
    plan.meat.anneal_tau = get_or<bool>(j, "meat.anneal_tau", false);

    const std::string optim = get_or<std::string>(j, "train.optimizer", "sgd");
    if (optim == "sgd") {
        plan.optimizer = OptimKind::Sgd;
    } else if (optim == "adam") {
        plan.optimizer = OptimKind::Adam;
    } else {
        throw ConfigError("train.optimizer must be sgd or adam, got: " + optim);
    }
    plan.method = method_from_string(get_or<std::string>(j, "train.method", "meat"));
    plan.run_seeds = get_or<std::vector<std::uint64_t>>(j, "train.seeds", {1});
    if (plan.run_seeds.empty()) throw ConfigError("train.seeds must not be empty");

    if (!find(j, "base")) throw ConfigError("missing config key: base");
    plan.base = parse_task(j, "base", 0, plan.model, true);

    const json* tasks = find(j, "tasks");
    if (!tasks || !tasks->is_array()) throw ConfigError("missing config key: tasks");
    for (std::size_t i = 0; i < tasks->size(); ++i) {
        json wrapper;
        wrapper["t"] = (*tasks)[i];
        plan.tasks.push_back(parse_task(wrapper, "t", static_cast<int>(i) + 1, plan.model, false));
    }

    const json* orders = find(j, "train.orders");
    if (orders && orders->is_array()) {
        for (const json& o : *orders) {
            try {
                plan.orders.push_back(o.get<std::vector<std::size_t>>());
            } catch (const json::exception&) {
                throw ConfigError("config key has wrong type: train.orders");
            }
        }
    } else {
        const std::size_t count = get_or<std::size_t>(j, "train.orders", 1);
        const std::uint64_t order_seed = get_or<std::uint64_t>(j, "train.order_seed", 1234);
        plan.orders = make_orders(plan.tasks.size(), count, order_seed);
    }

    plan.validate();
    return plan;
}

ExperimentPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return plan_from_json(ss.str());
}

}  // namespace meat
