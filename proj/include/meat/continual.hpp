#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "meat/data.hpp"
#include "meat/masks.hpp"
#include "meat/vit.hpp"

namespace meat {

enum class Method { Meat, ClassifierOnly, Individual };
enum class OptimKind { Sgd, Adam };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

// Learning-rate rules: (batch/1024) * 5e-4 for classifiers, (batch/1024) * 0.1
// for mask logits. TaskSpec fields override them when nonzero.
double rule_classifier_lr(std::size_t batch_size);
double rule_mask_lr(std::size_t batch_size);

struct TaskSpec {
    int task_id = 0;
    TaskFamily family;
    std::string train_file;  // when set, load "MEATDAT1" files instead of generating
    std::string test_file;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double classifier_lr = 0.0;  // 0 -> rule
    double mask_lr = 0.0;        // 0 -> rule
    std::uint64_t seed = 0;

    std::size_t num_classes() const { return family.num_classes; }
    double effective_classifier_lr() const {
        return classifier_lr > 0.0 ? classifier_lr : rule_classifier_lr(batch_size);
    }
    double effective_mask_lr() const {
        return mask_lr > 0.0 ? mask_lr : rule_mask_lr(batch_size);
    }
};

// Raw train/test pair for one task: generated from the family, or loaded from
// the container files when they are set.
std::pair<Dataset, Dataset> task_splits(const TaskSpec& spec);

struct ExperimentPlan {
    ViTConfig model;
    MeatHyper meat;
    OptimKind optimizer = OptimKind::Sgd;
    Method method = Method::Meat;
    std::vector<std::uint64_t> run_seeds{1};
    std::vector<std::vector<std::size_t>> orders;  // permutations of task indices
    TaskSpec base;
    std::vector<TaskSpec> tasks;

    void validate() const;  // throws ConfigError
};

// Generate `count` seeded permutations of {0..n-1}; the first is the identity.
std::vector<std::vector<std::size_t>> make_orders(std::size_t n, std::size_t count,
                                                  std::uint64_t seed);

// Every dataset of the plan, normalized with the base task's channel
// statistics (computed on the raw base training split).
struct PreparedExperimentData {
    Dataset base_train, base_test;
    std::vector<Dataset> task_train, task_test;
};
PreparedExperimentData prepare_experiment_data(const ExperimentPlan& plan);

// ---------------------------------------------------------------------------
// Optimizers: two parameter groups with independent learning rates.
// ---------------------------------------------------------------------------

struct ParamGroup {
    std::vector<Tensor> params;
    double lr = 0.0;
};

class Optimizer {
public:
    Optimizer(OptimKind kind, std::vector<ParamGroup> groups);
    void zero_grad();
    void step();

private:
    OptimKind kind_;
    std::vector<ParamGroup> groups_;
    std::vector<std::vector<double>> m_, v_;  // adam moments, per parameter
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training / evaluation
// ---------------------------------------------------------------------------

// Train every backbone parameter plus the task-0 head with cross-entropy on
// the (normalized) base dataset, then freeze the backbone. The task seed
// drives batch shuffling; head/model init comes from the caller. When
// epoch_losses is given it receives the mean training loss of every epoch.
void train_base(ViTModel& model, const TaskSpec& spec, const Dataset& train, OptimKind optim,
                std::vector<double>* epoch_losses = nullptr);

// Train mask logits + a fresh head for a new task over the frozen backbone.
// Throws ContractError for task 0 (the base task keeps the standard all-ones
// interaction pattern) or when the backbone is not frozen.
TaskMaskSet train_task(ViTModel& model, const TaskSpec& spec, const MeatHyper& hyper,
                       const Dataset& train, OptimKind optim);

// Classifier-only baseline: fresh head on the frozen backbone, no masks.
void train_classifier_only(ViTModel& model, const TaskSpec& spec, const Dataset& train,
                           OptimKind optim);

using TaskMaskStore = std::map<int, TaskMaskSet>;

// Per-example logits under hard binary masks (task 0: all-ones + model head;
// other tasks: stored masks + stored head). Deterministic; no Gumbel noise.
std::vector<std::vector<double>> eval_logits(const ViTModel& model, int task_id,
                                             const TaskMaskStore& store, const Dataset& ds);

// Top-1 accuracy from eval_logits.
double evaluate(const ViTModel& model, int task_id, const TaskMaskStore& store,
                const Dataset& ds);

// Baseline evaluation path: model-registered head, all-ones masks.
double evaluate_model_head(const ViTModel& model, int task_id, const Dataset& ds);

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct TaskResultRow {
    std::string method;
    std::uint64_t run_seed = 0;
    std::size_t order_index = 0;
    std::size_t stage = 0;  // 0 = base measurement, k = after k-th new task
    int task_id = 0;
    std::string family;
    double accuracy = 0.0;
    double base_accuracy_after = 0.0;
    double forgetting_delta = 0.0;   // base accuracy now minus at freeze time
    bool logits_bit_identical = true;  // all earlier tasks byte-equal so far
    std::size_t mask_bytes = 0;        // serialized mask file size (0 = none)
    double token_ratio_mean = 0.0;     // mean over layers, MEAT rows only
    double ffn1_ratio_mean = 0.0;
    double ffn2_ratio_mean = 0.0;
};

struct Metrics {
    std::vector<TaskResultRow> rows;
    std::size_t backbone_bytes = 0;

    struct Aggregate {
        double mean = 0.0;
        double std_dev = 0.0;
        std::size_t count = 0;
    };
    // Accuracy aggregate over all rows for (method, task_id).
    Aggregate accuracy(const std::string& method, int task_id) const;
    std::vector<int> task_ids(const std::string& method) const;
    std::vector<std::string> methods() const;
};

struct RunOptions {
    std::string out_dir;        // empty: no artifacts written
    std::ostream* log = nullptr;  // progress lines
};

// Execute the full protocol: per run seed, train the base once, then run every
// order permutation, training each task in sequence and auditing earlier-task
// logits for bit-exactness after every stage. Rows are flushed to
// <out_dir>/metrics.csv as they are produced.
Metrics run_experiment(const ExperimentPlan& plan, const RunOptions& opts = {});

// ---------------------------------------------------------------------------
// Metrics I/O
// ---------------------------------------------------------------------------

extern const char* kMetricsCsvHeader;

void write_metrics_csv(const Metrics& metrics, std::ostream& out);
Metrics read_metrics_csv(std::istream& in);
void write_summary(const Metrics& metrics, const ExperimentPlan& plan, std::ostream& out);

}  // namespace meat
