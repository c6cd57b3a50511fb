#ifndef CAPSKIT_TRAIN_HPP_
#define CAPSKIT_TRAIN_HPP_

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "capskit/capsnet.hpp"
#include "capskit/data_io.hpp"

namespace capskit {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct TrainConfig {
    SquashSpec squash = SquashSpec::norm_m(2);
    RoutingSpec routing = RoutingSpec::dynamic(3, SquashSpec::norm_m(2));
    OptimizerConfig opt;
    std::int64_t batch_size = 128;
    int epochs = 10;
    int folds = 0;  // 0 = plain train/test, >= 2 = k-fold over the train split
    std::uint64_t seed = 1;
    std::string preset = "full";
    std::string dataset = "mnist";
    int workers = 1;
    std::int64_t limit = 0;  // 0 = whole training split

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct EpochRecord {
    int fold = 0;
    int epoch = 0;
    double train_acc = 0, val_acc = 0, test_acc = 0;
    double train_loss = 0, test_loss = 0;
    double seconds = 0;

    bool equals_ignoring_seconds(const EpochRecord& o, double tol = 0.0) const;
};

struct AdamState {
    CapsNetParams m, v;
    std::int64_t t = 0;

    static AdamState zeros_like(const CapsNetParams& p);
};

/* One bias-corrected Adam update, in place. */
void adam_step(CapsNetParams& params, const CapsNetParams& grads, AdamState& state,
               const OptimizerConfig& opt);

/* Accuracy and mean margin loss over a whole dataset (or an index subset).
 * Deterministic for any worker count: fixed-chunk reduction. */
std::pair<double, double> evaluate(const CapsNetParams& params, const ArchConfig& arch,
                                   const Dataset& data, const RoutingSpec& routing, int workers,
                                   const std::vector<std::int64_t>* indices = nullptr);

struct BatchStats {
    double loss_sum = 0;
    std::int64_t correct = 0;
    bool finite = true;
};

/* Sum of per-sample gradients of margin_loss . forward over the given samples,
 * added into grad_out. The reduction order is fixed (8 chunks, in-chunk sample
 * order) so any worker count gives bit-identical sums. */
BatchStats accumulate_batch_gradients(const CapsNetParams& params, const ArchConfig& arch,
                                      const RoutingSpec& routing, const Dataset& data,
                                      const std::int64_t* idx, std::int64_t count, int workers,
                                      CapsNetParams& grad_out);

class MetricsWriter {
public:
    MetricsWriter(const std::string& path, bool append);
    void write(const EpochRecord& r);
    const std::string& path() const { return path_; }

    static const char* header();

private:
    std::string path_;
    std::ofstream out_;
};

std::vector<EpochRecord> parse_metrics_csv(const std::string& path);

struct Checkpoint {
    std::uint32_t version = 1;
    TrainConfig config;
    CapsNetParams params;
    AdamState moments;
    int fold_id = 0;
    int epochs_done = 0;
    std::uint64_t seed_state = 0;  // the run seed; epoch shuffles derive from it
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

struct FoldResult {
    std::vector<EpochRecord> records;
    bool aborted = false;
    std::string abort_reason;
    CapsNetParams params;
    AdamState moments;
};

/* Train one fold (or the plain train/test split when plan is null): seeded
 * per-epoch shuffle, batched forward/backward/adam, per-epoch evaluation on
 * the validation fold and the test split. A non-finite batch loss aborts the
 * fold with a diagnostic record instead of crashing. */
FoldResult run_fold(const TrainConfig& config, const ArchConfig& arch, const Dataset& train,
                    const Dataset& test, const FoldPlan* plan, int fold_id,
                    MetricsWriter* metrics = nullptr, const Checkpoint* resume = nullptr,
                    const std::string& checkpoint_path = "");

struct SquashSummary {
    std::string function;
    double acc_mean = 0, acc_std = 0;
    double loss_mean = 0, loss_std = 0;  // mean margin loss per sample x1000
    int folds = 0;
    int aborted = 0;
};

struct ExperimentSummary {
    std::vector<SquashSummary> rows;
    std::string to_csv() const;
};

/* k-fold sweep over squash variants; per variant, mean +/- std of final-epoch
 * test accuracy and loss across folds. Fold aborts are carried into the
 * summary as aborted counts rather than failing the sweep. */
ExperimentSummary run_experiment(const TrainConfig& config, const ArchConfig& arch,
                                 const Dataset& train, const Dataset& test,
                                 const std::vector<SquashSpec>& sweep,
                                 MetricsWriter* metrics = nullptr);

}  // namespace capskit

#endif  // CAPSKIT_TRAIN_HPP_
