#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnbench/data.hpp"
#include "attnbench/evaluation.hpp"
#include "attnbench/models.hpp"
#include "attnbench/nn.hpp"

namespace attnbench {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    AdamConfig hp;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    /// Zero moments shaped like every tensor of `params`.
    static OptimizerState for_parameters(const ParameterStore& params, AdamConfig hp = {});
};

/// One bias-corrected Adam update with learning rate `lr`. Every parameter
/// must carry a gradient (ContractError otherwise).
void adam_step(ParameterStore& params, OptimizerState& state, double lr);
inline void adam_step(ParameterStore& params, OptimizerState& state) { adam_step(params, state, state.hp.lr); }

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double noam_lr(std::uint64_t step, std::size_t d_model, std::size_t warmup);

/// Whether the last epoch of `train_losses` is unstable: non-finite, or more
/// than 3x the median of the (up to) five epochs before it.
bool detect_instability(std::span<const double> train_losses);

/// Rescales all gradients jointly so their global L2 norm is at most
/// max_norm. Returns the norm before clipping.
double gradient_clip(ParameterStore& params, double max_norm);

enum class NonFinitePolicy { Halt, Continue };

struct TrainOptions {
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    AdamConfig adam;
    /// Noam schedule when warmup > 0 (d_model = hidden_dim); plain Adam otherwise.
    std::size_t noam_warmup = 0;
    /// Stop after this many epochs without a new best BLEU; 0 disables.
    std::size_t patience = 0;
    /// Stop once avg_bleu reaches this value; values above 1 disable.
    double target_bleu = 2.0;
    /// Global-norm clipping threshold; 0 disables.
    double clip_norm = 0.0;
    NonFinitePolicy non_finite = NonFinitePolicy::Halt;
    EvalOptions eval;
    /// When set, metrics.csv and best.ckpt are written here.
    std::optional<std::filesystem::path> out_dir;
};

struct MetricsRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_ppl = 1.0;
    double epoch_seconds = 0.0;
    double test_loss = 0.0;
    double test_ppl = 1.0;
    double avg_bleu = 0.0;
    bool instability = false;
};

struct RunSummary {
    double best_bleu = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_to_converge = 0;
    double seconds_per_epoch = 0.0; // median
    std::size_t parameter_count = 0;
    std::optional<std::size_t> instability_epoch; // first flagged epoch
    bool halted = false;                          // stopped on a non-finite loss
};

struct TrainResult {
    std::vector<MetricsRecord> metrics;
    RunSummary summary;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

/// Epoch loop: shuffled teacher-forced training pass, evaluation on the test
/// split, one metrics row per epoch, best-BLEU checkpoint retained. All
/// randomness after model construction comes from options.seed.
TrainResult train(Seq2SeqModel& model, const std::vector<TokenSequence>& train_set,
                  const std::vector<TokenSequence>& test_set, const Vocabulary& vocab, const TrainOptions& options,
                  const EpochCallback& on_epoch = {});

/// First epoch whose avg_bleu is within 1% of the run's best (0 for no rows).
std::size_t epochs_to_converge(std::span<const MetricsRecord> metrics);

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_ppl,epoch_sec,test_loss,test_ppl,avg_bleu,instability";
std::string format_metrics_row(const MetricsRecord& record);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Training defaults for a family at a scale (batch size, budget, schedule).
TrainOptions preset_train_options(Family family, Scale scale);

} // namespace attnbench
