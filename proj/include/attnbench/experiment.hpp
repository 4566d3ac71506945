#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attnbench/data.hpp"
#include "attnbench/models.hpp"
#include "attnbench/training.hpp"

// One training run per model family over a shared dataset cache, and the
// summary files that compare them.
namespace attnbench {

/// Parameter-initialization stream for a run seed, distinct from the
/// shuffling and dropout streams train() derives from the same seed.
Rng model_init_rng(std::uint64_t seed);

struct EncodedDataset {
    Vocabulary vocab;
    std::vector<TokenSequence> train;
    std::vector<TokenSequence> test;
};
EncodedDataset load_encoded(const std::filesystem::path& dir);

struct RunSpec {
    ModelConfig model;
    TrainOptions train;
};

/// key=value lines describing a run, written next to its metrics.
void write_run_snapshot(const std::filesystem::path& path, const RunSpec& spec,
                        const std::map<std::string, std::string>& extra);

/// Builds the model and trains it into spec.train.out_dir.
TrainResult run_single(const RunSpec& spec, const EncodedDataset& data, const EpochCallback& on_epoch = {});

struct CompareRow {
    std::string model;
    std::string status; // ok, unstable, halted, failed
    std::optional<RunSummary> summary;
    std::string error;
};

using RunLogger = std::function<void(const std::string& model, const MetricsRecord&)>;

/// Trains every spec, each into its own out_dir, at most `jobs` at a time. A
/// run that throws becomes a failed row; the others are unaffected.
std::vector<CompareRow> run_comparison(const std::vector<RunSpec>& specs, const EncodedDataset& data,
                                       std::size_t jobs = 1, const RunLogger& log = {});

inline constexpr const char* kSummaryHeader = "model,bleu,sec_per_epoch,epochs_to_converge,n_params";
void write_summary_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);
/// Sidecar of the summary: model,status,instability_epoch.
void write_instability_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);

} // namespace attnbench
