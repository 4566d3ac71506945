#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "attnbench/training.hpp"

namespace attnbench {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Standalone SVG line chart. Non-finite points are skipped.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

/// Overlay charts (train_loss, avg_bleu, epoch_sec, test_ppl) of one or more
/// runs keyed by run name. Returns the files written.
std::vector<std::filesystem::path> plot_runs(const std::map<std::string, std::vector<MetricsRecord>>& runs,
                                             const std::filesystem::path& out_dir);

} // namespace attnbench
