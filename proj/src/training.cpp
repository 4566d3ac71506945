#include "attnbench/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "attnbench/checkpoint.hpp"
#include "attnbench/errors.hpp"

namespace attnbench {

OptimizerState OptimizerState::for_parameters(const ParameterStore& params, AdamConfig hp) {
    OptimizerState s;
    s.hp = hp;
    for (const auto& e : params.entries()) {
        s.first_moment.emplace_back(e.tensor.numel(), 0.0);
        s.second_moment.emplace_back(e.tensor.numel(), 0.0);
    }
    return s;
}

void adam_step(ParameterStore& params, OptimizerState& state, double lr) {
    auto& entries = params.entries();
    if (state.first_moment.size() != entries.size()) {
        throw ContractError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                            " tensors, store has " + std::to_string(entries.size()));
    }
    for (const auto& e : entries) {
        if (!e.tensor.has_grad()) throw ContractError("parameter " + e.name + " has no gradient");
    }
    ++state.step;
    const auto& hp = state.hp;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(hp.beta1, t);
    const double correct2 = 1.0 - std::pow(hp.beta2, t);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto p = entries[i].tensor.mutable_data();
        auto g = entries[i].tensor.grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            const double m_hat = m[j] / correct1;
            const double v_hat = v[j] / correct2;
            p[j] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
        }
    }
}

double noam_lr(std::uint64_t step, std::size_t d_model, std::size_t warmup) {
    if (step == 0) throw ContractError("noam schedule is defined from step 1");
    if (d_model == 0 || warmup == 0) throw ContractError("noam schedule needs positive d_model and warmup");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

bool detect_instability(std::span<const double> train_losses) {
    if (train_losses.empty()) return false;
    const double last = train_losses.back();
    if (!std::isfinite(last)) return true;
    if (train_losses.size() < 2) return false;
    const std::size_t n_prev = std::min<std::size_t>(5, train_losses.size() - 1);
    std::vector<double> prev(train_losses.end() - 1 - static_cast<std::ptrdiff_t>(n_prev), train_losses.end() - 1);
    std::sort(prev.begin(), prev.end());
    const double median =
        prev.size() % 2 ? prev[prev.size() / 2] : 0.5 * (prev[prev.size() / 2 - 1] + prev[prev.size() / 2]);
    return last > 3.0 * median;
}

double gradient_clip(ParameterStore& params, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip threshold must be positive");
    double sq = 0.0;
    for (const auto& e : params.entries()) {
        for (double g : e.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (const auto& e : params.entries()) {
            if (!e.tensor.has_grad()) continue;
            for (double& g : e.tensor.mutable_grad()) g *= factor;
        }
    }
    return norm;
}

std::size_t epochs_to_converge(std::span<const MetricsRecord> metrics) {
    if (metrics.empty()) return 0;
    double best = metrics.front().avg_bleu;
    for (const auto& m : metrics) best = std::max(best, m.avg_bleu);
    for (const auto& m : metrics) {
        if (m.avg_bleu >= 0.99 * best) return m.epoch;
    }
    return metrics.back().epoch;
}

namespace {

std::string g6(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

std::string exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string format_metrics_row(const MetricsRecord& r) {
    return std::to_string(r.epoch) + ',' + g6(r.train_loss) + ',' + g6(r.train_ppl) + ',' + g6(r.epoch_seconds) + ',' +
           g6(r.test_loss) + ',' + g6(r.test_ppl) + ',' + g6(r.avg_bleu) + ',' + (r.instability ? "1" : "0");
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw FormatError(path.string() + ": expected header '" + std::string(kMetricsHeader) + "'");
    }
    std::vector<MetricsRecord> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 8 columns");
        }
        try {
            MetricsRecord r;
            r.epoch = std::stoul(cells[0]);
            r.train_loss = std::stod(cells[1]);
            r.train_ppl = std::stod(cells[2]);
            r.epoch_seconds = std::stod(cells[3]);
            r.test_loss = std::stod(cells[4]);
            r.test_ppl = std::stod(cells[5]);
            r.avg_bleu = std::stod(cells[6]);
            r.instability = cells[7] == "1";
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unparsable value");
        }
    }
    return rows;
}

TrainOptions preset_train_options(Family family, Scale scale) {
    TrainOptions o;
    o.batch_size = scale == Scale::Paper ? 128 : 32;
    o.epochs = family == Family::LstmPlain ? 700 : 50;
    if (family == Family::Transformer) o.noam_warmup = scale == Scale::Paper ? 4000 : 400;
    return o;
}

TrainResult train(Seq2SeqModel& model, const std::vector<TokenSequence>& train_set,
                  const std::vector<TokenSequence>& test_set, const Vocabulary& vocab, const TrainOptions& options,
                  const EpochCallback& on_epoch) {
    using Clock = std::chrono::steady_clock;
    if (model.config().vocab_size != vocab.size()) {
        throw ConfigError("model vocabulary of " + std::to_string(model.config().vocab_size) +
                          " tokens does not match dataset vocabulary of " + std::to_string(vocab.size()));
    }
    if (options.batch_size == 0) throw ConfigError("batch size must be at least 1");

    ParameterStore& params = model.parameters();
    Rng master(options.seed);
    Rng shuffle_rng = master.fork();
    Rng dropout_rng = master.fork();
    OptimizerState opt = OptimizerState::for_parameters(params, options.adam);

    std::ofstream metrics_file;
    std::filesystem::path checkpoint_path;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        metrics_file.open(*options.out_dir / "metrics.csv", std::ios::trunc);
        if (!metrics_file) throw DataError("cannot write " + (*options.out_dir / "metrics.csv").string());
        metrics_file << kMetricsHeader << '\n' << std::flush;
        checkpoint_path = *options.out_dir / "best.ckpt";
        std::filesystem::remove(checkpoint_path);
    }

    TrainResult result;
    result.summary.parameter_count = model.parameter_count();
    std::vector<double> loss_history, epoch_times;
    double best = -1.0;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
        const auto start = Clock::now();
        double loss_sum = 0.0;
        std::size_t tokens = 0;
        bool non_finite = false;
        for (const auto& batch : make_batches(train_set, options.batch_size, &shuffle_rng)) {
            params.clear_grad();
            Tape tape;
            Tensor loss;
            {
                TapeScope scope(tape);
                loss = cross_entropy(model.forward_teacher_forced(batch.source, batch.target, dropout_rng),
                                     batch.target.ids, kPad);
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                non_finite = true;
                tape.clear();
                if (options.non_finite == NonFinitePolicy::Halt) break;
                continue;
            }
            tape.backward(loss);
            if (options.clip_norm > 0.0) gradient_clip(params, options.clip_norm);
            const double lr = options.noam_warmup ? noam_lr(opt.step + 1, model.config().hidden_dim, options.noam_warmup)
                                                  : options.adam.lr;
            adam_step(params, opt, lr);
            // Parameters live at checkpoint precision so a reload is exact.
            params.round_to_float();
            std::size_t n = 0;
            for (std::size_t len : batch.target.lengths) n += len;
            loss_sum += value * static_cast<double>(n);
            tokens += n;
        }
        const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
        params.clear_grad();

        MetricsRecord rec;
        rec.epoch = epoch;
        const bool halted = non_finite && options.non_finite == NonFinitePolicy::Halt;
        rec.train_loss = (halted || tokens == 0) ? std::numeric_limits<double>::quiet_NaN()
                                                 : loss_sum / static_cast<double>(tokens);
        rec.train_ppl = perplexity(rec.train_loss);
        rec.epoch_seconds = seconds;
        const EvalReport report = evaluate(model, test_set, vocab, options.eval);
        rec.test_loss = report.test_loss;
        rec.test_ppl = report.perplexity;
        rec.avg_bleu = report.avg_bleu;
        loss_history.push_back(rec.train_loss);
        rec.instability = non_finite || detect_instability(loss_history);
        if (rec.instability && !result.summary.instability_epoch) result.summary.instability_epoch = epoch;

        result.metrics.push_back(rec);
        epoch_times.push_back(seconds);
        if (metrics_file.is_open()) metrics_file << format_metrics_row(rec) << '\n' << std::flush;

        if (rec.avg_bleu > best) {
            best = rec.avg_bleu;
            since_best = 0;
            result.summary.best_epoch = epoch;
            if (options.out_dir) {
                save_checkpoint(checkpoint_path, model,
                                {{"epoch", std::to_string(epoch)},
                                 {"avg_bleu", exact(rec.avg_bleu)},
                                 {"test_loss", exact(rec.test_loss)}});
            }
        } else {
            ++since_best;
        }
        if (on_epoch) on_epoch(rec);

        if (halted) {
            result.summary.halted = true;
            break;
        }
        if (options.patience && since_best >= options.patience) break;
        if (rec.avg_bleu >= options.target_bleu) break;
    }

    result.summary.best_bleu = std::max(best, 0.0);
    result.summary.epochs_to_converge = epochs_to_converge(result.metrics);
    result.summary.seconds_per_epoch = median_of(epoch_times);
    return result;
}

} // namespace attnbench
