#include "attnbench/experiment.hpp"

#include <cstdio>
#include <exception>
#include <fstream>
#include <future>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench {

Rng model_init_rng(std::uint64_t seed) {
    Rng master(seed);
    master.fork();
    master.fork();
    return master.fork();
}

EncodedDataset load_encoded(const std::filesystem::path& dir) {
    LoadedDataset loaded = load_dataset(dir);
    EncodedDataset out;
    out.train = encode_all(loaded.vocab, loaded.data.train);
    out.test = encode_all(loaded.vocab, loaded.data.test);
    out.vocab = std::move(loaded.vocab);
    return out;
}

void write_run_snapshot(const std::filesystem::path& path, const RunSpec& spec,
                        const std::map<std::string, std::string>& extra) {
    std::map<std::string, std::string> fields = spec.model.to_fields();
    auto put = [&](const std::string& k, const auto& v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        fields[k] = os.str();
    };
    const TrainOptions& t = spec.train;
    put("epochs", t.epochs);
    put("batch_size", t.batch_size);
    put("seed", t.seed);
    put("lr", t.adam.lr);
    put("beta1", t.adam.beta1);
    put("beta2", t.adam.beta2);
    put("adam_eps", t.adam.eps);
    put("warmup", t.noam_warmup);
    put("patience", t.patience);
    put("target_bleu", t.target_bleu);
    put("clip", t.clip_norm);
    fields["on_nonfinite"] = t.non_finite == NonFinitePolicy::Halt ? "halt" : "continue";
    for (const auto& [k, v] : extra) fields[k] = v;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& [k, v] : fields) out << k << '=' << v << '\n';
}

TrainResult run_single(const RunSpec& spec, const EncodedDataset& data, const EpochCallback& on_epoch) {
    Rng init = model_init_rng(spec.train.seed);
    auto model = build_model(spec.model, init);
    return train(*model, data.train, data.test, data.vocab, spec.train, on_epoch);
}

std::vector<CompareRow> run_comparison(const std::vector<RunSpec>& specs, const EncodedDataset& data, std::size_t jobs,
                                       const RunLogger& log) {
    auto run_one = [&](const RunSpec& spec) {
        CompareRow row;
        row.model = family_name(spec.model.family);
        try {
            const TrainResult r = run_single(spec, data, [&](const MetricsRecord& m) {
                if (log) log(row.model, m);
            });
            row.summary = r.summary;
            row.status = r.summary.halted ? "halted" : r.summary.instability_epoch ? "unstable" : "ok";
        } catch (const std::exception& e) {
            row.status = "failed";
            row.error = e.what();
        }
        return row;
    };

    std::vector<CompareRow> rows(specs.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < specs.size(); ++i) rows[i] = run_one(specs[i]);
        return rows;
    }
    // Runs share only read-only data; the autograd tape is per thread.
    for (std::size_t start = 0; start < specs.size(); start += jobs) {
        std::vector<std::future<CompareRow>> wave;
        for (std::size_t i = start; i < std::min(specs.size(), start + jobs); ++i) {
            wave.push_back(std::async(std::launch::async, run_one, std::cref(specs[i])));
        }
        for (std::size_t i = 0; i < wave.size(); ++i) rows[start + i] = wave[i].get();
    }
    return rows;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << kSummaryHeader << '\n';
    for (const auto& row : rows) {
        if (!row.summary) {
            out << row.model << ",failed,,,\n";
            continue;
        }
        const RunSummary& s = *row.summary;
        char buf[128];
        std::snprintf(buf, sizeof buf, ",%.6g,%.6g,%zu,%zu\n", s.best_bleu, s.seconds_per_epoch, s.epochs_to_converge,
                      s.parameter_count);
        out << row.model << buf;
    }
}

void write_instability_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "model,status,instability_epoch\n";
    for (const auto& row : rows) {
        out << row.model << ',' << row.status << ',';
        if (row.summary && row.summary->instability_epoch) out << *row.summary->instability_epoch;
        out << '\n';
    }
}

} // namespace attnbench
