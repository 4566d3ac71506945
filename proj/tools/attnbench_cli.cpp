// attnbench: dataset generation, training, evaluation and the four-family
// comparison with its summary table and plots.
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnbench/checkpoint.hpp"
#include "attnbench/data.hpp"
#include "attnbench/errors.hpp"
#include "attnbench/evaluation.hpp"
#include "attnbench/experiment.hpp"
#include "attnbench/models.hpp"
#include "attnbench/plot.hpp"
#include "attnbench/training.hpp"

namespace fs = std::filesystem;
using namespace attnbench;

namespace {

fs::path output_root() {
    const char* env = std::getenv("ATTNBENCH_OUT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

void add_config_option(CLI::App* cmd) {
    // Consumed by with_config_file before parsing; registered for --help.
    cmd->add_option("--config")->description("key=value file mirroring flag names (flags override it)");
}

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
    for (const auto& a : args) {
        if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
}

// CLI11 only reads config files on the top-level app, so a subcommand's
// --config FILE is expanded here into the flags it names. Flags already on
// the command line win; unknown keys fail like unknown flags.
std::vector<std::string> with_config_file(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string file;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            file = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            file = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (file.empty()) return args;
    for (const auto& item : CLI::ConfigBase().from_file(file)) {
        if (item.name.empty() || item.name == "++" || item.name == "--") continue;
        std::string name = item.fullname();
        std::replace(name.begin(), name.end(), '_', '-');
        const std::string flag = "--" + name;
        if (has_flag(rest, flag)) continue;
        if (item.inputs.size() == 1 && (item.inputs[0] == "true" || item.inputs[0] == "false")) {
            if (item.inputs[0] == "true") rest.push_back(flag);
            continue;
        }
        rest.push_back(flag);
        rest.insert(rest.end(), item.inputs.begin(), item.inputs.end());
    }
    return rest;
}

// Optional overrides shared by train and compare. Unset means "keep preset".
struct Overrides {
    std::optional<std::size_t> epochs, batch_size, warmup, patience, embed_dim, hidden_dim, layers, heads, ffn_dim,
        kernel, max_decode_len, eval_batch_size;
    std::optional<double> lr, clip, dropout, target_bleu;
    std::string on_nonfinite = "halt";

    void add_to(CLI::App* cmd) {
        cmd->add_option("--epochs", epochs, "epoch budget");
        cmd->add_option("--batch-size", batch_size, "training batch size");
        cmd->add_option("--eval-batch-size", eval_batch_size, "evaluation batch size");
        cmd->add_option("--lr", lr, "Adam learning rate (families without a schedule)");
        cmd->add_option("--warmup", warmup, "Noam warmup steps (0 = constant lr)");
        cmd->add_option("--patience", patience, "stop after this many epochs without a new best BLEU (0 = off)");
        cmd->add_option("--target-bleu", target_bleu, "stop once avg BLEU reaches this value");
        cmd->add_option("--clip", clip, "global gradient-norm clip (0 = off)");
        cmd->add_option("--on-nonfinite", on_nonfinite, "halt or continue when the loss is not finite")
            ->check(CLI::IsMember({"halt", "continue"}));
        cmd->add_option("--dropout", dropout, "dropout probability");
        cmd->add_option("--max-decode-len", max_decode_len, "greedy decode limit");
        cmd->add_option("--embed-dim", embed_dim, "embedding width");
        cmd->add_option("--hidden-dim", hidden_dim, "hidden / model width");
        cmd->add_option("--layers", layers, "layer count (conv, transformer)");
        cmd->add_option("--heads", heads, "attention heads (transformer)");
        cmd->add_option("--ffn-dim", ffn_dim, "feed-forward width (transformer)");
        cmd->add_option("--kernel", kernel, "convolution width (conv)");
    }

    RunSpec apply(Family family, Scale scale, std::size_t vocab_size, std::uint64_t seed) const {
        RunSpec spec{ModelConfig::preset(family, scale, vocab_size), preset_train_options(family, scale)};
        ModelConfig& m = spec.model;
        if (embed_dim) m.embed_dim = *embed_dim;
        if (hidden_dim) m.hidden_dim = *hidden_dim;
        if (layers) m.n_layers = *layers;
        if (heads) m.n_heads = *heads;
        if (ffn_dim) m.ffn_dim = *ffn_dim;
        if (kernel) m.kernel_size = *kernel;
        if (dropout) m.dropout_p = *dropout;
        if (max_decode_len) m.max_decode_len = *max_decode_len;
        m.validate();
        TrainOptions& t = spec.train;
        t.seed = seed;
        if (epochs) t.epochs = *epochs;
        if (batch_size) t.batch_size = *batch_size;
        if (eval_batch_size) t.eval.batch_size = *eval_batch_size;
        if (lr) t.adam.lr = *lr;
        if (warmup) t.noam_warmup = *warmup;
        if (patience) t.patience = *patience;
        if (target_bleu) t.target_bleu = *target_bleu;
        if (clip) t.clip_norm = *clip;
        t.non_finite = on_nonfinite == "halt" ? NonFinitePolicy::Halt : NonFinitePolicy::Continue;
        if (t.batch_size == 0 || t.eval.batch_size == 0) throw ConfigError("batch sizes must be at least 1");
        return spec;
    }
};

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
    const auto colon = text.find(':');
    try {
        if (colon == std::string::npos) {
            const std::size_t n = std::stoul(text);
            return {n, n};
        }
        return {std::stoul(text.substr(0, colon)), std::stoul(text.substr(colon + 1))};
    } catch (const std::logic_error&) {
        throw ConfigError("length range must look like MIN:MAX, got '" + text + "'");
    }
}

std::string g6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void print_epoch(const std::string& model, const MetricsRecord& m) {
    std::cout << model << " epoch " << m.epoch << "  train_loss " << g6(m.train_loss) << "  test_loss "
              << g6(m.test_loss) << "  bleu " << g6(m.avg_bleu) << "  " << g6(m.epoch_seconds) << "s"
              << (m.instability ? "  [unstable]" : "") << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Attention encoder-decoder benchmark on the copy task"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a dataset cache (train.txt, test.txt, vocab.txt)");
    add_config_option(gen);
    bool synthetic = false;
    std::string corpus;
    std::size_t gen_n = 2000, gen_train = 10000, gen_vocab = 50, gen_max_words = 30;
    std::optional<std::size_t> gen_test;
    std::string gen_len = "3:10";
    std::uint64_t gen_seed = 0;
    std::optional<std::string> gen_out;
    auto* syn_flag = gen->add_flag("--synthetic", synthetic, "random token sequences");
    auto* corpus_opt = gen->add_option("--corpus", corpus, "one-sentence-per-line text file");
    syn_flag->excludes(corpus_opt);
    gen->add_option("--n", gen_n, "synthetic training sequences")->capture_default_str();
    gen->add_option("--train", gen_train, "corpus training sentences")->capture_default_str();
    gen->add_option("--test", gen_test, "test examples (default 200 synthetic, 1000 corpus)");
    gen->add_option("--vocab", gen_vocab, "synthetic vocabulary size including 4 reserved ids")->capture_default_str();
    gen->add_option("--len", gen_len, "synthetic length range MIN:MAX")->capture_default_str();
    gen->add_option("--max-words", gen_max_words, "corpus sentence length limit")->capture_default_str();
    gen->add_option("--seed", gen_seed, "random seed")->required();
    gen->add_option("--out", gen_out, "output directory (default $ATTNBENCH_OUT/data)");

    // train
    auto* tr = app.add_subcommand("train", "train one model family");
    add_config_option(tr);
    std::string tr_model, tr_scale = "desk", tr_data;
    std::uint64_t tr_seed = 0;
    std::optional<std::string> tr_out;
    Overrides tr_over;
    tr->add_option("--model", tr_model, "lstm_plain, gru_bahdanau, conv_s2s or transformer")->required();
    tr->add_option("--scale", tr_scale, "preset: desk or paper")->capture_default_str();
    tr->add_option("--data", tr_data, "dataset directory from gen-data")->required();
    tr->add_option("--seed", tr_seed, "random seed")->required();
    tr->add_option("--out", tr_out, "run directory (default $ATTNBENCH_OUT/<model>)");
    tr_over.add_to(tr);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's test split");
    add_config_option(ev);
    std::string ev_ckpt, ev_data;
    std::optional<std::string> ev_csv;
    std::size_t ev_batch = 64;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--csv", ev_csv, "also write the report as CSV here");
    ev->add_option("--batch-size", ev_batch, "evaluation batch size")->capture_default_str();

    // compare
    auto* cmp = app.add_subcommand("compare", "train all four families and write summary.csv and plots");
    add_config_option(cmp);
    std::string cmp_scale = "desk", cmp_data;
    std::uint64_t cmp_seed = 0;
    std::optional<std::string> cmp_out;
    std::optional<std::size_t> cmp_lstm_epochs;
    std::size_t cmp_jobs = 1;
    std::vector<std::string> cmp_models;
    Overrides cmp_over;
    cmp->add_option("--scale", cmp_scale, "preset: desk or paper")->capture_default_str();
    cmp->add_option("--data", cmp_data, "dataset directory")->required();
    cmp->add_option("--seed", cmp_seed, "random seed shared by all runs")->required();
    cmp->add_option("--out", cmp_out, "output directory (default $ATTNBENCH_OUT/compare)");
    cmp->add_option("--lstm-epochs", cmp_lstm_epochs, "separate epoch budget for lstm_plain");
    cmp->add_option("--jobs", cmp_jobs, "concurrent runs")->capture_default_str();
    cmp->add_option("--models", cmp_models, "subset of families (default all)");
    cmp_over.add_to(cmp);

    // plot
    auto* pl = app.add_subcommand("plot", "SVG charts from metrics CSV files");
    add_config_option(pl);
    std::vector<std::string> pl_inputs;
    std::string pl_out;
    pl->add_option("metrics", pl_inputs, "metrics.csv files or run directories")->required();
    pl->add_option("--out", pl_out, "directory for the SVG files")->required();

    try {
        std::vector<std::string> args = with_config_file(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) {
            Rng rng(gen_seed);
            CopyDataset data;
            if (!corpus.empty()) {
                data = sample_corpus(corpus, gen_train, gen_test.value_or(1000), gen_max_words, rng);
            } else if (synthetic) {
                const auto [lo, hi] = parse_range(gen_len);
                data = synth_copy(gen_n, gen_test.value_or(200), lo, hi, gen_vocab, rng);
            } else {
                throw ConfigError("gen-data needs --synthetic or --corpus FILE");
            }
            const Vocabulary vocab = Vocabulary::build(data.train);
            const fs::path out = gen_out ? fs::path(*gen_out) : output_root() / "data";
            save_dataset(out, data, vocab);
            std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test, vocabulary "
                      << vocab.size() << " -> " << out.string() << '\n';
        } else if (*tr) {
            const Family family = parse_family(tr_model);
            const EncodedDataset data = load_encoded(tr_data);
            RunSpec spec = tr_over.apply(family, parse_scale(tr_scale), data.vocab.size(), tr_seed);
            const fs::path out = tr_out ? fs::path(*tr_out) : output_root() / tr_model;
            spec.train.out_dir = out;
            fs::create_directories(out);
            write_run_snapshot(out / "config.txt", spec, {{"data", tr_data}, {"scale", tr_scale}});
            const TrainResult r =
                run_single(spec, data, [&](const MetricsRecord& m) { print_epoch(tr_model, m); });
            write_summary_csv(out / "summary.csv", {{tr_model, r.summary.halted ? "halted" : "ok", r.summary, ""}});
            std::cout << tr_model << ": best bleu " << g6(r.summary.best_bleu) << " at epoch " << r.summary.best_epoch
                      << ", " << r.summary.parameter_count << " parameters\n";
            if (r.summary.halted) {
                std::cerr << "training halted on a non-finite loss at epoch " << *r.summary.instability_epoch << '\n';
            }
        } else if (*ev) {
            CheckpointInfo info;
            auto model = load_checkpoint(ev_ckpt, &info);
            const EncodedDataset data = load_encoded(ev_data);
            EvalOptions opts;
            opts.batch_size = ev_batch;
            const EvalReport rep = evaluate(*model, data.test, data.vocab, opts);
            char line[160];
            std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g,%zu", family_name(info.config.family).c_str(),
                          rep.avg_bleu, rep.test_loss, rep.perplexity, rep.n_examples);
            std::cout << "model " << family_name(info.config.family) << "\navg_bleu " << g6(rep.avg_bleu)
                      << "\ntest_loss " << g6(rep.test_loss) << "\nperplexity " << g6(rep.perplexity)
                      << "\nexamples " << rep.n_examples << '\n';
            if (auto it = info.metadata.find("avg_bleu"); it != info.metadata.end()) {
                std::cout << "logged_avg_bleu " << it->second << '\n';
            }
            if (ev_csv) {
                std::ofstream csv(*ev_csv);
                if (!csv) throw DataError("cannot write " + *ev_csv);
                csv << "model,avg_bleu,test_loss,perplexity,n_examples\n" << line << '\n';
            }
        } else if (*cmp) {
            const Scale scale = parse_scale(cmp_scale);
            const EncodedDataset data = load_encoded(cmp_data);
            const fs::path out = cmp_out ? fs::path(*cmp_out) : output_root() / "compare";
            fs::create_directories(out);
            std::vector<Family> families;
            if (cmp_models.empty()) {
                families.assign(kAllFamilies.begin(), kAllFamilies.end());
            } else {
                for (const auto& name : cmp_models) families.push_back(parse_family(name));
            }
            std::vector<RunSpec> specs;
            std::vector<CompareRow> rows(families.size());
            std::vector<std::size_t> slot;
            for (std::size_t i = 0; i < families.size(); ++i) {
                const std::string name = family_name(families[i]);
                try {
                    RunSpec spec = cmp_over.apply(families[i], scale, data.vocab.size(), cmp_seed);
                    if (families[i] == Family::LstmPlain && cmp_lstm_epochs) spec.train.epochs = *cmp_lstm_epochs;
                    spec.train.out_dir = out / name;
                    fs::create_directories(out / name);
                    write_run_snapshot(out / name / "config.txt", spec, {{"data", cmp_data}, {"scale", cmp_scale}});
                    specs.push_back(spec);
                    slot.push_back(i);
                } catch (const ConfigError& e) {
                    rows[i] = {name, "failed", std::nullopt, e.what()};
                }
            }
            const auto done = run_comparison(specs, data, cmp_jobs, print_epoch);
            for (std::size_t k = 0; k < done.size(); ++k) rows[slot[k]] = done[k];
            write_summary_csv(out / "summary.csv", rows);
            write_instability_csv(out / "instability.csv", rows);
            std::map<std::string, std::vector<MetricsRecord>> runs;
            for (const auto& row : rows) {
                if (row.status == "failed") {
                    std::cerr << row.model << " failed: " << row.error << '\n';
                    continue;
                }
                runs[row.model] = read_metrics_csv(out / row.model / "metrics.csv");
            }
            plot_runs(runs, out);
            std::cout << "summary -> " << (out / "summary.csv").string() << '\n';
        } else if (*pl) {
            std::map<std::string, std::vector<MetricsRecord>> runs;
            for (const auto& input : pl_inputs) {
                fs::path p(input);
                if (fs::is_directory(p)) p /= "metrics.csv";
                const std::string name = p.parent_path().filename().string();
                runs[name.empty() ? p.stem().string() : name] = read_metrics_csv(p);
            }
            for (const auto& f : plot_runs(runs, pl_out)) std::cout << f.string() << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
