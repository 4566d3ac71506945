// Drives the attnbench binary the way a user would.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "testing.hpp"

namespace fs = std::filesystem;
using attnbench::testing::read_file;
using attnbench::testing::TempDir;
using attnbench::testing::write_file;

namespace {

struct CliRun {
    int code;
    std::string output;
};

CliRun run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" ATTNBENCH_CLI "' " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {-1, ""};
    std::string out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(read_file(path));
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

// Metrics text with the wall-clock column blanked.
std::string without_seconds(const fs::path& metrics) {
    std::string out;
    for (auto row : read_csv(metrics)) {
        row.at(3).clear();
        for (const auto& c : row) out += c + ',';
        out += '\n';
    }
    return out;
}

std::string config_value(const fs::path& snapshot, const std::string& key) {
    std::istringstream in(read_file(snapshot));
    for (std::string line; std::getline(in, line);) {
        if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
    }
    return "";
}

class Cli : public ::testing::Test {
  protected:
    TempDir dir{"cli"};
    fs::path data = dir / "data";

    void SetUp() override {
        CliRun r = run("gen-data --synthetic --n 60 --test 12 --vocab 12 --len 2:4 --seed 3 --out '" + data.string() + "'");
        ASSERT_EQ(r.code, 0) << r.output;
    }

    CliRun train(const std::string& model, const fs::path& out, const std::string& extra = "--epochs 2") {
        return run("train --model " + model + " --data '" + data.string() + "' --seed 5 --out '" + out.string() + "' " +
                   extra);
    }
};

} // namespace

TEST(CliHelp, EveryCommandExitsZero) {
    EXPECT_EQ(run("--help").code, 0);
    for (const char* cmd : {"gen-data", "train", "eval", "compare", "plot"}) {
        CliRun r = run(std::string(cmd) + " --help");
        EXPECT_EQ(r.code, 0) << cmd;
        EXPECT_NE(r.output.find("Usage"), std::string::npos) << cmd;
    }
    EXPECT_NE(run("").code, 0);
    EXPECT_NE(run("bogus").code, 0);
}

TEST_F(Cli, GenDataIsDeterministic) {
    const fs::path again = dir / "again";
    ASSERT_EQ(run("gen-data --synthetic --n 60 --test 12 --vocab 12 --len 2:4 --seed 3 --out '" + again.string() + "'")
                  .code,
              0);
    for (const char* f : {"train.txt", "test.txt", "vocab.txt"}) EXPECT_EQ(read_file(data / f), read_file(again / f)) << f;
    const fs::path other = dir / "other";
    ASSERT_EQ(run("gen-data --synthetic --n 60 --test 12 --vocab 12 --len 2:4 --seed 4 --out '" + other.string() + "'")
                  .code,
              0);
    EXPECT_NE(read_file(data / "train.txt"), read_file(other / "train.txt"));
}

TEST_F(Cli, GenDataFromCorpus) {
    std::string text;
    for (int i = 0; i < 30; ++i) text += "w" + std::to_string(i) + " common\n";
    write_file(dir / "corpus.txt", text);
    const fs::path out = dir / "from_corpus";
    CliRun r = run("gen-data --corpus '" + (dir / "corpus.txt").string() + "' --train 20 --test 5 --seed 1 --out '" +
                out.string() + "'");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read_csv(out / "train.txt").size(), 20u);
    EXPECT_EQ(read_csv(out / "test.txt").size(), 5u);
}

TEST_F(Cli, MissingCorpusNamesThePath) {
    const std::string missing = (dir / "no_such_corpus.txt").string();
    CliRun r = run("gen-data --corpus '" + missing + "' --seed 1 --out '" + (dir / "x").string() + "'");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
    EXPECT_NE(run("gen-data --out '" + (dir / "x").string() + "'").code, 0); // seed is mandatory
    EXPECT_NE(run("gen-data --seed 1 --out '" + (dir / "x").string() + "'").code, 0);
}

TEST_F(Cli, TrainWritesRunDirectoryAndRerunsIdentically) {
    const fs::path a = dir / "a", b = dir / "b";
    CliRun ra = train("transformer", a);
    ASSERT_EQ(ra.code, 0) << ra.output;
    ASSERT_EQ(train("transformer", b).code, 0);
    for (const char* f : {"metrics.csv", "best.ckpt", "config.txt", "summary.csv"}) EXPECT_TRUE(fs::exists(a / f)) << f;
    const auto rows = read_csv(a / "metrics.csv");
    EXPECT_EQ(rows.front()[0], "epoch");
    EXPECT_GE(rows.size(), 2u);
    EXPECT_LE(rows.size(), 3u); // header + at most 2 epochs
    EXPECT_EQ(without_seconds(a / "metrics.csv"), without_seconds(b / "metrics.csv"));
    EXPECT_EQ(read_file(a / "best.ckpt"), read_file(b / "best.ckpt"));
    EXPECT_EQ(read_csv(a / "summary.csv").front(),
              (std::vector<std::string>{"model", "bleu", "sec_per_epoch", "epochs_to_converge", "n_params"}));
}

TEST_F(Cli, EvalReproducesLoggedBleu) {
    const fs::path out = dir / "gru";
    ASSERT_EQ(train("gru_bahdanau", out).code, 0);
    // metrics.csv keeps 6 significant digits; the checkpoint keeps the exact value.
    double logged = -1;
    for (const auto& row : read_csv(out / "metrics.csv")) {
        if (row[0] != "epoch") logged = std::max(logged, std::stod(row[6]));
    }
    const fs::path csv = dir / "eval.csv";
    CliRun r = run("eval --checkpoint '" + (out / "best.ckpt").string() + "' --data '" + data.string() + "' --csv '" +
                csv.string() + "'");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = read_csv(csv);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"model", "avg_bleu", "test_loss", "perplexity", "n_examples"}));
    EXPECT_EQ(rows[1][0], "gru_bahdanau");
    const double evaluated = std::stod(rows[1][1]);
    EXPECT_NEAR(evaluated, logged, 1e-5);
    const auto at = r.output.find("logged_avg_bleu ");
    ASSERT_NE(at, std::string::npos) << r.output;
    EXPECT_NEAR(evaluated, std::stod(r.output.substr(at + 16)), 1e-9);
    EXPECT_EQ(rows[1][4], "12");
}

TEST_F(Cli, CorruptedCheckpointFails) {
    const fs::path out = dir / "conv";
    ASSERT_EQ(train("conv_s2s", out, "--epochs 1").code, 0);
    std::string bytes = read_file(out / "best.ckpt");
    bytes[bytes.size() / 2] ^= 0x5a;
    write_file(dir / "bad.ckpt", bytes);
    CliRun r = run("eval --checkpoint '" + (dir / "bad.ckpt").string() + "' --data '" + data.string() + "'");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("error"), std::string::npos) << r.output;
    EXPECT_NE(run("eval --checkpoint '" + (dir / "none.ckpt").string() + "' --data '" + data.string() + "'").code, 0);
}

TEST_F(Cli, ConfigFilePrecedenceAndUnknownKeys) {
    write_file(dir / "run.cfg", "epochs=1\nhidden-dim=24\nembed-dim=24\n");
    const fs::path out = dir / "cfg";
    CliRun r = train("lstm_plain", out, "--config '" + (dir / "run.cfg").string() + "' --epochs 2 --hidden-dim 20");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(config_value(out / "config.txt", "epochs"), "2");       // flag wins over file
    EXPECT_EQ(config_value(out / "config.txt", "hidden_dim"), "20");  // flag wins
    EXPECT_EQ(config_value(out / "config.txt", "embed_dim"), "24");   // file wins over preset
    EXPECT_EQ(config_value(out / "config.txt", "batch_size"), "32");  // preset
    write_file(dir / "bad.cfg", "epochs=1\nnot-an-option=3\n");
    CliRun bad = train("lstm_plain", dir / "bad", "--config '" + (dir / "bad.cfg").string() + "'");
    EXPECT_NE(bad.code, 0);
    EXPECT_NE(bad.output.find("not-an-option"), std::string::npos) << bad.output;
    EXPECT_NE(train("lstm_plain", dir / "nc", "--config '" + (dir / "absent.cfg").string() + "'").code, 0);
    EXPECT_NE(train("no_such_family", dir / "nf").code, 0);
    EXPECT_NE(train("transformer", dir / "h", "--heads 5").code, 0); // config error before epoch 1
    EXPECT_FALSE(fs::exists(dir / "h" / "metrics.csv"));
}

TEST_F(Cli, CompareIsolatesFailingFamilyAndPlots) {
    const fs::path out = dir / "cmp";
    // 5 heads do not divide the desk width, so only the transformer fails.
    CliRun r = run("compare --data '" + data.string() + "' --seed 2 --epochs 1 --heads 5 --out '" + out.string() + "'");
    EXPECT_EQ(r.code, 0) << r.output;
    const auto rows = read_csv(out / "summary.csv");
    ASSERT_EQ(rows.size(), 5u);
    std::map<std::string, std::string> status;
    for (const auto& row : read_csv(out / "instability.csv")) status[row.at(0)] = row.at(1);
    EXPECT_EQ(status["transformer"], "failed");
    EXPECT_EQ(status["lstm_plain"], "ok");
    EXPECT_EQ(status["gru_bahdanau"], "ok");
    EXPECT_EQ(status["conv_s2s"], "ok");
    for (const char* svg : {"train_loss.svg", "avg_bleu.svg", "epoch_sec.svg"}) {
        ASSERT_TRUE(fs::exists(out / svg)) << svg;
        EXPECT_EQ(read_file(out / svg).rfind("<svg", 0) == 0 || read_file(out / svg).rfind("<?xml", 0) == 0, true);
    }
    // Plots are a pure function of the logged metrics.
    const fs::path replot = dir / "replot";
    CliRun p = run("plot '" + (out / "lstm_plain").string() + "' '" + (out / "conv_s2s").string() + "' '" +
                (out / "gru_bahdanau").string() + "' --out '" + replot.string() + "'");
    ASSERT_EQ(p.code, 0) << p.output;
    EXPECT_EQ(read_file(replot / "train_loss.svg"), read_file(out / "train_loss.svg"));
    EXPECT_NE(run("plot '" + (dir / "nothing").string() + "' --out '" + replot.string() + "'").code, 0);
}

TEST_F(Cli, OutputRootFromEnvironment) {
    const fs::path root = dir / "root";
    CliRun r = run("train --model lstm_plain --data '" + data.string() + "' --seed 1 --epochs 1",
                "ATTNBENCH_OUT='" + root.string() + "'");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(root / "lstm_plain" / "metrics.csv"));
}
