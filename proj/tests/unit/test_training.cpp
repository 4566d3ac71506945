#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "attnbench/checkpoint.hpp"
#include "attnbench/experiment.hpp"
#include "attnbench/training.hpp"
#include "testing.hpp"

using namespace attnbench;
using attnbench::testing::read_file;
using attnbench::testing::TempDir;
using attnbench::testing::values;
using attnbench::testing::write_file;

namespace {

struct TinyTask {
    Vocabulary vocab;
    std::vector<TokenSequence> train, test;
};

TinyTask tiny_task() {
    Rng rng(11);
    CopyDataset d = synth_copy(48, 12, 2, 5, 12, rng);
    TinyTask t;
    t.vocab = Vocabulary::build(d.train);
    t.train = encode_all(t.vocab, d.train);
    t.test = encode_all(t.vocab, d.test);
    return t;
}

ModelConfig tiny_config(Family family, std::size_t vocab) {
    ModelConfig c = ModelConfig::preset(family, Scale::Desk, vocab);
    c.embed_dim = 8;
    c.hidden_dim = family == Family::Transformer ? 8 : 12;
    if (family == Family::Transformer) {
        c.n_layers = 1;
        c.n_heads = 2;
        c.ffn_dim = 16;
    }
    if (family == Family::ConvS2S) c.n_layers = 2;
    c.max_decode_len = 10;
    return c;
}

TrainOptions tiny_options(std::size_t epochs) {
    TrainOptions o;
    o.epochs = epochs;
    o.batch_size = 8;
    o.seed = 5;
    o.adam.lr = 3e-3;
    return o;
}

void expect_same_metrics(const std::vector<MetricsRecord>& a, const std::vector<MetricsRecord>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        // epoch_seconds is wall-clock time and is the one column allowed to differ.
        EXPECT_EQ(a[i].epoch, b[i].epoch);
        EXPECT_EQ(std::memcmp(&a[i].train_loss, &b[i].train_loss, sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(&a[i].test_loss, &b[i].test_loss, sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(&a[i].avg_bleu, &b[i].avg_bleu, sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(&a[i].train_ppl, &b[i].train_ppl, sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(&a[i].test_ppl, &b[i].test_ppl, sizeof(double)), 0);
        EXPECT_EQ(a[i].instability, b[i].instability);
    }
}

} // namespace

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
    ParameterStore store;
    Rng rng(1);
    Tensor w = store.add_weight("w", {3, 2}, 3, rng);
    const auto before = values(w);
    OptimizerState st = OptimizerState::for_parameters(store);
    for (int i = 0; i < 3; ++i) {
        w.zero_grad();
        adam_step(store, st);
    }
    EXPECT_EQ(values(w), before);
    EXPECT_EQ(st.step, 3u);
}

TEST(Adam, FirstStepMovesByLrAgainstTheGradientSign) {
    ParameterStore store;
    Tensor x = store.add_constant("x", {4}, 0.5);
    auto g = x.mutable_grad();
    const double grads[] = {3.0, -0.002, 1e4, -7.0};
    std::copy(std::begin(grads), std::end(grads), g.begin());
    OptimizerState st = OptimizerState::for_parameters(store, {0.01, 0.9, 0.999, 0.0});
    adam_step(store, st);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.data()[i], 0.5 - 0.01 * std::copysign(1.0, grads[i]), 1e-15);
}

TEST(Adam, TenStepsOnSquareMatchScalarOracle) {
    ParameterStore store;
    Tensor x = store.add_constant("x", {1}, 1.0);
    OptimizerState st = OptimizerState::for_parameters(store);
    double ox = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 10; ++t) {
        x.clear_grad();
        x.mutable_grad()[0] = 2.0 * x.data()[0];
        adam_step(store, st);
        const double g = 2.0 * ox;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
        ox -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(x.data()[0], ox, 1e-12) << t;
    }
}

TEST(Adam, ZeroLearningRateIsBitIdenticalAndMissingGradIsAnError) {
    ParameterStore store;
    Rng rng(2);
    Tensor a = store.add_weight("a", {5}, 5, rng);
    Tensor b = store.add_weight("b", {2, 2}, 2, rng);
    const auto before_a = values(a), before_b = values(b);
    OptimizerState st = OptimizerState::for_parameters(store);
    for (double& g : a.mutable_grad()) g = rng.uniform(-1, 1);
    for (double& g : b.mutable_grad()) g = rng.uniform(-1, 1);
    adam_step(store, st, 0.0);
    EXPECT_EQ(values(a), before_a);
    EXPECT_EQ(values(b), before_b);
    b.clear_grad();
    EXPECT_THROW(adam_step(store, st), ContractError);
}

TEST(Noam, FormulaPeakAndMonotonicity) {
    EXPECT_NEAR(noam_lr(4000, 512, 4000), 6.988e-4, 5e-8);
    EXPECT_DOUBLE_EQ(noam_lr(400, 64, 400), std::pow(64.0, -0.5) * std::pow(400.0, -0.5));
    EXPECT_LT(noam_lr(399, 64, 400), noam_lr(400, 64, 400));
    EXPECT_LT(noam_lr(401, 64, 400), noam_lr(400, 64, 400));
    for (std::uint64_t s = 1; s < 400; ++s) EXPECT_LT(noam_lr(s, 64, 400), noam_lr(s + 1, 64, 400));
    for (std::uint64_t s = 400; s < 2000; ++s) EXPECT_GT(noam_lr(s, 64, 400), noam_lr(s + 1, 64, 400));
    EXPECT_THROW(noam_lr(0, 64, 400), ContractError);
}

TEST(Instability, RuleExamples) {
    const std::vector<double> falling = {5, 4, 3, 2.5, 2, 1.5, 1, 0.5};
    for (std::size_t n = 1; n <= falling.size(); ++n)
        EXPECT_FALSE(detect_instability(std::span(falling.data(), n)));
    const std::vector<double> spike = {1.0, 0.9, 0.8, 0.8, 0.8, 5.0};
    EXPECT_TRUE(detect_instability(spike));
    EXPECT_FALSE(detect_instability(std::span(spike.data(), 5)));
    const std::vector<double> edge = {1.0, 1.0, 3.0};
    EXPECT_FALSE(detect_instability(edge)); // 3.0 is not more than 3x
    const std::vector<double> nan_first = {std::nan("")};
    EXPECT_TRUE(detect_instability(nan_first));
    const std::vector<double> inf_late = {1, 1, 1, INFINITY};
    EXPECT_TRUE(detect_instability(inf_late));
    // Only the five epochs before the last one count.
    const std::vector<double> window = {0.1, 2, 2, 2, 2, 2, 5};
    EXPECT_FALSE(detect_instability(window));
}

TEST(GradientClip, Properties) {
    ParameterStore store;
    Tensor a = store.add_constant("a", {2}, 0.0), b = store.add_constant("b", {1}, 0.0);
    auto set = [&](double x, double y, double z) {
        a.mutable_grad()[0] = x;
        a.mutable_grad()[1] = y;
        b.mutable_grad()[0] = z;
    };
    set(0.3, 0.4, 0.0);
    EXPECT_DOUBLE_EQ(gradient_clip(store, 1.0), 0.5);
    EXPECT_EQ(a.grad()[0], 0.3);
    EXPECT_EQ(a.grad()[1], 0.4);
    set(3.0, 4.0, 12.0);
    EXPECT_DOUBLE_EQ(gradient_clip(store, 2.0), 13.0);
    const double norm = std::sqrt(a.grad()[0] * a.grad()[0] + a.grad()[1] * a.grad()[1] + b.grad()[0] * b.grad()[0]);
    EXPECT_NEAR(norm, 2.0, 1e-15);
    EXPECT_NEAR(a.grad()[0] / 3.0, b.grad()[0] / 12.0, 1e-15);
    EXPECT_GT(a.grad()[1] / 4.0, 0.0);
    EXPECT_THROW(gradient_clip(store, 0.0), ConfigError);
}

TEST(EpochsToConverge, FirstEpochWithinOnePercentOfBest) {
    std::vector<MetricsRecord> m(5);
    const double bleu[] = {0.2, 0.95, 0.991, 0.7, 1.0};
    for (std::size_t i = 0; i < 5; ++i) {
        m[i].epoch = i + 1;
        m[i].avg_bleu = bleu[i];
    }
    EXPECT_EQ(epochs_to_converge(m), 3u);
    EXPECT_EQ(epochs_to_converge({}), 0u);
}

TEST(MetricsCsv, RowFormatAndRoundTrip) {
    MetricsRecord r{3, 1.23456789, std::exp(1.23456789), 0.5, 0.25, std::exp(0.25), 0.987654321, true};
    EXPECT_EQ(format_metrics_row(r), "3,1.23457,3.43689,0.5,0.25,1.28403,0.987654,1");
    MetricsRecord bad = r;
    bad.train_loss = std::nan("");
    bad.train_ppl = INFINITY;
    EXPECT_EQ(format_metrics_row(bad).substr(0, 11), "3,nan,inf,0");
    TempDir dir("metrics");
    write_file(dir / "m.csv", std::string(kMetricsHeader) + "\n" + format_metrics_row(r) + "\n" +
                                  format_metrics_row(bad) + "\n");
    auto back = read_metrics_csv(dir / "m.csv");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].epoch, 3u);
    EXPECT_DOUBLE_EQ(back[0].avg_bleu, 0.987654);
    EXPECT_TRUE(std::isnan(back[1].train_loss));
    EXPECT_TRUE(back[1].instability);
    write_file(dir / "bad.csv", "epoch,loss\n1,2\n");
    EXPECT_THROW(read_metrics_csv(dir / "bad.csv"), FormatError);
}

TEST(Train, ZeroEpochBudgetWritesNoRowsAndNoCheckpoint) {
    TinyTask t = tiny_task();
    TempDir dir("train0");
    Rng rng(1);
    auto model = build_model(tiny_config(Family::GruBahdanau, t.vocab.size()), rng);
    TrainOptions o = tiny_options(0);
    o.out_dir = dir.path();
    TrainResult r = train(*model, t.train, t.test, t.vocab, o);
    EXPECT_TRUE(r.metrics.empty());
    EXPECT_FALSE(std::filesystem::exists(dir / "best.ckpt"));
    EXPECT_TRUE(read_metrics_csv(dir / "metrics.csv").empty());
}

class TrainEveryFamily : public ::testing::TestWithParam<Family> {};

TEST_P(TrainEveryFamily, DeterministicRowsBestAndCheckpointRoundTrip) {
    TinyTask t = tiny_task();
    const ModelConfig c = tiny_config(GetParam(), t.vocab.size());
    TempDir one("run_a"), two("run_b");
    auto run = [&](const TempDir& dir) {
        Rng rng = model_init_rng(3);
        auto model = build_model(c, rng);
        TrainOptions o = tiny_options(3);
        o.out_dir = dir.path();
        if (GetParam() == Family::Transformer) o.noam_warmup = 10;
        std::vector<MetricsRecord> seen;
        TrainResult r = train(*model, t.train, t.test, t.vocab, o, [&](const MetricsRecord& m) { seen.push_back(m); });
        EXPECT_EQ(seen.size(), r.metrics.size());
        return r;
    };
    TrainResult a = run(one), b = run(two);
    ASSERT_EQ(a.metrics.size(), 3u);
    expect_same_metrics(a.metrics, b.metrics);

    // Files agree too, apart from the timing column.
    auto strip_time = [](std::vector<MetricsRecord> rows) {
        for (auto& r : rows) r.epoch_seconds = 0.0;
        std::string s;
        for (const auto& r : rows) s += format_metrics_row(r) + "\n";
        return s;
    };
    EXPECT_EQ(strip_time(read_metrics_csv(one / "metrics.csv")), strip_time(read_metrics_csv(two / "metrics.csv")));
    EXPECT_EQ(read_metrics_csv(one / "metrics.csv").size(), 3u);

    double best = 0.0;
    for (const auto& m : a.metrics) {
        best = std::max(best, m.avg_bleu);
        EXPECT_NEAR(m.train_ppl, std::exp(m.train_loss), 1e-9 * m.train_ppl);
        EXPECT_NEAR(m.test_ppl, std::exp(m.test_loss), 1e-9 * m.test_ppl);
    }
    EXPECT_EQ(a.summary.best_bleu, best);
    EXPECT_EQ(a.summary.parameter_count, build_model(c, *std::make_unique<Rng>(0))->parameter_count());

    if (best > 0.0) {
        CheckpointInfo info;
        auto loaded = load_checkpoint(one / "best.ckpt", &info);
        EXPECT_EQ(info.config, c);
        const EvalReport report = evaluate(*loaded, t.test, t.vocab);
        EXPECT_NEAR(report.avg_bleu, std::stod(info.metadata.at("avg_bleu")), 1e-9);
        EXPECT_NEAR(report.test_loss, std::stod(info.metadata.at("test_loss")), 1e-9);
        EXPECT_EQ(std::stoul(info.metadata.at("epoch")), a.summary.best_epoch);
    }
}

INSTANTIATE_TEST_SUITE_P(Families, TrainEveryFamily, ::testing::ValuesIn(kAllFamilies),
                         [](const auto& info) { return family_name(info.param); });

TEST(Train, EarlyStopOptions) {
    TinyTask t = tiny_task();
    const ModelConfig c = tiny_config(Family::GruBahdanau, t.vocab.size());
    {
        Rng rng(4);
        auto model = build_model(c, rng);
        TrainOptions o = tiny_options(6);
        o.target_bleu = 0.0; // any score reaches it
        EXPECT_EQ(train(*model, t.train, t.test, t.vocab, o).metrics.size(), 1u);
    }
    {
        Rng rng(4);
        auto model = build_model(c, rng);
        TrainOptions o = tiny_options(8);
        o.adam.lr = 0.0; // nothing changes, so no epoch after the first is a new best
        o.patience = 2;
        EXPECT_EQ(train(*model, t.train, t.test, t.vocab, o).metrics.size(), 3u);
    }
}

TEST(Train, NonFiniteLossHaltsOrContinuesPerPolicy) {
    TinyTask t = tiny_task();
    const ModelConfig c = tiny_config(Family::LstmPlain, t.vocab.size());
    for (NonFinitePolicy policy : {NonFinitePolicy::Halt, NonFinitePolicy::Continue}) {
        Rng rng(6);
        auto model = build_model(c, rng);
        TrainOptions o = tiny_options(3);
        o.adam.lr = 1e300; // parameters overflow single precision after one step
        o.non_finite = policy;
        TrainResult r = train(*model, t.train, t.test, t.vocab, o);
        ASSERT_TRUE(r.summary.instability_epoch.has_value());
        EXPECT_EQ(*r.summary.instability_epoch, 1u);
        EXPECT_TRUE(r.metrics.front().instability);
        if (policy == NonFinitePolicy::Halt) {
            EXPECT_TRUE(r.summary.halted);
            EXPECT_EQ(r.metrics.size(), 1u);
            EXPECT_TRUE(std::isnan(r.metrics.front().train_loss));
        } else {
            EXPECT_FALSE(r.summary.halted);
            EXPECT_EQ(r.metrics.size(), 3u);
        }
    }
}

TEST(Train, RejectsVocabularyMismatch) {
    TinyTask t = tiny_task();
    Rng rng(7);
    auto model = build_model(tiny_config(Family::LstmPlain, t.vocab.size() + 1), rng);
    EXPECT_THROW(train(*model, t.train, t.test, t.vocab, tiny_options(1)), ConfigError);
}

TEST(PresetTrainOptions, BudgetsAndSchedules) {
    EXPECT_EQ(preset_train_options(Family::LstmPlain, Scale::Desk).epochs, 700u);
    EXPECT_EQ(preset_train_options(Family::ConvS2S, Scale::Desk).epochs, 50u);
    EXPECT_EQ(preset_train_options(Family::Transformer, Scale::Desk).noam_warmup, 400u);
    EXPECT_EQ(preset_train_options(Family::Transformer, Scale::Paper).noam_warmup, 4000u);
    EXPECT_EQ(preset_train_options(Family::GruBahdanau, Scale::Desk).noam_warmup, 0u);
    EXPECT_EQ(preset_train_options(Family::GruBahdanau, Scale::Desk).batch_size, 32u);
    EXPECT_EQ(preset_train_options(Family::GruBahdanau, Scale::Paper).batch_size, 128u);
    const AdamConfig adam = preset_train_options(Family::ConvS2S, Scale::Desk).adam;
    EXPECT_EQ(adam.lr, 1e-3);
    EXPECT_EQ(adam.beta1, 0.9);
    EXPECT_EQ(adam.beta2, 0.999);
    EXPECT_EQ(adam.eps, 1e-8);
}

class CheckpointTest : public ::testing::Test {
  protected:
    TempDir dir{"ckpt"};
    std::filesystem::path path = dir / "model.ckpt";
    std::unique_ptr<Seq2SeqModel> model;

    void SetUp() override {
        Rng rng(8);
        model = build_model(tiny_config(Family::ConvS2S, 12), rng);
        model->parameters().round_to_float();
        save_checkpoint(path, *model, {{"note", "x"}});
    }

    void corrupt(std::size_t offset_from_end) {
        std::string bytes = read_file(path);
        bytes[bytes.size() - offset_from_end] ^= 0x10;
        write_file(path, bytes);
    }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
    CheckpointInfo info;
    auto loaded = load_checkpoint(path, &info);
    EXPECT_EQ(info.config, model->config());
    EXPECT_EQ(info.metadata.at("note"), "x");
    ASSERT_EQ(loaded->parameters().size(), model->parameters().size());
    for (std::size_t i = 0; i < model->parameters().size(); ++i) {
        EXPECT_EQ(loaded->parameters().entries()[i].name, model->parameters().entries()[i].name);
        EXPECT_EQ(values(loaded->parameters().entries()[i].tensor), values(model->parameters().entries()[i].tensor));
    }
    Rng other(99);
    auto fresh = build_model(model->config(), other);
    load_parameters(path, *fresh);
    EXPECT_EQ(values(fresh->parameters().entries()[0].tensor), values(model->parameters().entries()[0].tensor));
    auto mismatched = build_model(tiny_config(Family::ConvS2S, 13), other);
    EXPECT_THROW(load_parameters(path, *mismatched), FormatError);
    EXPECT_EQ(read_checkpoint_info(path).config, model->config());
}

TEST_F(CheckpointTest, FlippedDataByteFailsChecksum) {
    corrupt(5);
    EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST_F(CheckpointTest, TruncationBadMagicAndVersionAreFormatErrors) {
    const std::string bytes = read_file(path);
    write_file(path, bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(load_checkpoint(path), FormatError);
    write_file(path, bytes.substr(0, 10));
    EXPECT_THROW(load_checkpoint(path), FormatError);
    std::string magic = bytes;
    magic[0] = 'X';
    write_file(path, magic);
    EXPECT_THROW(load_checkpoint(path), FormatError);
    std::string version = bytes;
    version[8] = static_cast<char>(kCheckpointVersion + 1);
    write_file(path, version);
    EXPECT_THROW(load_checkpoint(path), FormatError);
    std::string manifest = bytes;
    manifest[24] = '#';
    write_file(path, manifest);
    EXPECT_THROW(load_checkpoint(path), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), FormatError);
}

TEST(SummaryFiles, TableShapedColumnsAndFailedRows) {
    TempDir dir("summary");
    RunSummary s;
    s.best_bleu = 0.987654321;
    s.seconds_per_epoch = 2.5;
    s.epochs_to_converge = 6;
    s.parameter_count = 12345;
    RunSummary unstable = s;
    unstable.instability_epoch = 17;
    std::vector<CompareRow> rows = {{"transformer", "ok", s, ""},
                                    {"conv_s2s", "unstable", unstable, ""},
                                    {"gru_bahdanau", "failed", std::nullopt, "boom"}};
    write_summary_csv(dir / "summary.csv", rows);
    EXPECT_EQ(read_file(dir / "summary.csv"), "model,bleu,sec_per_epoch,epochs_to_converge,n_params\n"
                                              "transformer,0.987654,2.5,6,12345\n"
                                              "conv_s2s,0.987654,2.5,6,12345\n"
                                              "gru_bahdanau,failed,,,\n");
    write_instability_csv(dir / "instability.csv", rows);
    EXPECT_EQ(read_file(dir / "instability.csv"),
              "model,status,instability_epoch\ntransformer,ok,\nconv_s2s,unstable,17\ngru_bahdanau,failed,\n");
}

TEST(Comparison, FailingFamilyIsIsolated) {
    TinyTask t = tiny_task();
    EncodedDataset data{t.vocab, t.train, t.test};
    TempDir dir("compare");
    std::vector<RunSpec> specs;
    for (Family f : {Family::LstmPlain, Family::Transformer}) {
        RunSpec spec{tiny_config(f, t.vocab.size()), tiny_options(1)};
        spec.train.out_dir = dir / family_name(f);
        specs.push_back(spec);
    }
    specs[1].model.n_heads = 3; // 8 is not divisible by 3
    auto rows = run_comparison(specs, data, 2);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].model, "lstm_plain");
    EXPECT_TRUE(rows[0].summary.has_value());
    EXPECT_EQ(rows[1].status, "failed");
    EXPECT_FALSE(rows[1].summary.has_value());
    EXPECT_NE(rows[1].error.find("divisible"), std::string::npos) << rows[1].error;
    EXPECT_EQ(read_metrics_csv(dir / "lstm_plain" / "metrics.csv").size(), 1u);
}
