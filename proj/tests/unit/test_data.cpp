#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "attnbench/data.hpp"
#include "attnbench/errors.hpp"
#include "testing.hpp"

using namespace attnbench;
using attnbench::testing::read_file;
using attnbench::testing::TempDir;
using attnbench::testing::write_file;

TEST(Vocabulary, ReservedLayoutAndFrequencyOrder) {
    Vocabulary empty;
    EXPECT_EQ(empty.size(), 4u);
    EXPECT_EQ(empty.id("<pad>"), kPad);
    EXPECT_EQ(empty.id("<sos>"), kSos);
    EXPECT_EQ(empty.id("<eos>"), kEos);
    EXPECT_EQ(empty.id("<unk>"), kUnk);
    Vocabulary v = Vocabulary::build({{"b", "a", "c"}, {"c", "b", "c"}});
    EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<pad>", "<sos>", "<eos>", "<unk>", "c", "b", "a"}));
    EXPECT_THROW(Vocabulary({"x", "<sos>", "<eos>", "<unk>"}), VocabularyError);
    EXPECT_THROW(Vocabulary({"<pad>", "<sos>", "<eos>", "<unk>", "a", "a"}), VocabularyError);
    EXPECT_THROW(v.token(7), VocabularyError);
}

TEST(Vocabulary, EncodeDecode) {
    Vocabulary v = Vocabulary::build({{"the", "cat", "sat"}});
    const Sentence s = {"the", "cat", "sat", "the"};
    EXPECT_EQ(v.decode(v.encode(s)), s);
    EXPECT_EQ(v.encode({"dog"}), TokenSequence{kUnk});
    const TokenId w1 = v.id("cat"), w2 = v.id("sat");
    EXPECT_EQ(join(v.decode(std::vector<TokenId>{w1, w2, kEos, kEos, kPad})), "cat sat");
    EXPECT_EQ(v.decode(std::vector<TokenId>{kSos, w1, kPad, kEos, w2}), Sentence{"cat"});
    EXPECT_EQ(tokenize("  a\tb  c \n"), (Sentence{"a", "b", "c"}));
    EXPECT_EQ(tokenize("A a"), (Sentence{"A", "a"})); // no case folding
}

TEST(Vocabulary, SaveLoadKeepsIds) {
    TempDir dir("vocab");
    Vocabulary v = Vocabulary::build({{"x", "y", "y"}});
    v.save(dir / "v.txt");
    Vocabulary back = Vocabulary::load(dir / "v.txt");
    EXPECT_EQ(back.tokens(), v.tokens());
    EXPECT_THROW(Vocabulary::load(dir / "missing.txt"), DataError);
}

TEST(TokenBatch, PaddingAndShift) {
    TokenBatch b = TokenBatch::from_sequences({{5, 6, 7}, {8}});
    EXPECT_EQ(b.max_len, 4u);
    EXPECT_EQ(b.lengths, (std::vector<std::size_t>{4, 2}));
    EXPECT_EQ(b.ids, (std::vector<TokenId>{5, 6, 7, kEos, 8, kEos, kPad, kPad}));
    EXPECT_TRUE(b.well_formed());
    EXPECT_EQ(b.content(1), TokenSequence{8});
    TokenBatch in = shift_right(b);
    EXPECT_EQ(in.ids, (std::vector<TokenId>{kSos, 5, 6, 7, kSos, 8, kEos, kPad}));
    TokenBatch broken = b;
    broken.ids[6] = 9;
    EXPECT_FALSE(broken.well_formed());
    TokenBatch early_eos = b;
    early_eos.ids[1] = kEos;
    EXPECT_FALSE(early_eos.well_formed());
}

TEST(SynthCopy, SingleTokenRange) {
    Rng rng(1);
    CopyDataset d = synth_copy(50, 10, 1, 1, 50, rng);
    for (const auto& s : d.train) EXPECT_EQ(s.size(), 1u);
    for (const auto& s : d.test) EXPECT_EQ(s.size(), 1u);
}

TEST(SynthCopy, DeterministicAndDisjoint) {
    Rng a(7), b(7), c(8);
    CopyDataset x = synth_copy(2000, 200, 3, 10, 50, a);
    CopyDataset y = synth_copy(2000, 200, 3, 10, 50, b);
    EXPECT_EQ(x.train, y.train);
    EXPECT_EQ(x.test, y.test);
    EXPECT_NE(synth_copy(2000, 200, 3, 10, 50, c).train, x.train);
    std::set<Sentence> train(x.train.begin(), x.train.end());
    for (const auto& s : x.test) EXPECT_EQ(train.count(s), 0u);
    Vocabulary v = Vocabulary::build(x.train);
    EXPECT_EQ(v.size(), 50u);
    EXPECT_THROW(synth_copy(10, 1, 0, 3, 50, a), ConfigError);
    EXPECT_THROW(synth_copy(10, 1, 4, 3, 50, a), ConfigError);
    EXPECT_THROW(synth_copy(10, 1, 1, 3, 4, a), ConfigError);
    // Only 1 distinct single-token sentence exists with one symbol.
    EXPECT_THROW(synth_copy(5, 1, 1, 1, 5, a), DataError);
}

TEST(SynthCopy, LengthHistogramIsUniformWithinThreeSigma) {
    Rng rng(3);
    CopyDataset d = synth_copy(2000, 200, 3, 10, 50, rng);
    std::vector<double> counts(11, 0.0);
    for (const auto& s : d.train) counts[s.size()] += 1.0;
    const double n = 2000.0, p = 1.0 / 8.0;
    const double sigma = std::sqrt(n * p * (1 - p));
    for (std::size_t len = 3; len <= 10; ++len) EXPECT_LE(std::abs(counts[len] - n * p), 3 * sigma) << len;
    EXPECT_EQ(counts[0] + counts[1] + counts[2], 0.0);
}

class CorpusTest : public ::testing::Test {
  protected:
    TempDir dir{"corpus"};
    std::filesystem::path corpus = dir / "corpus.txt";

    static std::string words(std::size_t n, const std::string& tag) {
        std::string s;
        for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + tag + std::to_string(i);
        return s;
    }
};

TEST_F(CorpusTest, ExactFillUsesEveryQualifyingLineOnce) {
    std::string text;
    for (int i = 0; i < 12; ++i) text += words(1 + i % 5, "s" + std::to_string(i) + "_") + "\n";
    text += words(31, "long") + "\n\n";
    text += "  " + words(1, "s0_") + "\n"; // same sentence as the first line
    write_file(corpus, text);
    Rng rng(1);
    CopyDataset d = sample_corpus(corpus, 8, 4, 30, rng);
    EXPECT_EQ(d.train.size(), 8u);
    EXPECT_EQ(d.test.size(), 4u);
    std::set<Sentence> all(d.train.begin(), d.train.end());
    for (const auto& s : d.test) EXPECT_TRUE(all.insert(s).second);
    EXPECT_EQ(all.size(), 12u);
    Rng again(1);
    EXPECT_THROW(sample_corpus(corpus, 9, 4, 30, again), DataError);
    for (const auto& s : all) EXPECT_LE(s.size(), 30u);
}

TEST_F(CorpusTest, ThirtyOneWordSentencesAreNeverSampled) {
    std::string text;
    for (int i = 0; i < 40; ++i) text += words(30 + i % 2, "t" + std::to_string(i) + "_") + "\n";
    write_file(corpus, text);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        CopyDataset d = sample_corpus(corpus, 15, 5, 30, rng);
        for (const auto& s : d.train) EXPECT_EQ(s.size(), 30u);
        for (const auto& s : d.test) EXPECT_EQ(s.size(), 30u);
    }
}

TEST_F(CorpusTest, ShortCorpusReportsCounts) {
    write_file(corpus, "a b\nc d\na b\n" + words(31, "x") + "\n");
    Rng rng(1);
    try {
        sample_corpus(corpus, 2, 1, 30, rng);
        FAIL();
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2 distinct"), std::string::npos) << msg;
        EXPECT_NE(msg.find("2 train + 1 test"), std::string::npos) << msg;
    }
    EXPECT_THROW(sample_corpus(dir / "nope.txt", 1, 1, 30, rng), DataError);
}

TEST_F(CorpusTest, DeterministicUnderSeed) {
    std::string text;
    for (int i = 0; i < 100; ++i) text += words(1 + i % 7, "u" + std::to_string(i) + "_") + "\n";
    write_file(corpus, text);
    Rng a(9), b(9);
    CopyDataset x = sample_corpus(corpus, 50, 20, 30, a), y = sample_corpus(corpus, 50, 20, 30, b);
    EXPECT_EQ(x.train, y.train);
    EXPECT_EQ(x.test, y.test);
}

TEST(MakeBatches, PartitionAndDeterminism) {
    std::vector<TokenSequence> ex;
    for (TokenId i = 0; i < 23; ++i) ex.push_back(TokenSequence(1 + i % 4, 4 + i));
    auto singles = make_batches(ex, 1, nullptr);
    ASSERT_EQ(singles.size(), 23u);
    for (const auto& b : singles) EXPECT_EQ(b.source.batch, 1u);

    Rng a(5), b(5);
    auto first = make_batches(ex, 5, &a), second = make_batches(ex, 5, &b);
    ASSERT_EQ(first.size(), 5u);
    std::multiset<TokenSequence> seen;
    for (std::size_t i = 0; i < first.size(); ++i) {
        EXPECT_EQ(first[i].source.ids, second[i].source.ids);
        EXPECT_EQ(first[i].source.ids, first[i].target.ids); // copy task
        EXPECT_TRUE(first[i].source.well_formed());
        for (std::size_t r = 0; r < first[i].source.batch; ++r) seen.insert(first[i].source.content(r));
    }
    EXPECT_EQ(seen, std::multiset<TokenSequence>(ex.begin(), ex.end()));
    // Successive epochs from one stream reshuffle.
    auto next_epoch = make_batches(ex, 5, &a);
    bool differs = false;
    for (std::size_t i = 0; i < first.size(); ++i) differs |= next_epoch[i].source.ids != first[i].source.ids;
    EXPECT_TRUE(differs);
    EXPECT_THROW(make_batches(ex, 0, nullptr), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
    TempDir dir("dataset");
    Rng rng(2);
    CopyDataset d = synth_copy(30, 5, 2, 4, 12, rng);
    Vocabulary v = Vocabulary::build(d.train);
    save_dataset(dir.path(), d, v);
    LoadedDataset back = load_dataset(dir.path());
    EXPECT_EQ(back.data.train, d.train);
    EXPECT_EQ(back.data.test, d.test);
    EXPECT_EQ(back.vocab.tokens(), v.tokens());
    EXPECT_EQ(read_file(dir / "vocab.txt").substr(0, 25), "<pad>\n<sos>\n<eos>\n<unk>\nw");
}
