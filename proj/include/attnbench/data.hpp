#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "attnbench/ops.hpp"
#include "attnbench/random.hpp"

namespace attnbench {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kReservedTokens = 4;

using Sentence = std::vector<std::string>;
using TokenSequence = std::vector<TokenId>;

/// Whitespace tokenization; no case folding.
Sentence tokenize(const std::string& line);
std::string join(const Sentence& sentence);

/// Token <-> id map with reserved ids PAD=0, SOS=1, EOS=2, UNK=3.
class Vocabulary {
  public:
    /// Reserved tokens only.
    Vocabulary();
    /// Tokens listed in id order; the first four must be the reserved names.
    explicit Vocabulary(std::vector<std::string> tokens_in_id_order);

    /// Reserved ids followed by every token of `sentences`, most frequent
    /// first, ties broken lexicographically.
    static Vocabulary build(const std::vector<Sentence>& sentences);

    std::size_t size() const { return tokens_.size(); }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    TokenId id(const std::string& token) const;
    const std::string& token(TokenId id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// Unknown tokens map to UNK. No EOS is appended.
    TokenSequence encode(const Sentence& sentence) const;
    /// Drops PAD and SOS and stops at the first EOS.
    Sentence decode(std::span<const TokenId> ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

/// Padded [batch x max_len] id matrix. Well-formed rows end with EOS at
/// position length-1 and hold PAD beyond it.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t max_len = 0;
    std::vector<TokenId> ids;
    std::vector<std::size_t> lengths;

    /// Appends EOS to every sequence and pads to the longest.
    static TokenBatch from_sequences(const std::vector<TokenSequence>& sequences);

    TokenId at(std::size_t row, std::size_t pos) const { return ids[row * max_len + pos]; }
    std::span<const TokenId> row(std::size_t r) const { return {ids.data() + r * max_len, max_len}; }
    /// Row tokens before EOS.
    TokenSequence content(std::size_t r) const;
    bool well_formed() const;
};

/// Decoder input for teacher forcing: SOS followed by the target shifted right
/// by one, same [batch x max_len] extent as the target.
TokenBatch shift_right(const TokenBatch& target);

struct CopyDataset {
    std::vector<Sentence> train;
    std::vector<Sentence> test;
};

/// Samples distinct sentences of 1..max_words whitespace tokens from a
/// one-sentence-per-line text file into disjoint train/test splits.
CopyDataset sample_corpus(const std::filesystem::path& path, std::size_t n_train, std::size_t n_test,
                          std::size_t max_words, Rng& rng);

/// Uniformly random token sequences with lengths uniform in [min_len, max_len].
/// vocab_size counts the four reserved ids; tokens are named w0, w1, ...
/// Test sequences never occur in the training split.
CopyDataset synth_copy(std::size_t n_train, std::size_t n_test, std::size_t min_len, std::size_t max_len,
                       std::size_t vocab_size, Rng& rng);

std::vector<TokenSequence> encode_all(const Vocabulary& vocab, const std::vector<Sentence>& sentences);

struct Batch {
    TokenBatch source;
    TokenBatch target;
};

/// Splits examples into copy-task batches. When rng is given the order is
/// shuffled first; otherwise dataset order is kept.
std::vector<Batch> make_batches(const std::vector<TokenSequence>& examples, std::size_t batch_size, Rng* rng);

/// Dataset cache: train.txt / test.txt (one space-joined sentence per line)
/// and vocab.txt (one token per line in id order).
void save_dataset(const std::filesystem::path& dir, const CopyDataset& data, const Vocabulary& vocab);
struct LoadedDataset {
    CopyDataset data;
    Vocabulary vocab;
};
LoadedDataset load_dataset(const std::filesystem::path& dir);

} // namespace attnbench
