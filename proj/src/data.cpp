#include "attnbench/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench {

namespace {

const std::vector<std::string> kReservedNames = {"<pad>", "<sos>", "<eos>", "<unk>"};

std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<Sentence> out;
    std::string line;
    while (std::getline(in, line)) {
        Sentence s = tokenize(line);
        if (!s.empty()) out.push_back(std::move(s));
    }
    return out;
}

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& s : sentences) out << join(s) << '\n';
}

} // namespace

Sentence tokenize(const std::string& line) {
    Sentence words;
    std::istringstream is(line);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

std::string join(const Sentence& sentence) {
    std::string out;
    for (std::size_t i = 0; i < sentence.size(); ++i) {
        if (i) out += ' ';
        out += sentence[i];
    }
    return out;
}

Vocabulary::Vocabulary() : Vocabulary(kReservedNames) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens_in_id_order) : tokens_(std::move(tokens_in_id_order)) {
    if (tokens_.size() < kReservedTokens || !std::equal(kReservedNames.begin(), kReservedNames.end(), tokens_.begin())) {
        throw VocabularyError("vocabulary must start with <pad> <sos> <eos> <unk>");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw VocabularyError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
}

Vocabulary Vocabulary::build(const std::vector<Sentence>& sentences) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences)
        for (const auto& w : s) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (const auto& [w, c] : counts) {
        if (std::find(kReservedNames.begin(), kReservedNames.end(), w) == kReservedNames.end()) ranked.emplace_back(w, c);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = kReservedNames;
    for (auto& [w, c] : ranked) tokens.push_back(w);
    return Vocabulary(std::move(tokens));
}

TokenId Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(const Sentence& sentence) const {
    TokenSequence ids;
    ids.reserve(sentence.size());
    for (const auto& w : sentence) ids.push_back(id(w));
    return ids;
}

Sentence Vocabulary::decode(std::span<const TokenId> ids) const {
    Sentence out;
    for (TokenId id : ids) {
        if (id == kEos) break;
        if (id == kPad || id == kSos) continue;
        out.push_back(token(id));
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
}

TokenBatch TokenBatch::from_sequences(const std::vector<TokenSequence>& sequences) {
    TokenBatch b;
    b.batch = sequences.size();
    for (const auto& s : sequences) b.max_len = std::max(b.max_len, s.size() + 1);
    b.ids.assign(b.batch * b.max_len, kPad);
    b.lengths.resize(b.batch);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const auto& s = sequences[r];
        std::copy(s.begin(), s.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.max_len));
        b.ids[r * b.max_len + s.size()] = kEos;
        b.lengths[r] = s.size() + 1;
    }
    return b;
}

TokenSequence TokenBatch::content(std::size_t r) const {
    TokenSequence out;
    for (std::size_t t = 0; t < max_len; ++t) {
        const TokenId id = at(r, t);
        if (id == kEos) break;
        if (id != kPad) out.push_back(id);
    }
    return out;
}

bool TokenBatch::well_formed() const {
    if (ids.size() != batch * max_len || lengths.size() != batch) return false;
    for (std::size_t r = 0; r < batch; ++r) {
        const std::size_t len = lengths[r];
        if (len == 0 || len > max_len || at(r, len - 1) != kEos) return false;
        for (std::size_t t = 0; t + 1 < len; ++t) {
            if (at(r, t) == kEos || at(r, t) == kPad) return false;
        }
        for (std::size_t t = len; t < max_len; ++t) {
            if (at(r, t) != kPad) return false;
        }
    }
    return true;
}

TokenBatch shift_right(const TokenBatch& target) {
    TokenBatch in = target;
    for (std::size_t r = 0; r < target.batch; ++r) {
        in.ids[r * target.max_len] = kSos;
        for (std::size_t t = 1; t < target.max_len; ++t) in.ids[r * target.max_len + t] = target.at(r, t - 1);
    }
    return in;
}

CopyDataset sample_corpus(const std::filesystem::path& path, std::size_t n_train, std::size_t n_test,
                          std::size_t max_words, Rng& rng) {
    std::vector<Sentence> lines = read_sentences(path);
    std::vector<Sentence> qualifying;
    std::set<Sentence> seen;
    for (auto& s : lines) {
        if (s.empty() || s.size() > max_words) continue;
        if (seen.insert(s).second) qualifying.push_back(std::move(s));
    }
    if (qualifying.size() < n_train + n_test) {
        throw DataError(path.string() + ": " + std::to_string(qualifying.size()) + " distinct sentences of 1.." +
                        std::to_string(max_words) + " words, need " + std::to_string(n_train) + " train + " +
                        std::to_string(n_test) + " test");
    }
    rng.shuffle(qualifying.begin(), qualifying.end());
    CopyDataset data;
    data.train.assign(qualifying.begin(), qualifying.begin() + static_cast<std::ptrdiff_t>(n_train));
    data.test.assign(qualifying.begin() + static_cast<std::ptrdiff_t>(n_train),
                     qualifying.begin() + static_cast<std::ptrdiff_t>(n_train + n_test));
    return data;
}

CopyDataset synth_copy(std::size_t n_train, std::size_t n_test, std::size_t min_len, std::size_t max_len,
                       std::size_t vocab_size, Rng& rng) {
    if (vocab_size <= kReservedTokens) {
        throw ConfigError("synthetic vocabulary must exceed the " + std::to_string(kReservedTokens) + " reserved ids");
    }
    if (min_len == 0 || min_len > max_len) throw ConfigError("synthetic length range must satisfy 1 <= min <= max");
    const std::size_t symbols = vocab_size - kReservedTokens;
    auto draw = [&] {
        const std::size_t len = min_len + rng.below(max_len - min_len + 1);
        Sentence s(len);
        for (auto& w : s) w = "w" + std::to_string(rng.below(symbols));
        return s;
    };
    CopyDataset data;
    data.train.reserve(n_train);
    for (std::size_t i = 0; i < n_train; ++i) data.train.push_back(draw());
    std::set<Sentence> train_set(data.train.begin(), data.train.end());
    const std::size_t max_attempts = 1000 * (n_test + 1);
    std::size_t attempts = 0;
    while (data.test.size() < n_test) {
        if (++attempts > max_attempts) {
            throw DataError("could not draw " + std::to_string(n_test) + " test sequences disjoint from training");
        }
        Sentence s = draw();
        if (!train_set.count(s)) data.test.push_back(std::move(s));
    }
    return data;
}

std::vector<TokenSequence> encode_all(const Vocabulary& vocab, const std::vector<Sentence>& sentences) {
    std::vector<TokenSequence> out;
    out.reserve(sentences.size());
    for (const auto& s : sentences) out.push_back(vocab.encode(s));
    return out;
}

std::vector<Batch> make_batches(const std::vector<TokenSequence>& examples, std::size_t batch_size, Rng* rng) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (rng) rng->shuffle(order.begin(), order.end());
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        std::vector<TokenSequence> rows;
        rows.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) rows.push_back(examples[order[i]]);
        TokenBatch b = TokenBatch::from_sequences(rows);
        batches.push_back({b, b});
    }
    return batches;
}

void save_dataset(const std::filesystem::path& dir, const CopyDataset& data, const Vocabulary& vocab) {
    std::filesystem::create_directories(dir);
    write_sentences(dir / "train.txt", data.train);
    write_sentences(dir / "test.txt", data.test);
    vocab.save(dir / "vocab.txt");
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
    LoadedDataset out;
    out.data.train = read_sentences(dir / "train.txt");
    out.data.test = read_sentences(dir / "test.txt");
    out.vocab = Vocabulary::load(dir / "vocab.txt");
    return out;
}

} // namespace attnbench
