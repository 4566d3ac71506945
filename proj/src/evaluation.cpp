#include "attnbench/evaluation.hpp"

#include <algorithm>
#include <map>

#include "attnbench/errors.hpp"

namespace attnbench {

namespace {

std::vector<TokenId> strip(std::span<const TokenId> ids) {
    std::vector<TokenId> out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id != kEos && id != kPad) out.push_back(id);
    }
    return out;
}

std::map<std::vector<TokenId>, std::size_t> ngram_counts(const std::vector<TokenId>& s, std::size_t n) {
    std::map<std::vector<TokenId>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)];
    return counts;
}

} // namespace

double bleu(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
    const auto cand = strip(candidate);
    const auto ref = strip(reference);
    if (cand.empty()) return 0.0;
    const std::size_t max_order = std::min<std::size_t>(4, cand.size());
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_order; ++n) {
        const auto c = ngram_counts(cand, n);
        const auto r = ngram_counts(ref, n);
        std::size_t matches = 0;
        for (const auto& [gram, count] : c) {
            auto it = r.find(gram);
            if (it != r.end()) matches += std::min(count, it->second);
        }
        const double total = static_cast<double>(cand.size() - n + 1);
        const double hits = matches == 0 ? kBleuEpsilon : static_cast<double>(matches);
        log_sum += std::log(hits / total);
    }
    const double c_len = static_cast<double>(cand.size());
    const double r_len = static_cast<double>(ref.size());
    const double brevity = std::min(1.0, std::exp(1.0 - r_len / c_len));
    return brevity * std::exp(log_sum / static_cast<double>(max_order));
}

EvalReport evaluate(const Seq2SeqModel& model, const std::vector<TokenSequence>& test, const Vocabulary& vocab,
                    const EvalOptions& options) {
    if (model.config().vocab_size != vocab.size()) {
        throw ConfigError("model vocabulary of " + std::to_string(model.config().vocab_size) +
                          " tokens does not match dataset vocabulary of " + std::to_string(vocab.size()));
    }
    NoGradScope no_grad;
    EvalReport report;
    double loss_sum = 0.0, bleu_sum = 0.0;
    std::size_t tokens = 0;
    // One budget for the whole set so the report does not depend on batching.
    std::size_t longest = 0;
    for (const auto& seq : test) longest = std::max(longest, seq.size() + 1);
    const std::size_t budget =
        options.max_decode_len ? options.max_decode_len : std::min(model.config().max_decode_len, longest + 4);
    for (const auto& batch : make_batches(test, options.batch_size, nullptr)) {
        const Tensor loss = cross_entropy(model.forward_teacher_forced(batch.source, batch.target), batch.target.ids, kPad);
        std::size_t n_tokens = 0;
        for (std::size_t len : batch.target.lengths) n_tokens += len;
        loss_sum += loss.item() * static_cast<double>(n_tokens);
        tokens += n_tokens;

        const TokenBatch decoded = model.greedy_decode(batch.source, budget);
        for (std::size_t r = 0; r < batch.target.batch; ++r) {
            bleu_sum += bleu(decoded.row(r), batch.target.row(r));
        }
        report.n_examples += batch.target.batch;
    }
    if (report.n_examples == 0) return report;
    report.test_loss = loss_sum / static_cast<double>(tokens);
    report.perplexity = perplexity(report.test_loss);
    report.avg_bleu = bleu_sum / static_cast<double>(report.n_examples);
    return report;
}

} // namespace attnbench
