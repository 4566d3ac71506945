#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "attnbench/data.hpp"
#include "attnbench/models.hpp"

namespace attnbench {

/// Smoothing count used for an n-gram order with no matches.
inline constexpr double kBleuEpsilon = 0.1;

/// Sentence BLEU-4 in [0, 1]. EOS and PAD are removed from both sides before
/// counting; orders above the candidate length are left out.
double bleu(std::span<const TokenId> candidate, std::span<const TokenId> reference);

inline double perplexity(double mean_loss) { return std::exp(mean_loss); }

struct EvalReport {
    double avg_bleu = 0.0;
    double test_loss = 0.0;
    double perplexity = 1.0;
    std::size_t n_examples = 0;
};

struct EvalOptions {
    std::size_t batch_size = 64;
    /// Decode budget; 0 means min(config.max_decode_len, longest test source incl. EOS + 4).
    std::size_t max_decode_len = 0;
};

/// Token-averaged teacher-forced loss and mean greedy-decode BLEU over a copy
/// test set. Dropout is off; repeated calls give identical reports.
EvalReport evaluate(const Seq2SeqModel& model, const std::vector<TokenSequence>& test, const Vocabulary& vocab,
                    const EvalOptions& options = {});

} // namespace attnbench
