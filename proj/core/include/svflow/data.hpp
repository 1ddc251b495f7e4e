#pragma once

#include "svflow/common.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace svflow {

/// Paired (x0, y) data.
struct LabeledPoints {
  std::vector<Vec> points;
  std::vector<int> labels;

  std::size_t size() const { return points.size(); }
  void validate() const;
  LabeledPoints subset(const std::vector<std::size_t>& indices) const;
};

/// Two interleaved half circles with isotropic Gaussian noise. Outer moon
/// (label 0) is the upper unit half circle, inner moon (label 1) is the lower
/// half circle shifted by (1, −0.5).
LabeledPoints make_moons(std::size_t n, double noise = 0.06, std::uint64_t seed = 0);

/// Distance from p to the nearest point of either noiseless moon arc.
double distance_to_moons(const Vec& p);

/// Unit-norm points drawn from `num_clusters` vMF clusters (κ = `kappa`)
/// with random mean directions in dimension d. Label = cluster index.
LabeledPoints make_vmf_clusters(std::size_t n, std::size_t d, std::size_t num_clusters, double kappa,
                                std::uint64_t seed);

/// One vMF draw (Wood's rejection sampler).
Vec sample_vmf(const Vec& mu, double kappa, std::mt19937_64& rng);

/// A token sequence with per-position targets.
struct TokenSequence {
  std::vector<int> tokens;
  std::vector<Vec> embeddings;  // unit norm, one per token
  std::vector<int> targets;     // −1 where no target is defined

  std::size_t size() const { return tokens.size(); }
};

struct SequenceCorpus {
  std::size_t vocab = 0;
  std::size_t dim = 0;
  std::size_t window = 8;
  std::vector<Vec> embedding_table;  // vocab rows, unit norm
  std::vector<TokenSequence> sequences;
};

/// Target at position n: the most frequent token among positions
/// [n − window, n − 1]; ties go to the smallest token id. Position 0 has no
/// target (−1).
std::vector<int> majority_targets(const std::vector<int>& tokens, std::size_t window);

/// Random unit embedding table and `count` uniformly random sequences of
/// `length` tokens with majority-window targets.
SequenceCorpus make_sequence_task(std::size_t vocab, std::size_t length, std::size_t dim, std::uint64_t seed,
                                  std::size_t count = 1, std::size_t window = 8);

/// The permutation applied by prefix_shuffle: entry i is the original index
/// of the token that ends up at position i. Identity outside the prefix.
std::vector<std::size_t> prefix_permutation(std::size_t length, double proportion, std::uint64_t seed);

/// Number of shuffled leading tokens, ⌊pN⌋.
std::size_t shuffled_prefix_length(std::size_t length, double proportion);

/// Permutes the first ⌊pN⌋ tokens (and their embeddings); targets are left
/// untouched so they still describe the unperturbed sequence.
TokenSequence prefix_shuffle(const TokenSequence& seq, double proportion, std::uint64_t seed);

/// JSON-lines: one {"tokens", "targets", "window", "embedding_ref"} object per line.
std::string corpus_to_jsonl(const SequenceCorpus& corpus, const std::string& embedding_ref);
SequenceCorpus corpus_from_jsonl(const std::string& text, const std::vector<Vec>& embedding_table);

}  // namespace svflow
