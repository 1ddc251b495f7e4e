#include "svflow/data.hpp"
#include "svflow/distributions.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace svflow;

TEST(Moons, NoiselessPointsLieOnArcs) {
  const auto d = make_moons(501, 0.0, 3);
  for (const auto& p : d.points) EXPECT_LE(distance_to_moons(p), 1e-12);
}

TEST(Moons, SameSeedSameData) {
  const auto a = make_moons(300, 0.06, 9), b = make_moons(300, 0.06, 9), c = make_moons(300, 0.06, 10);
  EXPECT_EQ(a.labels, b.labels);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.points[i], b.points[i]);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a.points[i] != c.points[i];
  EXPECT_TRUE(differs);
}

TEST(Moons, ClassesBalanced) {
  for (std::size_t n : {2, 3, 99, 1000}) {
    const auto d = make_moons(n, 0.06, 1);
    const auto ones = std::count(d.labels.begin(), d.labels.end(), 1);
    const auto zeros = std::count(d.labels.begin(), d.labels.end(), 0);
    EXPECT_EQ(static_cast<std::size_t>(ones + zeros), n);
    EXPECT_LE(std::abs(ones - zeros), 1);
  }
}

TEST(Moons, RejectsTooFewPoints) { EXPECT_THROW(make_moons(1, 0.06, 0), Error); }

TEST(Moons, NoiseMovesPointsOffArcs) {
  const auto d = make_moons(2000, 0.06, 4);
  double mean = 0.0;
  for (const auto& p : d.points) mean += distance_to_moons(p);
  mean /= 2000.0;
  EXPECT_GT(mean, 0.02);
  EXPECT_LT(mean, 0.08);
}

TEST(VmfClusters, UnitNormAndDeterministic) {
  const auto a = make_vmf_clusters(400, 16, 4, 20.0, 5), b = make_vmf_clusters(400, 16, 4, 20.0, 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a.points[i].norm(), 1.0, 1e-12);
    EXPECT_EQ(a.points[i], b.points[i]);
    EXPECT_GE(a.labels[i], 0);
    EXPECT_LT(a.labels[i], 4);
  }
}

TEST(SampleVmf, MeanResultantMatchesTheory) {
  std::mt19937_64 rng(6);
  for (std::size_t d : {3, 10}) {
    for (double kappa : {0.5, 5.0, 50.0}) {
      Vec mu = Vec::Zero(static_cast<Eigen::Index>(d));
      mu[0] = 1.0;
      const int n = 20000;
      double sum = 0.0, sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const Vec x = sample_vmf(mu, kappa, rng);
        ASSERT_NEAR(x.norm(), 1.0, 1e-12);
        sum += x[0];
        sq += x[0] * x[0];
      }
      const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
      EXPECT_NEAR(mean, vmf_mean_resultant(d, kappa), 5.0 * sd / std::sqrt(n)) << "d " << d << " kappa " << kappa;
    }
  }
}

namespace {

TokenSequence sequence_of(const std::vector<int>& tokens) {
  TokenSequence s;
  s.tokens = tokens;
  for (int t : tokens) s.embeddings.push_back(Vec::Constant(2, static_cast<double>(t)).normalized());
  s.targets = majority_targets(tokens, 3);
  return s;
}

}  // namespace

TEST(PrefixShuffle, ZeroProportionIsIdentity) {
  const auto corpus = make_sequence_task(8, 32, 4, 1);
  const auto& s = corpus.sequences[0];
  const auto t = prefix_shuffle(s, 0.0, 99);
  EXPECT_EQ(t.tokens, s.tokens);
  EXPECT_EQ(t.targets, s.targets);
}

TEST(PrefixShuffle, FullShuffleOfThreeTokens) {
  EXPECT_EQ(prefix_permutation(3, 1.0, 0), (std::vector<std::size_t>{2, 0, 1}));
  const auto s = sequence_of({5, 6, 7});
  const auto t = prefix_shuffle(s, 1.0, 0);
  EXPECT_EQ(t.tokens, (std::vector<int>{7, 5, 6}));
  EXPECT_EQ(shuffled_prefix_length(3, 1.0), 3u);  // nothing left unshuffled
}

TEST(PrefixShuffle, PermutesOnlyThePrefix) {
  const auto corpus = make_sequence_task(8, 40, 4, 2);
  const auto& s = corpus.sequences[0];
  for (double p : {0.1, 0.37, 0.5, 0.9}) {
    const auto t = prefix_shuffle(s, p, 11);
    const std::size_t k = shuffled_prefix_length(40, p);
    EXPECT_EQ(k, static_cast<std::size_t>(std::floor(p * 40)));
    auto a = s.tokens, b = t.tokens;
    std::sort(a.begin(), a.begin() + static_cast<long>(k));
    std::sort(b.begin(), b.begin() + static_cast<long>(k));
    EXPECT_EQ(a, b);  // multiset preserved, suffix untouched
    EXPECT_EQ(t.targets, s.targets);
    const auto perm = prefix_permutation(40, p, 11);
    for (std::size_t i = 0; i < 40; ++i) {
      EXPECT_EQ(t.tokens[i], s.tokens[perm[i]]);
      EXPECT_EQ(t.embeddings[i], s.embeddings[perm[i]]);
    }
  }
}

TEST(PrefixShuffle, SortingByOriginalIndexRestoresPrefix) {
  const auto corpus = make_sequence_task(8, 25, 4, 3);
  const auto& s = corpus.sequences[0];
  const auto perm = prefix_permutation(25, 0.6, 4);
  const auto t = prefix_shuffle(s, 0.6, 4);
  std::vector<std::pair<std::size_t, int>> tagged;
  for (std::size_t i = 0; i < 25; ++i) tagged.emplace_back(perm[i], t.tokens[i]);
  std::sort(tagged.begin(), tagged.end());
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(tagged[i].second, s.tokens[i]);
}

TEST(PrefixShuffle, RejectsBadProportion) {
  const auto s = sequence_of({1, 2, 3});
  EXPECT_THROW(prefix_shuffle(s, -0.1, 0), Error);
  EXPECT_THROW(prefix_shuffle(s, 1.5, 0), Error);
}

TEST(MajorityTargets, WindowOneCopiesPreviousToken) {
  const std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto t = majority_targets(tokens, 1);
  EXPECT_EQ(t[0], -1);
  for (std::size_t n = 1; n < tokens.size(); ++n) EXPECT_EQ(t[n], tokens[n - 1]);
}

TEST(MajorityTargets, TiesGoToSmallestToken) {
  EXPECT_EQ(majority_targets({4, 2, 9}, 3)[3 - 1], 2);  // window {4, 2}
  EXPECT_EQ(majority_targets({4, 2, 2, 4, 0}, 4)[4], 2);
}

TEST(MajorityTargets, InvariantToOrderInsideWindow) {
  std::mt19937_64 rng(7);
  std::vector<int> tokens(30);
  for (auto& t : tokens) t = static_cast<int>(rng() % 5);
  // A constant run shuffled among itself leaves everything as is.
  std::vector<int> run = tokens;
  std::fill(run.begin() + 5, run.begin() + 12, 3);
  auto shuffled = run;
  std::shuffle(shuffled.begin() + 5, shuffled.begin() + 12, rng);
  EXPECT_EQ(majority_targets(shuffled, 4), majority_targets(run, 4));
  // Permuting a prefix only changes windows that partially overlap it.
  const std::size_t k = 6, w = 6;
  auto perm = tokens;
  std::shuffle(perm.begin(), perm.begin() + static_cast<long>(k), rng);
  const auto a = majority_targets(tokens, w), b = majority_targets(perm, w);
  EXPECT_EQ(a[k], b[k]);
  for (std::size_t n = k + w; n < tokens.size(); ++n) EXPECT_EQ(a[n], b[n]);
}

TEST(SequenceTask, Deterministic) {
  const auto a = make_sequence_task(8, 32, 16, 5, 4), b = make_sequence_task(8, 32, 16, 5, 4);
  ASSERT_EQ(a.sequences.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.sequences[i].tokens, b.sequences[i].tokens);
    EXPECT_EQ(a.sequences[i].targets, b.sequences[i].targets);
  }
  for (std::size_t v = 0; v < 8; ++v) {
    EXPECT_EQ(a.embedding_table[v], b.embedding_table[v]);
    EXPECT_NEAR(a.embedding_table[v].norm(), 1.0, 1e-12);
  }
  EXPECT_EQ(a.sequences[0].targets, majority_targets(a.sequences[0].tokens, 8));
}

TEST(SequenceTask, JsonLinesRoundTrip) {
  const auto a = make_sequence_task(6, 12, 4, 8, 3, 5);
  const auto b = corpus_from_jsonl(corpus_to_jsonl(a, "table.json"), a.embedding_table);
  ASSERT_EQ(b.sequences.size(), 3u);
  EXPECT_EQ(b.window, 5u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(b.sequences[i].tokens, a.sequences[i].tokens);
    EXPECT_EQ(b.sequences[i].targets, a.sequences[i].targets);
    EXPECT_EQ(b.sequences[i].embeddings[2], a.sequences[i].embeddings[2]);
  }
}
