#include "svflow/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace svflow {

void LabeledPoints::validate() const {
  if (points.size() != labels.size()) throw DimensionError("LabeledPoints: points and labels differ in length");
  for (const auto& p : points) {
    if (!p.allFinite()) throw DomainError("LabeledPoints: non-finite point");
  }
}

LabeledPoints LabeledPoints::subset(const std::vector<std::size_t>& indices) const {
  LabeledPoints out;
  out.points.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    require(i < size(), "LabeledPoints::subset: index out of range");
    out.points.push_back(points[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

LabeledPoints make_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2) throw PreconditionError("make_moons: need at least 2 points");
  if (!(noise >= 0.0)) throw PreconditionError("make_moons: noise must be ≥ 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n_out = n / 2;
  const std::size_t n_in = n - n_out;
  LabeledPoints out;
  auto arc = [](std::size_t i, std::size_t count) {
    return count > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = arc(i, n_out);
    out.points.push_back(Vec{{std::cos(t), std::sin(t)}});
    out.labels.push_back(0);
  }
  for (std::size_t i = 0; i < n_in; ++i) {
    const double t = arc(i, n_in);
    out.points.push_back(Vec{{1.0 - std::cos(t), 0.5 - std::sin(t)}});
    out.labels.push_back(1);
  }
  if (noise > 0.0) {
    for (auto& p : out.points) {
      p[0] += noise * gauss(rng);
      p[1] += noise * gauss(rng);
    }
  }
  return out;
}

namespace {

// Distance from p to the half circle of radius 1 around c, on the side
// `upper` (y ≥ c_y) or lower.
double half_circle_distance(double px, double py, double cx, double cy, bool upper) {
  const double dx = px - cx;
  const double dy = py - cy;
  if (upper ? dy >= 0.0 : dy <= 0.0) return std::abs(std::hypot(dx, dy) - 1.0);
  return std::min(std::hypot(dx - 1.0, dy), std::hypot(dx + 1.0, dy));
}

}  // namespace

double distance_to_moons(const Vec& p) {
  require_same_size(static_cast<std::size_t>(p.size()), 2, "distance_to_moons");
  return std::min(half_circle_distance(p[0], p[1], 0.0, 0.0, true), half_circle_distance(p[0], p[1], 1.0, 0.5, false));
}

namespace {

Vec random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec v(static_cast<Eigen::Index>(d));
  for (;;) {
    for (auto& x : v) x = gauss(rng);
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

}  // namespace

Vec sample_vmf(const Vec& mu, double kappa, std::mt19937_64& rng) {
  const auto d = static_cast<std::size_t>(mu.size());
  require(d >= 2, "sample_vmf: dimension must be at least 2");
  require(kappa >= 0.0 && std::isfinite(kappa), "sample_vmf: kappa must be finite and ≥ 0");
  const Vec m = mu / mu.norm();
  if (kappa == 0.0) return random_unit(d, rng);

  // Wood (1994): sample w = μ·x by rejection, then a uniform tangent direction.
  const double dm1 = static_cast<double>(d - 1);
  const double b = dm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> ga(dm1 / 2.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double w = 1.0;
  for (;;) {
    const double g1 = ga(rng);
    const double g2 = ga(rng);
    const double z = g1 / (g1 + g2);
    w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    const double u = unif(rng);
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }
  Vec v = random_unit(d, rng);
  v -= m * m.dot(v);
  const double vn = v.norm();
  if (vn < 1e-12) return m;
  Vec x = w * m + std::sqrt(std::max(0.0, 1.0 - w * w)) * (v / vn);
  return x / x.norm();
}

LabeledPoints make_vmf_clusters(std::size_t n, std::size_t d, std::size_t num_clusters, double kappa,
                                std::uint64_t seed) {
  require(num_clusters >= 1, "make_vmf_clusters: need at least one cluster");
  require(d >= 2, "make_vmf_clusters: dimension must be at least 2");
  std::mt19937_64 rng(seed);
  std::vector<Vec> centers;
  for (std::size_t k = 0; k < num_clusters; ++k) centers.push_back(random_unit(d, rng));
  LabeledPoints out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % num_clusters;
    out.points.push_back(sample_vmf(centers[k], kappa, rng));
    out.labels.push_back(static_cast<int>(k));
  }
  return out;
}

std::vector<int> majority_targets(const std::vector<int>& tokens, std::size_t window) {
  require(window >= 1, "majority_targets: window must be ≥ 1");
  std::vector<int> out(tokens.size(), -1);
  std::vector<std::pair<int, int>> counts;
  for (std::size_t n = 1; n < tokens.size(); ++n) {
    const std::size_t lo = n >= window ? n - window : 0;
    counts.clear();
    for (std::size_t i = lo; i < n; ++i) {
      auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == tokens[i]; });
      if (it == counts.end()) {
        counts.emplace_back(tokens[i], 1);
      } else {
        ++it->second;
      }
    }
    int best = -1, best_count = 0;
    for (const auto& [tok, cnt] : counts) {
      if (cnt > best_count || (cnt == best_count && tok < best)) {
        best = tok;
        best_count = cnt;
      }
    }
    out[n] = best;
  }
  return out;
}

SequenceCorpus make_sequence_task(std::size_t vocab, std::size_t length, std::size_t dim, std::uint64_t seed,
                                  std::size_t count, std::size_t window) {
  if (vocab < 2) throw PreconditionError("make_sequence_task: vocab must be ≥ 2");
  if (dim < 4) throw PreconditionError("make_sequence_task: dimension must be ≥ 4");
  std::mt19937_64 rng(seed);
  SequenceCorpus c;
  c.vocab = vocab;
  c.dim = dim;
  c.window = window;
  for (std::size_t v = 0; v < vocab; ++v) c.embedding_table.push_back(random_unit(dim, rng));
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  for (std::size_t s = 0; s < count; ++s) {
    TokenSequence seq;
    for (std::size_t n = 0; n < length; ++n) {
      seq.tokens.push_back(tok(rng));
      seq.embeddings.push_back(c.embedding_table[static_cast<std::size_t>(seq.tokens.back())]);
    }
    seq.targets = majority_targets(seq.tokens, window);
    c.sequences.push_back(std::move(seq));
  }
  return c;
}

std::size_t shuffled_prefix_length(std::size_t length, double proportion) {
  require(proportion >= 0.0 && proportion <= 1.0, "prefix shuffle: proportion must lie in [0, 1]");
  // The small slack keeps products like 0.95·100 from rounding down to 94.
  const auto k = static_cast<std::size_t>(std::floor(proportion * static_cast<double>(length) + 1e-9));
  return std::min(k, length);
}

std::vector<std::size_t> prefix_permutation(std::size_t length, double proportion, std::uint64_t seed) {
  const std::size_t k = shuffled_prefix_length(length, proportion);
  std::vector<std::size_t> perm(length);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k), rng);
  return perm;
}

TokenSequence prefix_shuffle(const TokenSequence& seq, double proportion, std::uint64_t seed) {
  const auto perm = prefix_permutation(seq.size(), proportion, seed);
  TokenSequence out = seq;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.tokens[i] = seq.tokens[perm[i]];
    if (!seq.embeddings.empty()) out.embeddings[i] = seq.embeddings[perm[i]];
  }
  return out;
}

std::string corpus_to_jsonl(const SequenceCorpus& corpus, const std::string& embedding_ref) {
  std::ostringstream os;
  for (const auto& s : corpus.sequences) {
    nlohmann::json j;
    j["tokens"] = s.tokens;
    j["targets"] = s.targets;
    j["window"] = corpus.window;
    j["embedding_ref"] = embedding_ref;
    os << j.dump() << '\n';
  }
  return os.str();
}

SequenceCorpus corpus_from_jsonl(const std::string& text, const std::vector<Vec>& embedding_table) {
  SequenceCorpus c;
  c.embedding_table = embedding_table;
  c.vocab = embedding_table.size();
  c.dim = embedding_table.empty() ? 0 : static_cast<std::size_t>(embedding_table.front().size());
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TokenSequence s;
      s.tokens = j.at("tokens").get<std::vector<int>>();
      s.targets = j.at("targets").get<std::vector<int>>();
      c.window = j.value("window", c.window);
      if (s.targets.size() != s.tokens.size()) throw ConfigError("tokens/targets length mismatch");
      for (int t : s.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab) throw ConfigError("token id outside the embedding table");
        s.embeddings.push_back(embedding_table[static_cast<std::size_t>(t)]);
      }
      c.sequences.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("corpus line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace svflow
