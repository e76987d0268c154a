#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "agfn/graph.hpp"
#include "agfn/hitl.hpp"
#include "agfn/scorer.hpp"

namespace agfn {

constexpr int kMaxExactNodes = 4;

enum class AncestralityCheck { Reachability, Algebraic };

/// Every ancestral graph on n <= 4 nodes, in feature-assignment order
/// (pair 0 varies fastest).
std::vector<AncestralGraph> enumerate_ags(int n, AncestralityCheck check = AncestralityCheck::Reachability);

/// Enumerated graphs with their scores and the exact target p ∝ R.
struct ExactSpace {
    int n = 0;
    std::vector<AncestralGraph> graphs;
    std::vector<double> scores;
    std::vector<double> log_rewards;
    std::vector<double> probs;
    double log_z = 0.0;

    std::size_t size() const { return graphs.size(); }
    /// Index of a graph, or size() when absent.
    std::size_t index_of(const AncestralGraph& g) const;
};

ExactSpace exact_distribution(Scorer& scorer, const RewardSpec& spec);
/// Same as above for precomputed scores.
ExactSpace exact_distribution(std::vector<AncestralGraph> graphs, std::vector<double> scores, const RewardSpec& spec);

/// q ∝ R times the feedback factors of every record, using each record's
/// stored prior snapshot.
std::vector<double> exact_posterior(const ExactSpace& space, std::span<const FeedbackRecord> feedbacks);

std::vector<Simplex> exact_marginals(const ExactSpace& space, std::span<const double> probs);
double exact_expectation(const ExactSpace& space, std::span<const double> probs,
                         const std::function<double(const AncestralGraph&, double score)>& h);

/// i.i.d. draws from `probs` over the space.
std::vector<BeliefSample> sample_exact(const ExactSpace& space, std::span<const double> probs, int count,
                                       std::uint64_t seed);

/// Total variation between `probs` and the empirical distribution of `graphs`.
/// Graphs outside the space count fully towards the distance.
double total_variation(const ExactSpace& space, std::span<const double> probs,
                       std::span<const AncestralGraph> graphs);

/// One JSON object per line: {"graph", "U", "R", "p"}.
void write_space_jsonl(std::ostream& out, const ExactSpace& space, const RewardSpec& spec);

}  // namespace agfn
