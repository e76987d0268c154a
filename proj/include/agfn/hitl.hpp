#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agfn/graph.hpp"

namespace agfn {

/// Categorical distribution over the four relation features; index k holds
/// the probability of feature k + 1.
using Simplex = std::array<double, kNumFeatures>;

/// p(f | omega): pi if f == omega, (1 - pi) / 3 otherwise.
double answer_likelihood(int answer, int truth, double reliability);

/// Closed-form posterior of omega_r after answer f:
///   (rho / eta) .* (pi delta_f + (1 - pi)/3 (1 - delta_f)),
///   eta = rho_f pi + (1 - pi)/3 (1 - rho_f).
/// Throws DegenerateEvidenceError when eta == 0.
Simplex feature_posterior(const Simplex& prior, int answer, double reliability);

/// One expert answer with the prior snapshot it was conditioned on.
struct FeedbackRecord {
    Relation relation;
    int answer = 1;
    double reliability = 0.25;
    Simplex prior{0.25, 0.25, 0.25, 0.25};
};

nlohmann::json feedback_to_json(const FeedbackRecord& f);
FeedbackRecord feedback_from_json(const nlohmann::json& j);

/// log of the weight factor a feedback contributes to a graph whose relation
/// has feature `feature`: log p(f | omega) - log eta. This equals
/// log posterior[omega] - log prior[omega] whenever prior[omega] > 0, so the
/// sampler's own marginal is not counted twice. -inf when the answer rules
/// the feature out.
double feedback_log_factor(const FeedbackRecord& fb, Feature feature);

struct BeliefSample {
    AncestralGraph graph;
    double score = 0.0;       // U(G)
    double log_reward = 0.0;  // log R(G)
};

/// Importance-weighted sample set over ancestral graphs plus the feedback
/// that produced the weights. Log-weight of sample t is the sum of
/// feedback_log_factor over all feedback so far.
class BeliefState {
public:
    BeliefState() = default;
    explicit BeliefState(std::vector<BeliefSample> samples, bool allow_repeat_queries = false);

    int n() const { return n_; }
    std::size_t size() const { return samples_.size(); }
    const std::vector<BeliefSample>& samples() const { return samples_; }
    const std::vector<double>& log_weights() const { return log_weights_; }
    const std::vector<FeedbackRecord>& feedbacks() const { return feedbacks_; }
    const std::set<Relation>& queried() const { return queried_; }
    bool allow_repeat_queries() const { return allow_repeat_; }
    Feature feature_of(std::size_t t, Relation r) const;

    /// Self-normalised weights; sums to 1.
    std::vector<double> normalized_weights() const;
    /// 1 / sum w^2 of the normalised weights.
    double effective_sample_size() const;

    /// Weighted frequency of each feature at r.
    Simplex marginal(Relation r) const;
    std::vector<Simplex> marginals() const;

    /// Self-normalised importance estimate of E_q[h].
    double expectation(const std::function<double(const BeliefSample&)>& h) const;
    /// Estimate and its Monte Carlo standard error.
    std::pair<double, double> expectation_with_error(const std::function<double(const BeliefSample&)>& h) const;

    std::vector<Relation> unqueried() const;

    /// Applies a feedback in place (see update_belief).
    void apply(Relation r, int answer, double reliability);
    /// Applies a recorded feedback, reusing its prior snapshot.
    void apply_record(const FeedbackRecord& fb);

private:
    int n_ = 0;
    std::vector<BeliefSample> samples_;
    std::vector<std::vector<Feature>> features_;
    std::vector<double> log_weights_;
    std::vector<FeedbackRecord> feedbacks_;
    std::set<Relation> queried_;
    bool allow_repeat_ = false;
};

/// Marginals at every relation, indexed by pair_index.
inline std::vector<Simplex> marginal_features(const BeliefState& b) { return b.marginals(); }

/// Snapshots the current marginal at r as the prior, then multiplies every
/// sample's weight by its feedback factor. Throws PreconditionError for a
/// repeated relation unless repeats are enabled.
BeliefState update_belief(const BeliefState& belief, Relation r, int answer, double reliability);

/// Posterior predictive of the expert's answer at r.
Simplex predictive(const BeliefState& belief, Relation r, double reliability);

struct AcquisitionValue {
    double value = 0.0;
    /// Smallest effective sample size among the hypothetical updates.
    double min_ess = 0.0;
    bool low_ess = false;
};

/// Negative expected cross-entropy between the hypothetically updated belief
/// and the current one, estimated on the samples with log p_theta replaced by
/// log R (the log-partition term is constant and dropped).
AcquisitionValue acquisition(const BeliefState& belief, Relation r, double reliability);

/// Argmax of the acquisition over unqueried relations (lexicographic ties);
/// nullopt once every relation has been asked.
std::optional<Relation> select_query(const BeliefState& belief, double reliability);

/// Truthful with probability pi, otherwise uniform over the three wrong features.
int simulated_expert(const AncestralGraph& truth, Relation r, double reliability, std::uint64_t seed);

enum class Strategy { CrossEntropy, Random };
Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

struct TraceStep {
    int step = 0;
    std::optional<Relation> query;
    std::optional<int> answer;
    double expected_shd = 0.0;  // NaN without a registered truth
    double expected_bic = 0.0;
    double ess = 0.0;
};

nlohmann::json trace_step_to_json(const TraceStep& s);

using AnswerFn = std::function<int(Relation)>;

/// Runs up to `budget` query/answer rounds. With `truth` and no `answer_fn`
/// the simulated expert answers, seeded per relation from `seed` so every
/// strategy sees the same answer for the same relation. Step 0 holds the
/// initial expectations.
std::vector<TraceStep> run_loop(BeliefState belief, const AncestralGraph* truth, double reliability,
                                Strategy strategy, int budget, std::uint64_t seed, const AnswerFn& answer_fn = {});

}  // namespace agfn
