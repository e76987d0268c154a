#include "agfn/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <unordered_map>

#include "agfn/error.hpp"

namespace agfn {

namespace {

double logsumexp(std::span<const double> x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

std::vector<double> normalize_log(std::span<const double> lw, double* log_z = nullptr) {
    const double z = logsumexp(lw);
    if (!std::isfinite(z)) throw DegenerateEvidenceError("target distribution has no mass");
    std::vector<double> p(lw.size());
    for (std::size_t i = 0; i < lw.size(); ++i) p[i] = std::exp(lw[i] - z);
    if (log_z) *log_z = z;
    return p;
}

}  // namespace

std::vector<AncestralGraph> enumerate_ags(int n, AncestralityCheck check) {
    if (n < 1 || n > kMaxExactNodes) throw PreconditionError("exact enumeration supports 1 to 4 nodes");
    const int pairs = pair_count(n);
    const auto rels = all_relations(n);
    std::vector<AncestralGraph> out;
    std::vector<int> digits(static_cast<std::size_t>(pairs), 0);
    const std::uint64_t total = std::uint64_t{1} << (2 * pairs);
    for (std::uint64_t code = 0; code < total; ++code) {
        AncestralGraph g(n);
        for (int p = 0; p < pairs; ++p) {
            const int f = static_cast<int>((code >> (2 * p)) & 3u) + 1;
            if (f != 1) g = g.with_feature(rels[static_cast<std::size_t>(p)], static_cast<Feature>(f));
        }
        const bool ok = check == AncestralityCheck::Reachability ? is_ancestral(g) : is_ancestral_algebraic(g);
        if (ok) out.push_back(g);
    }
    return out;
}

std::size_t ExactSpace::index_of(const AncestralGraph& g) const {
    const auto it = std::find(graphs.begin(), graphs.end(), g);
    return static_cast<std::size_t>(it - graphs.begin());
}

ExactSpace exact_distribution(std::vector<AncestralGraph> graphs, std::vector<double> scores, const RewardSpec& spec) {
    if (graphs.empty() || graphs.size() != scores.size()) throw PreconditionError("graphs and scores must align");
    ExactSpace s;
    s.n = graphs.front().n();
    s.graphs = std::move(graphs);
    s.scores = std::move(scores);
    s.log_rewards.reserve(s.scores.size());
    for (double u : s.scores) s.log_rewards.push_back(log_reward(u, spec));
    s.probs = normalize_log(s.log_rewards, &s.log_z);
    return s;
}

ExactSpace exact_distribution(Scorer& scorer, const RewardSpec& spec) {
    auto graphs = enumerate_ags(scorer.moments().n());
    std::vector<double> scores;
    scores.reserve(graphs.size());
    for (const auto& g : graphs) scores.push_back(scorer.score(g));
    return exact_distribution(std::move(graphs), std::move(scores), spec);
}

std::vector<double> exact_posterior(const ExactSpace& space, std::span<const FeedbackRecord> feedbacks) {
    std::vector<double> lw = space.log_rewards;
    for (const auto& fb : feedbacks) {
        const auto p = static_cast<std::size_t>(pair_index(space.n, fb.relation));
        for (std::size_t i = 0; i < lw.size(); ++i) lw[i] += feedback_log_factor(fb, space.graphs[i].features()[p]);
    }
    return normalize_log(lw);
}

std::vector<Simplex> exact_marginals(const ExactSpace& space, std::span<const double> probs) {
    std::vector<Simplex> out(static_cast<std::size_t>(pair_count(space.n)), Simplex{});
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto f = space.graphs[i].features();
        for (std::size_t p = 0; p < out.size(); ++p) out[p][static_cast<int>(f[p]) - 1] += probs[i];
    }
    return out;
}

double exact_expectation(const ExactSpace& space, std::span<const double> probs,
                         const std::function<double(const AncestralGraph&, double)>& h) {
    double e = 0.0;
    for (std::size_t i = 0; i < space.size(); ++i) e += probs[i] * h(space.graphs[i], space.scores[i]);
    return e;
}

std::vector<BeliefSample> sample_exact(const ExactSpace& space, std::span<const double> probs, int count,
                                       std::uint64_t seed) {
    if (count < 1) throw PreconditionError("sample count must be positive");
    std::mt19937_64 rng(seed);
    std::discrete_distribution<std::size_t> d(probs.begin(), probs.end());
    std::vector<BeliefSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        const std::size_t i = d(rng);
        out.push_back({space.graphs[i], space.scores[i], space.log_rewards[i]});
    }
    return out;
}

double total_variation(const ExactSpace& space, std::span<const double> probs,
                       std::span<const AncestralGraph> graphs) {
    if (graphs.empty()) throw PreconditionError("empirical sample is empty");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < space.size(); ++i) index.emplace(space.graphs[i].key(), i);
    std::vector<double> counts(space.size(), 0.0);
    double outside = 0.0;
    const double unit = 1.0 / static_cast<double>(graphs.size());
    for (const auto& g : graphs) {
        const auto it = index.find(g.key());
        if (it == index.end()) outside += unit;
        else counts[it->second] += unit;
    }
    double tv = outside;
    for (std::size_t i = 0; i < space.size(); ++i) tv += std::abs(counts[i] - probs[i]);
    return 0.5 * tv;
}

void write_space_jsonl(std::ostream& out, const ExactSpace& space, const RewardSpec& spec) {
    for (std::size_t i = 0; i < space.size(); ++i) {
        nlohmann::json j{{"graph", to_json(space.graphs[i])},
                         {"U", space.scores[i]},
                         {"R", reward(space.scores[i], spec)},
                         {"p", space.probs[i]}};
        out << j.dump() << '\n';
    }
}

}  // namespace agfn
