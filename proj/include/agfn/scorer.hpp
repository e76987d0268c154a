#pragma once

#include <cstddef>
#include <list>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "agfn/graph.hpp"
#include "agfn/scm.hpp"

namespace agfn {

/// Sufficient statistics of a dataset for Gaussian likelihoods: the sample
/// size and the column-centred covariance with divisor m.
struct SampleMoments {
    int m = 0;
    Eigen::MatrixXd cov;

    int n() const { return static_cast<int>(cov.rows()); }
    static SampleMoments from(const Dataset& data);
};

nlohmann::json moments_to_json(const SampleMoments& s);
SampleMoments moments_from_json(const nlohmann::json& j);

struct RicfOptions {
    double tol = 1e-6;
    int max_iter = 200;
};

struct FitResult {
    Eigen::MatrixXd B;
    Eigen::MatrixXd Omega;
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
    /// A ridge term had to be added to a singular regression design.
    bool regularized = false;
    /// Log-likelihood after each full sweep; non-decreasing up to rounding.
    std::vector<double> loglik_trace;
};

/// Gaussian log-likelihood of (B, Omega) given centred moments.
double gaussian_loglik(const Eigen::MatrixXd& B, const Eigen::MatrixXd& Omega, const SampleMoments& s);

/// Residual iterative conditional fitting: block-coordinate maximum
/// likelihood for the linear Gaussian model of an ancestral graph.
///
/// Each step regresses one node on its parents and on the pseudo-variables
/// Omega_{-i,-i}^{-1} eps_{-i} restricted to its spouses, which updates row i
/// of B and row/column i of Omega while holding the rest fixed. Sweeps repeat
/// until the largest parameter change drops below `tol`.
FitResult ricf_fit(const AncestralGraph& g, const SampleMoments& s, const RicfOptions& opts = {});

/// Extended BIC penalty |E| log m + 2 |E| log n.
double bic_penalty(int edges, int m, int n);
/// U(G) = -2 loglik + |E| log m + 2 |E| log n. Lower is better.
double bic_score(const AncestralGraph& g, const SampleMoments& s, const RicfOptions& opts = {});

/// Constants of the reward exp((mu - U) / (T sigma)).
struct RewardSpec {
    double mu = 0.0;
    double sigma = 1.0;
    double temperature = 1.0;

    void validate() const;
};

nlohmann::json reward_spec_to_json(const RewardSpec& r);
RewardSpec reward_spec_from_json(const nlohmann::json& j);

/// Mean and population standard deviation of the scores (sigma floored at 1e-6).
RewardSpec calibrate_reward(std::span<const double> scores, double temperature = 1.0);

/// (mu - u) / (T sigma), clamped to [-500, 500].
double log_reward(double u, const RewardSpec& spec);
double reward(double u, const RewardSpec& spec);

/// Bounded LRU cache of BIC scores keyed by canonical graph JSON; safe for
/// concurrent use.
class ScoreCache {
public:
    explicit ScoreCache(std::size_t capacity = 1'000'000) : capacity_(capacity) {}

    std::optional<double> find(const std::string& key);
    void insert(const std::string& key, double score);
    std::size_t size() const;
    std::size_t hits() const;
    std::size_t misses() const;

private:
    using Entry = std::pair<std::string, double>;
    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::list<Entry> order_;
    std::unordered_map<std::string, std::list<Entry>::iterator> index_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

/// BIC scoring of graphs against fixed data, memoised through a ScoreCache.
class Scorer {
public:
    explicit Scorer(SampleMoments moments, RicfOptions opts = {}, std::size_t cache_capacity = 1'000'000);

    double score(const AncestralGraph& g);
    const SampleMoments& moments() const { return moments_; }
    const ScoreCache& cache() const { return cache_; }

private:
    SampleMoments moments_;
    RicfOptions opts_;
    ScoreCache cache_;
};

}  // namespace agfn
