#include "agfn/scorer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "agfn/error.hpp"
#include "agfn/log.hpp"

namespace agfn {

namespace {

constexpr double kSigmaFloor = 1e-6;
constexpr double kExponentClamp = 500.0;
constexpr double kMonotoneSlack = 1e-8;

std::vector<int> bits(std::uint32_t mask) {
    std::vector<int> out;
    for (; mask; mask &= mask - 1) out.push_back(std::countr_zero(mask));
    return out;
}

}  // namespace

SampleMoments SampleMoments::from(const Dataset& data) {
    if (data.rows() < 2) throw PreconditionError("moments need at least 2 samples");
    const Eigen::RowVectorXd mean = data.values.colwise().mean();
    const Eigen::MatrixXd centred = data.values.rowwise() - mean;
    SampleMoments s;
    s.m = data.rows();
    s.cov = (centred.transpose() * centred) / static_cast<double>(s.m);
    return s;
}

nlohmann::json moments_to_json(const SampleMoments& s) {
    nlohmann::json cov = nlohmann::json::array();
    for (int i = 0; i < s.n(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < s.n(); ++j) row.push_back(s.cov(i, j));
        cov.push_back(std::move(row));
    }
    return {{"m", s.m}, {"cov", std::move(cov)}};
}

SampleMoments moments_from_json(const nlohmann::json& j) {
    try {
        SampleMoments s;
        s.m = j.at("m").get<int>();
        const auto& cov = j.at("cov");
        const auto n = static_cast<Eigen::Index>(cov.size());
        s.cov.resize(n, n);
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = 0; c < n; ++c) s.cov(r, c) = cov.at(r).at(c).get<double>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed moments JSON: ") + e.what());
    }
}

double gaussian_loglik(const Eigen::MatrixXd& B, const Eigen::MatrixXd& Omega, const SampleMoments& s) {
    const int n = s.n();
    const Eigen::MatrixXd ib = Eigen::MatrixXd::Identity(n, n) - B;
    Eigen::LLT<Eigen::MatrixXd> llt(Omega);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd L = llt.matrixL();
    const double logdet_omega = 2.0 * L.diagonal().array().log().sum();
    const double logdet_ib = std::log(std::abs(ib.determinant()));
    // tr((I-B)^T Omega^{-1} (I-B) S)
    const Eigen::MatrixXd resid_cov = ib * s.cov * ib.transpose();
    const double trace = llt.solve(resid_cov).trace();
    return -0.5 * s.m * (n * std::log(2.0 * std::numbers::pi) + logdet_omega - 2.0 * logdet_ib + trace);
}

FitResult ricf_fit(const AncestralGraph& g, const SampleMoments& s, const RicfOptions& opts) {
    const int n = g.n();
    if (s.n() != n) throw StructuralError("graph and data have different numbers of variables");
    if (!is_ancestral(g)) throw PreconditionError("ricf_fit requires an ancestral graph");

    FitResult fit;
    fit.B = Eigen::MatrixXd::Zero(n, n);
    fit.Omega = s.cov.diagonal().asDiagonal();

    std::vector<std::vector<int>> parents(n), spouses(n);
    bool has_edges = false;
    for (int i = 0; i < n; ++i) {
        parents[i] = bits(g.parents_mask(i));
        spouses[i] = bits(g.spouses_mask(i));
        has_edges |= !parents[i].empty() || !spouses[i].empty();
    }

    double prev_ll = gaussian_loglik(fit.B, fit.Omega, s);
    if (!has_edges) {
        fit.loglik = prev_ll;
        fit.converged = true;
        fit.loglik_trace.push_back(prev_ll);
        return fit;
    }

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        double max_change = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto& pa = parents[i];
            const auto& sp = spouses[i];
            const int np = static_cast<int>(pa.size());
            const int ns = static_cast<int>(sp.size());
            const int k = np + ns;
            if (k == 0) {
                max_change = std::max(max_change, std::abs(fit.Omega(i, i) - s.cov(i, i)));
                fit.Omega(i, i) = s.cov(i, i);
                continue;
            }

            // Regressors as linear maps of V: parents directly, spouses via
            // the pseudo-variables Z = Omega_{-i,-i}^{-1} (I - B)_{-i,:} V.
            Eigen::MatrixXd design(k, n);
            design.setZero();
            for (int a = 0; a < np; ++a) design(a, pa[a]) = 1.0;

            std::vector<int> others;
            for (int j = 0; j < n; ++j)
                if (j != i) others.push_back(j);
            Eigen::MatrixXd omega_inv_sp;  // rows of Omega_{-i,-i}^{-1} for spouses, restricted to sp columns
            if (ns > 0) {
                const int no = n - 1;
                Eigen::MatrixXd omega_oo(no, no);
                Eigen::MatrixXd resid_rows(no, n);
                const Eigen::MatrixXd ib = Eigen::MatrixXd::Identity(n, n) - fit.B;
                for (int a = 0; a < no; ++a) {
                    resid_rows.row(a) = ib.row(others[a]);
                    for (int b = 0; b < no; ++b) omega_oo(a, b) = fit.Omega(others[a], others[b]);
                }
                const Eigen::MatrixXd omega_oo_inv = omega_oo.llt().solve(Eigen::MatrixXd::Identity(no, no));
                omega_inv_sp.resize(ns, ns);
                for (int a = 0; a < ns; ++a) {
                    const int pos = static_cast<int>(std::find(others.begin(), others.end(), sp[a]) - others.begin());
                    design.row(np + a) = omega_oo_inv.row(pos) * resid_rows;
                    for (int b = 0; b < ns; ++b) {
                        const int pos_b =
                            static_cast<int>(std::find(others.begin(), others.end(), sp[b]) - others.begin());
                        omega_inv_sp(a, b) = omega_oo_inv(pos, pos_b);
                    }
                }
            }

            const Eigen::MatrixXd design_gram = design * s.cov * design.transpose();
            Eigen::MatrixXd gram = design_gram;
            const Eigen::VectorXd cross = design * s.cov.col(i);
            Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
            const double scale = std::max(gram.diagonal().maxCoeff(), 1e-300);
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
                ldlt.vectorD().minCoeff() <= 1e-12 * scale) {
                gram.diagonal().array() += 1e-8 * scale;
                ldlt.compute(gram);
                fit.regularized = true;
            }
            const Eigen::VectorXd coef = ldlt.solve(cross);

            for (int a = 0; a < np; ++a) {
                max_change = std::max(max_change, std::abs(fit.B(i, pa[a]) - coef(a)));
                fit.B(i, pa[a]) = coef(a);
            }
            const double resid_var = std::max(s.cov(i, i) - 2.0 * coef.dot(cross) + coef.dot(design_gram * coef), 1e-12);
            double explained = 0.0;
            if (ns > 0) {
                const Eigen::VectorXd gamma = coef.tail(ns);
                for (int a = 0; a < ns; ++a) {
                    max_change = std::max(max_change, std::abs(fit.Omega(i, sp[a]) - gamma(a)));
                    fit.Omega(i, sp[a]) = gamma(a);
                    fit.Omega(sp[a], i) = gamma(a);
                }
                explained = gamma.dot(omega_inv_sp * gamma);
            }
            const double omega_ii = resid_var + explained;
            max_change = std::max(max_change, std::abs(fit.Omega(i, i) - omega_ii));
            fit.Omega(i, i) = omega_ii;
        }

        const double ll = gaussian_loglik(fit.B, fit.Omega, s);
        fit.loglik_trace.push_back(ll);
        fit.iterations = iter;
        if (!fit.regularized && ll < prev_ll - kMonotoneSlack * std::max(1.0, std::abs(prev_ll))) {
            warn("RICF log-likelihood decreased during a sweep");
        }
        prev_ll = ll;
        if (max_change < opts.tol) {
            fit.converged = true;
            break;
        }
    }
    fit.loglik = prev_ll;
    if (!std::isfinite(fit.loglik)) fit.converged = false;
    return fit;
}

double bic_penalty(int edges, int m, int n) {
    return edges * std::log(static_cast<double>(m)) + 2.0 * edges * std::log(static_cast<double>(n));
}

double bic_score(const AncestralGraph& g, const SampleMoments& s, const RicfOptions& opts) {
    const FitResult fit = ricf_fit(g, s, opts);
    return -2.0 * fit.loglik + bic_penalty(g.edge_count(), s.m, s.n());
}

void RewardSpec::validate() const {
    if (!(sigma > 0.0) || !(temperature > 0.0) || !std::isfinite(mu)) {
        throw PreconditionError("reward spec needs finite mu, sigma > 0 and temperature > 0");
    }
}

nlohmann::json reward_spec_to_json(const RewardSpec& r) {
    return {{"mu", r.mu}, {"sigma", r.sigma}, {"temperature", r.temperature}};
}

RewardSpec reward_spec_from_json(const nlohmann::json& j) {
    try {
        RewardSpec r{j.at("mu").get<double>(), j.at("sigma").get<double>(), j.value("temperature", 1.0)};
        r.validate();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed reward spec: ") + e.what());
    }
}

RewardSpec calibrate_reward(std::span<const double> scores, double temperature) {
    if (scores.size() < 2) throw PreconditionError("reward calibration needs at least 2 scores");
    double mean = 0.0;
    for (double u : scores) mean += u;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double u : scores) var += (u - mean) * (u - mean);
    var /= static_cast<double>(scores.size());
    double sigma = std::sqrt(var);
    if (!(sigma >= kSigmaFloor)) {
        warn("calibration scores have (near) zero variance; flooring sigma at 1e-6");
        sigma = kSigmaFloor;
    }
    RewardSpec spec{mean, sigma, temperature};
    spec.validate();
    return spec;
}

double log_reward(double u, const RewardSpec& spec) {
    const double e = (spec.mu - u) / (spec.temperature * spec.sigma);
    if (e > kExponentClamp || e < -kExponentClamp) {
        warn("reward exponent clamped to +-500");
        return std::clamp(e, -kExponentClamp, kExponentClamp);
    }
    return e;
}

double reward(double u, const RewardSpec& spec) { return std::exp(log_reward(u, spec)); }

std::optional<double> ScoreCache::find(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) {
        ++misses_;
        return std::nullopt;
    }
    ++hits_;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
}

void ScoreCache::insert(const std::string& key, double score) {
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) {
        it->second->second = score;
        order_.splice(order_.begin(), order_, it->second);
        return;
    }
    order_.emplace_front(key, score);
    index_[key] = order_.begin();
    while (order_.size() > capacity_) {
        index_.erase(order_.back().first);
        order_.pop_back();
    }
}

std::size_t ScoreCache::size() const {
    std::lock_guard lock(mutex_);
    return order_.size();
}

std::size_t ScoreCache::hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
}

std::size_t ScoreCache::misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
}

Scorer::Scorer(SampleMoments moments, RicfOptions opts, std::size_t cache_capacity)
    : moments_(std::move(moments)), opts_(opts), cache_(cache_capacity) {}

double Scorer::score(const AncestralGraph& g) {
    const std::string key = canonical_json(g);
    if (auto hit = cache_.find(key)) return *hit;
    const double u = bic_score(g, moments_, opts_);
    cache_.insert(key, u);
    return u;
}

}  // namespace agfn
