#include "agfn/hitl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "agfn/error.hpp"
#include "agfn/log.hpp"

namespace agfn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLowEss = 10.0;

void check_answer(int answer) {
    if (answer < 1 || answer > kNumFeatures) throw PreconditionError("answers must be in 1..4");
}

void check_reliability(double pi) {
    if (!(pi >= 0.0 && pi <= 1.0)) throw PreconditionError("reliability must lie in [0, 1]");
}

void check_simplex(const Simplex& s) {
    double total = 0.0;
    for (double x : s) {
        if (!(x >= 0.0)) throw PreconditionError("simplex entries must be non-negative");
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw PreconditionError("simplex must sum to 1");
}

double eta(const Simplex& prior, int answer, double pi) {
    const double rho_f = prior[answer - 1];
    return rho_f * pi + (1.0 - pi) / 3.0 * (1.0 - rho_f);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Normalised weights of a log-weight vector; -inf entries get weight 0.
std::vector<double> normalize(const std::vector<double>& lw) {
    double mx = kNegInf;
    for (double x : lw) mx = std::max(mx, x);
    std::vector<double> w(lw.size(), 0.0);
    if (mx == kNegInf) throw DegenerateEvidenceError("every sample has zero weight");
    double total = 0.0;
    for (std::size_t t = 0; t < lw.size(); ++t) {
        w[t] = lw[t] == kNegInf ? 0.0 : std::exp(lw[t] - mx);
        total += w[t];
    }
    for (double& x : w) x /= total;
    return w;
}

double ess_of(const std::vector<double>& w) {
    double s2 = 0.0;
    for (double x : w) s2 += x * x;
    return 1.0 / s2;
}

}  // namespace

double answer_likelihood(int answer, int truth, double reliability) {
    check_answer(answer);
    check_answer(truth);
    check_reliability(reliability);
    return answer == truth ? reliability : (1.0 - reliability) / 3.0;
}

Simplex feature_posterior(const Simplex& prior, int answer, double reliability) {
    check_simplex(prior);
    check_answer(answer);
    check_reliability(reliability);
    const double e = eta(prior, answer, reliability);
    if (!(e > 0.0)) throw DegenerateEvidenceError("answer has zero probability under the prior");
    Simplex post{};
    for (int k = 0; k < kNumFeatures; ++k) post[k] = prior[k] / e * answer_likelihood(answer, k + 1, reliability);
    return post;
}

nlohmann::json feedback_to_json(const FeedbackRecord& f) {
    return {{"relation", {f.relation.u, f.relation.v}},
            {"answer", f.answer},
            {"reliability", f.reliability},
            {"prior", f.prior}};
}

FeedbackRecord feedback_from_json(const nlohmann::json& j) {
    try {
        FeedbackRecord f;
        f.relation = {j.at("relation").at(0).get<int>(), j.at("relation").at(1).get<int>()};
        f.answer = j.at("answer").get<int>();
        f.reliability = j.at("reliability").get<double>();
        f.prior = j.at("prior").get<Simplex>();
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed feedback record: ") + e.what());
    }
}

double feedback_log_factor(const FeedbackRecord& fb, Feature feature) {
    const double lik = answer_likelihood(fb.answer, static_cast<int>(feature), fb.reliability);
    if (lik == 0.0) return kNegInf;
    const double e = eta(fb.prior, fb.answer, fb.reliability);
    if (!(e > 0.0)) throw DegenerateEvidenceError("answer has zero probability under the prior");
    return std::log(lik) - std::log(e);
}

BeliefState::BeliefState(std::vector<BeliefSample> samples, bool allow_repeat_queries)
    : samples_(std::move(samples)), allow_repeat_(allow_repeat_queries) {
    if (samples_.empty()) throw PreconditionError("a belief needs at least one sample");
    n_ = samples_.front().graph.n();
    features_.reserve(samples_.size());
    for (const auto& s : samples_) {
        if (s.graph.n() != n_) throw StructuralError("belief samples must share a node count");
        if (!std::isfinite(s.log_reward) || !std::isfinite(s.score)) {
            throw PreconditionError("belief samples need finite scores and rewards");
        }
        features_.push_back(s.graph.features());
    }
    log_weights_.assign(samples_.size(), 0.0);
}

Feature BeliefState::feature_of(std::size_t t, Relation r) const {
    return features_[t][static_cast<std::size_t>(pair_index(n_, r))];
}

std::vector<double> BeliefState::normalized_weights() const { return normalize(log_weights_); }

double BeliefState::effective_sample_size() const { return ess_of(normalized_weights()); }

Simplex BeliefState::marginal(Relation r) const {
    const auto p = static_cast<std::size_t>(pair_index(n_, r));
    const auto w = normalized_weights();
    Simplex m{};
    for (std::size_t t = 0; t < w.size(); ++t) m[static_cast<int>(features_[t][p]) - 1] += w[t];
    return m;
}

std::vector<Simplex> BeliefState::marginals() const {
    const auto w = normalized_weights();
    std::vector<Simplex> out(static_cast<std::size_t>(pair_count(n_)), Simplex{});
    for (std::size_t t = 0; t < w.size(); ++t)
        for (std::size_t p = 0; p < out.size(); ++p) out[p][static_cast<int>(features_[t][p]) - 1] += w[t];
    return out;
}

double BeliefState::expectation(const std::function<double(const BeliefSample&)>& h) const {
    return expectation_with_error(h).first;
}

std::pair<double, double> BeliefState::expectation_with_error(
    const std::function<double(const BeliefSample&)>& h) const {
    const auto w = normalized_weights();
    std::vector<double> values(samples_.size());
    double est = 0.0;
    for (std::size_t t = 0; t < w.size(); ++t) {
        values[t] = h(samples_[t]);
        est += w[t] * values[t];
    }
    double var = 0.0;
    for (std::size_t t = 0; t < w.size(); ++t) var += w[t] * w[t] * (values[t] - est) * (values[t] - est);
    return {est, std::sqrt(var)};
}

std::vector<Relation> BeliefState::unqueried() const {
    std::vector<Relation> out;
    for (const auto& r : all_relations(n_))
        if (allow_repeat_ || !queried_.contains(r)) out.push_back(r);
    return out;
}

void BeliefState::apply(Relation r, int answer, double reliability) {
    if (!allow_repeat_ && queried_.contains(r)) throw PreconditionError("relation has already been queried");
    FeedbackRecord fb{r, answer, reliability, marginal(r)};
    // Validates the answer and rejects impossible evidence before mutating.
    (void)feature_posterior(fb.prior, answer, reliability);
    apply_record(fb);
}

void BeliefState::apply_record(const FeedbackRecord& fb) {
    const auto p = static_cast<std::size_t>(pair_index(n_, fb.relation));
    std::vector<double> next = log_weights_;
    for (std::size_t t = 0; t < next.size(); ++t) next[t] += feedback_log_factor(fb, features_[t][p]);
    (void)normalize(next);
    log_weights_ = std::move(next);
    feedbacks_.push_back(fb);
    queried_.insert(fb.relation);
    const double ess = effective_sample_size();
    if (ess < kLowEss) warn("effective sample size dropped to " + std::to_string(ess));
}

BeliefState update_belief(const BeliefState& belief, Relation r, int answer, double reliability) {
    BeliefState next = belief;
    next.apply(r, answer, reliability);
    return next;
}

Simplex predictive(const BeliefState& belief, Relation r, double reliability) {
    check_reliability(reliability);
    const Simplex m = belief.marginal(r);
    Simplex out{};
    for (int j = 1; j <= kNumFeatures; ++j)
        for (int k = 1; k <= kNumFeatures; ++k) out[j - 1] += m[k - 1] * answer_likelihood(j, k, reliability);
    return out;
}

AcquisitionValue acquisition(const BeliefState& belief, Relation r, double reliability) {
    check_reliability(reliability);
    const Simplex m = belief.marginal(r);
    const Simplex pred = predictive(belief, r, reliability);
    const auto& lw = belief.log_weights();
    const auto& samples = belief.samples();

    AcquisitionValue out;
    out.min_ess = std::numeric_limits<double>::infinity();
    double expected_h = 0.0;
    std::vector<double> hyp(lw.size());
    for (int j = 1; j <= kNumFeatures; ++j) {
        if (pred[j - 1] <= 0.0) continue;
        // Hypothetical belief: current weights times the feature posterior
        // p(omega_r | f_r = j). Unlike a committed update this keeps the
        // prior term, otherwise the predictive average of the hypothetical
        // beliefs is the current belief and every relation scores the same.
        const Simplex post = feature_posterior(m, j, reliability);
        for (std::size_t t = 0; t < lw.size(); ++t) {
            const double p = post[static_cast<int>(belief.feature_of(t, r)) - 1];
            hyp[t] = p > 0.0 ? lw[t] + std::log(p) : kNegInf;
        }
        const auto w = normalize(hyp);
        // Cross-entropy against the current belief, whose log-density is
        // log R + current log-weight up to the dropped log-partition.
        double h = 0.0;
        for (std::size_t t = 0; t < w.size(); ++t) {
            if (w[t] == 0.0) continue;
            h -= w[t] * (samples[t].log_reward + lw[t]);
        }
        expected_h += pred[j - 1] * h;
        out.min_ess = std::min(out.min_ess, ess_of(w));
    }
    out.value = -expected_h;
    out.low_ess = out.min_ess < kLowEss;
    return out;
}

std::optional<Relation> select_query(const BeliefState& belief, double reliability) {
    std::optional<Relation> best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (const auto& r : belief.unqueried()) {
        const double v = acquisition(belief, r, reliability).value;
        if (!best || v > best_value) {
            best = r;
            best_value = v;
        }
    }
    return best;
}

int simulated_expert(const AncestralGraph& truth, Relation r, double reliability, std::uint64_t seed) {
    check_reliability(reliability);
    const int real = static_cast<int>(truth.feature(r));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < reliability) return real;
    std::uniform_int_distribution<int> wrong(0, 2);
    int k = wrong(rng) + 1;
    if (k >= real) ++k;
    return k;
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "ce" || s == "cross_entropy") return Strategy::CrossEntropy;
    if (s == "random") return Strategy::Random;
    throw PreconditionError("unknown strategy '" + s + "' (expected ce or random)");
}

std::string to_string(Strategy s) { return s == Strategy::CrossEntropy ? "cross_entropy" : "random"; }

nlohmann::json trace_step_to_json(const TraceStep& s) {
    nlohmann::json j{{"step", s.step}, {"ess", s.ess}, {"expected_bic", s.expected_bic}};
    j["query"] = s.query ? nlohmann::json{s.query->u, s.query->v} : nlohmann::json(nullptr);
    j["answer"] = s.answer ? nlohmann::json(*s.answer) : nlohmann::json(nullptr);
    j["expected_shd"] = std::isfinite(s.expected_shd) ? nlohmann::json(s.expected_shd) : nlohmann::json(nullptr);
    return j;
}

std::vector<TraceStep> run_loop(BeliefState belief, const AncestralGraph* truth, double reliability,
                                Strategy strategy, int budget, std::uint64_t seed, const AnswerFn& answer_fn) {
    check_reliability(reliability);
    if (!truth && !answer_fn) throw PreconditionError("run_loop needs a true graph or an answer callback");
    if (truth && truth->n() != belief.n()) throw StructuralError("true graph size does not match the belief");
    if (budget < 0 || (!belief.allow_repeat_queries() && budget > pair_count(belief.n()))) {
        throw PreconditionError("budget must lie in [0, C(n, 2)]");
    }
    std::mt19937_64 pick(splitmix64(seed ^ 0x5EEDull));

    auto snapshot = [&](int step, std::optional<Relation> q, std::optional<int> a) {
        TraceStep s;
        s.step = step;
        s.query = q;
        s.answer = a;
        s.expected_bic = belief.expectation([](const BeliefSample& b) { return b.score; });
        s.expected_shd = truth ? belief.expectation([&](const BeliefSample& b) {
            return static_cast<double>(shd(b.graph, *truth));
        })
                               : std::numeric_limits<double>::quiet_NaN();
        s.ess = belief.effective_sample_size();
        return s;
    };

    std::vector<TraceStep> trace{snapshot(0, std::nullopt, std::nullopt)};
    for (int k = 1; k <= budget; ++k) {
        std::optional<Relation> r;
        if (strategy == Strategy::CrossEntropy) {
            r = select_query(belief, reliability);
        } else {
            const auto open = belief.unqueried();
            if (!open.empty()) {
                std::uniform_int_distribution<std::size_t> d(0, open.size() - 1);
                r = open[d(pick)];
            }
        }
        if (!r) break;
        const int answer = answer_fn ? answer_fn(*r)
                                     : simulated_expert(*truth, *r, reliability,
                                                        splitmix64(seed + 0x100000001B3ull *
                                                                              static_cast<std::uint64_t>(
                                                                                  pair_index(belief.n(), *r) + 1)));
        belief.apply(*r, answer, reliability);
        trace.push_back(snapshot(k, r, answer));
    }
    return trace;
}

}  // namespace agfn
