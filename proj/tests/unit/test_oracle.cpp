#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "agfn/error.hpp"
#include "agfn/oracle.hpp"
#include "agfn/scm.hpp"
#include "helpers.hpp"

using namespace agfn;
using agfn::test::make_graph;

namespace {

// log R values giving p = (0.1, 0.2, 0.3, 0.4) on the four 2-node graphs in
// feature order none, ->, <-, <->.
ExactSpace two_node_space() {
    std::vector<AncestralGraph> graphs;
    std::vector<double> scores;
    const double p[4] = {0.1, 0.2, 0.3, 0.4};
    for (int f = 1; f <= 4; ++f) {
        graphs.push_back(AncestralGraph(2).with_feature({0, 1}, static_cast<Feature>(f)));
        scores.push_back(-std::log(p[f - 1]));  // mu = 0, sigma = 1: log R = -U
    }
    return exact_distribution(graphs, scores, RewardSpec{0.0, 1.0, 1.0});
}

}  // namespace

TEST_CASE("enumeration counts") {
    CHECK(enumerate_ags(1).size() == 1);
    CHECK(enumerate_ags(2).size() == 4);
    // Frozen from tests/oracles/count_ancestral.py.
    CHECK(enumerate_ags(3).size() == 56);
    CHECK(enumerate_ags(4).size() == 2504);
    CHECK_THROWS_AS(enumerate_ags(5), PreconditionError);
    CHECK_THROWS_AS(enumerate_ags(0), PreconditionError);
}

TEST_CASE("enumeration is duplicate-free and check-independent") {
    for (int n = 1; n <= 4; ++n) {
        const auto a = enumerate_ags(n, AncestralityCheck::Reachability);
        const auto b = enumerate_ags(n, AncestralityCheck::Algebraic);
        CHECK(a == b);
        std::set<std::string> keys;
        for (const auto& g : a) keys.insert(g.key());
        CHECK(keys.size() == a.size());
    }
}

TEST_CASE("exact distribution") {
    auto graphs = enumerate_ags(3);
    const ExactSpace flat = exact_distribution(graphs, std::vector<double>(graphs.size(), 7.0), RewardSpec{1.0, 2.0, 1.0});
    for (double p : flat.probs) CHECK(p == doctest::Approx(1.0 / 56).epsilon(1e-12));

    const auto data = sample_dataset(random_parameters(preset("fig1"), 1), 300, 1);
    Scorer scorer(SampleMoments::from(data));
    const auto space = exact_distribution(scorer, RewardSpec{4000.0, 50.0, 1.0});
    double total = 0.0;
    for (double p : space.probs) total += p;
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(space.size() == 56);
    CHECK(space.index_of(preset("fig1")) < space.size());
    CHECK(space.index_of(make_graph(3, {{0, 1, 2}, {1, 2, 2}, {0, 2, 3}})) == space.size());

    // Marginals by summation against uniform-weight estimates from exact draws.
    const auto exact = exact_marginals(space, space.probs);
    const int draws = 20000;
    const auto samples = sample_exact(space, space.probs, draws, 3);
    std::vector<double> uniform(space.size(), 0.0);
    for (const auto& s : samples) uniform[space.index_of(s.graph)] += 1.0 / draws;
    const auto est = exact_marginals(space, uniform);
    for (std::size_t p = 0; p < exact.size(); ++p) {
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double se = std::sqrt(exact[p][k] * (1 - exact[p][k]) / draws);
            CHECK(std::abs(est[p][k] - exact[p][k]) <= 3.0 * se + 1e-12);
            sum += exact[p][k];
        }
        CHECK(sum == doctest::Approx(1.0));
    }
}

TEST_CASE("exact posterior") {
    const auto space = two_node_space();
    for (int f = 0; f < 4; ++f) CHECK(space.probs[f] == doctest::Approx(0.1 * (f + 1)).epsilon(1e-12));

    CHECK(exact_posterior(space, {}) == space.probs);

    const FeedbackRecord noop{{0, 1}, 3, 0.25, {0.1, 0.2, 0.3, 0.4}};
    const auto same = exact_posterior(space, std::vector<FeedbackRecord>{noop});
    for (int f = 0; f < 4; ++f) CHECK(same[f] == doctest::Approx(space.probs[f]).epsilon(1e-12));

    // Answer "0 -> 1" at pi = 0.9: q ∝ p .* (1/30, 9/10, 1/30, 1/30) = (1, 54, 3, 4) / 62.
    const FeedbackRecord fb{{0, 1}, 2, 0.9, {0.1, 0.2, 0.3, 0.4}};
    const auto q = exact_posterior(space, std::vector<FeedbackRecord>{fb});
    const double want[4] = {1.0 / 62, 54.0 / 62, 3.0 / 62, 4.0 / 62};
    for (int f = 0; f < 4; ++f) CHECK(q[f] == doctest::Approx(want[f]).epsilon(1e-12));
}

TEST_CASE("perfect answers on every relation pin the graph") {
    const auto data = sample_dataset(random_parameters(preset("fig1"), 2), 300, 2);
    Scorer scorer(SampleMoments::from(data));
    const auto space = exact_distribution(scorer, RewardSpec{4000.0, 50.0, 1.0});
    const auto truth = make_graph(3, {{0, 2, 3}, {1, 2, 4}});
    std::vector<FeedbackRecord> fbs;
    std::vector<double> probs = space.probs;
    for (const auto& r : all_relations(3)) {
        const auto m = exact_marginals(space, probs)[static_cast<std::size_t>(pair_index(3, r))];
        fbs.push_back({r, static_cast<int>(truth.feature(r)), 1.0, m});
        probs = exact_posterior(space, fbs);
    }
    CHECK(probs[space.index_of(truth)] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("total variation and space dump") {
    const auto space = two_node_space();
    std::vector<AncestralGraph> draws;
    for (int f = 0; f < 4; ++f)
        for (int k = 0; k <= f; ++k) draws.push_back(space.graphs[f]);  // 1, 2, 3, 4 copies
    CHECK(total_variation(space, space.probs, draws) == doctest::Approx(0.0).epsilon(1e-12));
    const std::vector<AncestralGraph> one{space.graphs[0]};
    CHECK(total_variation(space, space.probs, one) == doctest::Approx(0.9));

    std::ostringstream out;
    write_space_jsonl(out, space, RewardSpec{0.0, 1.0, 1.0});
    std::istringstream in(out.str());
    std::string line;
    int lines = 0;
    double psum = 0.0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("graph"));
        CHECK(j.at("R").get<double>() == doctest::Approx(std::exp(-j.at("U").get<double>())));
        psum += j.at("p").get<double>();
        ++lines;
    }
    CHECK(lines == 4);
    CHECK(psum == doctest::Approx(1.0));
}
