#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "agfn/error.hpp"
#include "agfn/graph.hpp"
#include "agfn/oracle.hpp"
#include "helpers.hpp"

using namespace agfn;
using agfn::test::make_graph;

namespace {

// Definition-based check that does not share code with the library: build
// the transitive closure by Floyd-Warshall on a dense boolean matrix.
bool ancestral_by_definition(int n, const std::vector<std::vector<int>>& dir, const std::vector<std::vector<int>>& bidir) {
    std::vector<std::vector<int>> reach = dir;  // reach[i][j]: j is an ancestor of i
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (reach[i][k] && reach[k][j]) reach[i][j] = 1;
    for (int i = 0; i < n; ++i)
        if (reach[i][i]) return false;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (bidir[i][j] && (reach[i][j] || reach[j][i])) return false;
    return true;
}

}  // namespace

TEST_CASE("ancestrality examples") {
    CHECK(is_ancestral(AncestralGraph(3)));
    CHECK(is_ancestral_algebraic(AncestralGraph(3)));
    CHECK(is_ancestral(make_graph(3, {{0, 1, 2}, {1, 2, 4}})));
    CHECK(is_ancestral_algebraic(make_graph(3, {{0, 1, 2}, {1, 2, 4}})));

    // 2-cycle and almost cycle on raw matrices.
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2), b = Eigen::MatrixXd::Zero(2, 2);
    d(1, 0) = 1;
    d(0, 1) = 1;
    CHECK_FALSE(is_ancestral_algebraic(d, b));
    d(0, 1) = 0;
    b(0, 1) = b(1, 0) = 1;
    CHECK_FALSE(is_ancestral_algebraic(d, b));
    CHECK_THROWS_AS(is_ancestral_algebraic(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(3, 3)), StructuralError);

    // Longer almost cycle: 0 -> 1 -> 2, 0 <-> 2.
    CHECK_FALSE(is_ancestral(make_graph(3, {{0, 1, 2}, {1, 2, 2}, {0, 2, 4}})));
    // Directed 3-cycle.
    CHECK_FALSE(is_ancestral(make_graph(3, {{0, 1, 2}, {1, 2, 2}, {0, 2, 3}})));
}

TEST_CASE("valid actions") {
    const auto empty2 = valid_actions(AncestralGraph(2));
    REQUIRE(empty2.size() == 4);
    CHECK(empty2.back().is_stop());
    CHECK(empty2[0] == Action::add({0, 1}, Feature::Forward));
    CHECK(empty2[1] == Action::add({0, 1}, Feature::Backward));
    CHECK(empty2[2] == Action::add({0, 1}, Feature::Bidirected));

    const auto full2 = valid_actions(make_graph(2, {{0, 1, 2}}));
    REQUIRE(full2.size() == 1);
    CHECK(full2[0].is_stop());

    // 0 -> 1 -> 2: only the (0, 2) pair is free; 2 -> 0 closes a cycle and
    // 0 <-> 2 an almost cycle, so only 0 -> 2 remains.
    const auto chain = valid_actions(make_graph(3, {{0, 1, 2}, {1, 2, 2}}));
    REQUIRE(chain.size() == 2);
    CHECK(chain[0] == Action::add({0, 2}, Feature::Forward));
    CHECK(chain[1].is_stop());

    CHECK(action_count(3) == 10);
    for (int i = 0; i < action_count(4); ++i) CHECK(action_index(4, action_at(4, i)) == i);
    CHECK(action_at(4, action_count(4) - 1).is_stop());
}

TEST_CASE("apply and undo") {
    const AncestralGraph e2(2);
    const auto a = Action::add({0, 1}, Feature::Forward);
    const auto g = apply_action(e2, a);
    CHECK(g == make_graph(2, {{0, 1, 2}}));
    CHECK(undo_action(g, a) == e2);
    CHECK_THROWS_AS(apply_action(g, Action::add({0, 1}, Feature::Bidirected)), PreconditionError);
    CHECK_THROWS_AS(undo_action(e2, a), PreconditionError);
    CHECK_THROWS_AS(undo_action(g, Action::add({0, 1}, Feature::Backward)), PreconditionError);

    for (const auto& s : enumerate_ags(3)) {
        for (const auto& act : valid_actions(s)) {
            if (act.is_stop()) continue;
            const auto next = apply_action(s, act);
            CHECK(is_ancestral(next));
            CHECK(shd(s, next) == 1);
            CHECK(undo_action(next, act) == s);
        }
    }
}

TEST_CASE("relation features and shd") {
    const auto g = make_graph(3, {{0, 1, 2}, {1, 2, 4}});
    CHECK(g.feature({0, 1}) == Feature::Forward);
    CHECK(g.feature({1, 2}) == Feature::Bidirected);
    CHECK(g.feature({0, 2}) == Feature::None);
    CHECK(make_graph(2, {{0, 1, 3}}).dir(0, 1));
    CHECK(shd(g, g) == 0);
    CHECK(shd(AncestralGraph(3), g) == 2);
    CHECK_THROWS_AS(shd(AncestralGraph(2), g), StructuralError);

    const auto all = enumerate_ags(3);
    for (const auto& a : all)
        for (const auto& b : all) {
            CHECK(shd(a, b) == shd(b, a));
            for (const auto& c : all) CHECK(shd(a, c) <= shd(a, b) + shd(b, c));
        }
}

TEST_CASE("algebraic and definitional checks agree on every graph up to n = 4") {
    for (int n = 1; n <= 4; ++n) {
        const int pairs = pair_count(n);
        const auto rels = all_relations(n);
        const std::uint64_t total = std::uint64_t{1} << (2 * pairs);
        for (std::uint64_t code = 0; code < total; ++code) {
            std::vector<std::vector<int>> dir(n, std::vector<int>(n, 0)), bidir = dir;
            Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n), b = d;
            AncestralGraph g(n);
            for (int p = 0; p < pairs; ++p) {
                const int f = static_cast<int>((code >> (2 * p)) & 3u) + 1;
                const auto [u, v] = rels[static_cast<std::size_t>(p)];
                if (f == 2) dir[v][u] = 1, d(v, u) = 1;
                if (f == 3) dir[u][v] = 1, d(u, v) = 1;
                if (f == 4) bidir[u][v] = bidir[v][u] = 1, b(u, v) = b(v, u) = 1;
                if (f != 1) g = g.with_feature({u, v}, static_cast<Feature>(f));
            }
            const bool truth = ancestral_by_definition(n, dir, bidir);
            CHECK(is_ancestral(g) == truth);
            CHECK(is_ancestral_algebraic(d, b) == truth);
        }
    }
}

TEST_CASE("every enumerated graph is reachable from the empty graph") {
    for (int n = 2; n <= 4; ++n) {
        const auto all = enumerate_ags(n);
        std::set<std::string> seen{AncestralGraph(n).key()};
        std::vector<AncestralGraph> frontier{AncestralGraph(n)};
        while (!frontier.empty()) {
            std::vector<AncestralGraph> next;
            for (const auto& s : frontier)
                for (const auto& a : valid_actions(s)) {
                    if (a.is_stop()) continue;
                    auto t = apply_action(s, a);
                    if (seen.insert(t.key()).second) next.push_back(std::move(t));
                }
            frontier = std::move(next);
        }
        CHECK(seen.size() == all.size());
        for (const auto& g : all) CHECK(seen.contains(g.key()));
    }
}

TEST_CASE("random action sequences stay ancestral") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 7);
        AncestralGraph g(n);
        while (true) {
            const auto acts = valid_actions(g);
            const auto& a = acts[rng() % acts.size()];
            if (a.is_stop()) break;
            g = apply_action(g, a);
            REQUIRE(is_ancestral(g));
            REQUIRE(std::abs(ancestrality_residual(g)) <= 1e-9);
        }
        // Exactly one feature per pair.
        const auto f = g.features();
        CHECK(static_cast<int>(f.size()) == pair_count(n));
    }
}

TEST_CASE("json round trip") {
    const auto g = make_graph(4, {{0, 1, 2}, {1, 2, 4}, {0, 3, 3}});
    const auto j = to_json(g);
    CHECK(j.at("n") == 4);
    CHECK(graph_from_json(j) == g);
    CHECK(graph_from_json(nlohmann::json::parse(j.dump())) == g);
    CHECK(canonical_json(graph_from_json(nlohmann::json::parse(canonical_json(g)))) == canonical_json(g));
    CHECK_THROWS(graph_from_json(nlohmann::json{{"n", 2}, {"edges", {{1, 0, 2}}}}));
    CHECK_THROWS(graph_from_json(nlohmann::json{{"n", 2}, {"edges", {{0, 1, 5}}}}));
    // Non-ancestral edge lists are rejected.
    CHECK_THROWS(graph_from_json(nlohmann::json{{"n", 3}, {"edges", {{0, 1, 2}, {1, 2, 2}, {0, 2, 3}}}}));
    CHECK(describe(make_graph(3, {{0, 1, 2}, {1, 2, 4}})) == "0->1, 1<->2");
}
