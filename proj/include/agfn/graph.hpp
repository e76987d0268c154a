#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace agfn {

inline constexpr int kMaxNodes = 32;

/// Edge status of an unordered pair (u, v) with u < v.
enum class Feature : std::uint8_t {
    None = 1,           // no edge
    Forward = 2,        // u -> v
    Backward = 3,       // v -> u
    Bidirected = 4,     // u <-> v
};

inline constexpr int kNumFeatures = 4;

/// Unordered node pair, stored with u < v.
struct Relation {
    int u = 0;
    int v = 1;

    friend bool operator==(const Relation&, const Relation&) = default;
    friend auto operator<=>(const Relation&, const Relation&) = default;
};

/// Number of unordered pairs C(n, 2).
constexpr int pair_count(int n) { return n * (n - 1) / 2; }

/// Lexicographic index of (u, v), u < v, among the C(n, 2) pairs.
int pair_index(int n, Relation r);
Relation pair_at(int n, int index);
std::vector<Relation> all_relations(int n);

/// Graph action: add one edge on a free pair, or stop.
struct Action {
    enum class Kind : std::uint8_t { AddEdge, Stop };
    Kind kind = Kind::Stop;
    Relation relation{};
    Feature feature = Feature::None;

    static Action stop() { return {}; }
    static Action add(Relation r, Feature f) { return {Kind::AddEdge, r, f}; }
    bool is_stop() const { return kind == Kind::Stop; }

    friend bool operator==(const Action&, const Action&) = default;
};

/// Total forward actions per state: 3 C(n,2) edge additions plus Stop.
constexpr int action_count(int n) { return 3 * pair_count(n) + 1; }
/// Edge slots addressed by the backward (removal) policy.
constexpr int edge_slot_count(int n) { return 3 * pair_count(n); }

/// Index of an action in the (u, v, feature) lexicographic order, Stop last.
int action_index(int n, const Action& a);
Action action_at(int n, int index);

/// Mixed graph with directed and bidirected edges over n <= 32 nodes.
///
/// Directed edges follow the structural-coefficient convention:
/// dir(i, j) == true means V_j -> V_i (column is the tail, row the head).
/// At most one edge joins any unordered pair. Values are immutable once
/// built; mutation goes through with_feature() and friends which return
/// copies.
class AncestralGraph {
public:
    AncestralGraph() = default;
    explicit AncestralGraph(int n);

    /// Builds from dense 0/1 matrices; validates shape and pair exclusivity
    /// but not ancestrality.
    static AncestralGraph from_matrices(const Eigen::MatrixXi& dir, const Eigen::MatrixXi& bidir);

    int n() const { return n_; }
    bool dir(int head, int tail) const { return (parents_[head] >> tail) & 1u; }
    bool bidir(int i, int j) const { return (spouses_[i] >> j) & 1u; }

    std::uint32_t parents_mask(int i) const { return parents_[i]; }
    std::uint32_t spouses_mask(int i) const { return spouses_[i]; }

    Feature feature(Relation r) const;
    /// Copy with the pair set to `f` (None clears it).
    AncestralGraph with_feature(Relation r, Feature f) const;

    int directed_edge_count() const;
    int bidirected_edge_count() const;
    int edge_count() const { return directed_edge_count() + bidirected_edge_count(); }
    bool empty() const { return edge_count() == 0; }

    Eigen::MatrixXd dir_matrix() const;
    Eigen::MatrixXd bidir_matrix() const;

    /// Per-pair features in pair_index order; the canonical identity of a graph.
    std::vector<Feature> features() const;
    std::string key() const;

    friend bool operator==(const AncestralGraph&, const AncestralGraph&) = default;

private:
    int n_ = 0;
    std::vector<std::uint32_t> parents_;
    std::vector<std::uint32_t> spouses_;
};

/// Ancestor sets: bit j of result[i] is set iff there is a directed path
/// j -> ... -> i of length >= 1.
std::vector<std::uint32_t> ancestor_masks(const AncestralGraph& g);

/// Reachability-based check: no directed cycle and no almost directed cycle.
bool is_ancestral(const AncestralGraph& g);

/// trace(exp(A_d)) - n + 1^T (exp(A_d) .* A_b) 1, computed with a dense
/// matrix exponential. Zero (up to rounding) iff the graph is ancestral.
double ancestrality_residual(const AncestralGraph& g);
/// Algebraic form of the check, |residual| <= 1e-9.
bool is_ancestral_algebraic(const AncestralGraph& g);
/// Algebraic check on raw adjacency matrices; throws StructuralError on
/// shape mismatch.
bool is_ancestral_algebraic(const Eigen::MatrixXd& dir, const Eigen::MatrixXd& bidir);

/// Stop plus every edge addition that keeps the graph ancestral, in
/// action-index order with Stop last.
std::vector<Action> valid_actions(const AncestralGraph& g);
/// Same information as a 0/1 vector over action indices.
std::vector<std::uint8_t> valid_action_mask(const AncestralGraph& g);

AncestralGraph apply_action(const AncestralGraph& g, const Action& a);
AncestralGraph undo_action(const AncestralGraph& g, const Action& a);

inline Feature relation_feature(const AncestralGraph& g, Relation r) { return g.feature(r); }

/// Number of pairs whose relation feature differs.
int shd(const AncestralGraph& a, const AncestralGraph& b);

/// {"n": int, "edges": [[u, v, feature], ...]} with 0-based u < v.
nlohmann::json to_json(const AncestralGraph& g);
AncestralGraph graph_from_json(const nlohmann::json& j);
/// Compact canonical serialization (also the score-cache key).
std::string canonical_json(const AncestralGraph& g);

/// Human-readable edge list, e.g. "0->1, 1<->2".
std::string describe(const AncestralGraph& g);

}  // namespace agfn
