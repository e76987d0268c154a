#include "agfn/graph.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include <unsupported/Eigen/MatrixFunctions>

#include "agfn/error.hpp"

namespace agfn {

namespace {

constexpr double kAncestralTolerance = 1e-9;

void check_relation(int n, Relation r) {
    if (r.u < 0 || r.v >= n || r.u >= r.v) {
        throw PreconditionError("invalid relation (" + std::to_string(r.u) + ", " +
                                std::to_string(r.v) + ") for n=" + std::to_string(n));
    }
}

}  // namespace

int pair_index(int n, Relation r) {
    check_relation(n, r);
    // Pairs (0,1), (0,2), ..., (0,n-1), (1,2), ...
    return r.u * n - r.u * (r.u + 1) / 2 + (r.v - r.u - 1);
}

Relation pair_at(int n, int index) {
    if (index < 0 || index >= pair_count(n)) throw PreconditionError("pair index out of range");
    int u = 0;
    int row = n - 1;
    while (index >= row) {
        index -= row;
        ++u;
        --row;
    }
    return {u, u + 1 + index};
}

std::vector<Relation> all_relations(int n) {
    std::vector<Relation> out;
    out.reserve(pair_count(n));
    for (int u = 0; u < n; ++u)
        for (int v = u + 1; v < n; ++v) out.push_back({u, v});
    return out;
}

int action_index(int n, const Action& a) {
    if (a.is_stop()) return 3 * pair_count(n);
    if (a.feature == Feature::None) throw PreconditionError("AddEdge action needs an edge feature");
    return 3 * pair_index(n, a.relation) + (static_cast<int>(a.feature) - 2);
}

Action action_at(int n, int index) {
    const int stop = 3 * pair_count(n);
    if (index < 0 || index > stop) throw PreconditionError("action index out of range");
    if (index == stop) return Action::stop();
    return Action::add(pair_at(n, index / 3), static_cast<Feature>(index % 3 + 2));
}

AncestralGraph::AncestralGraph(int n) : n_(n), parents_(n, 0u), spouses_(n, 0u) {
    if (n < 1 || n > kMaxNodes) throw StructuralError("node count must be in [1, 32]");
}

AncestralGraph AncestralGraph::from_matrices(const Eigen::MatrixXi& dir, const Eigen::MatrixXi& bidir) {
    if (dir.rows() != dir.cols() || bidir.rows() != bidir.cols() || dir.rows() != bidir.rows()) {
        throw StructuralError("adjacency matrices must be square and of equal size");
    }
    const int n = static_cast<int>(dir.rows());
    AncestralGraph g(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int d = dir(i, j);
            const int b = bidir(i, j);
            if ((d != 0 && d != 1) || (b != 0 && b != 1)) throw StructuralError("adjacency entries must be 0/1");
            if (i == j && (d || b)) throw StructuralError("self loops are not allowed");
            if (b != bidir(j, i)) throw StructuralError("bidirected matrix must be symmetric");
            if (d) g.parents_[i] |= 1u << j;
            if (b) g.spouses_[i] |= 1u << j;
        }
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (dir(i, j) + dir(j, i) + bidir(i, j) > 1) {
                throw StructuralError("more than one edge between nodes " + std::to_string(i) + " and " +
                                      std::to_string(j));
            }
        }
    }
    return g;
}

Feature AncestralGraph::feature(Relation r) const {
    check_relation(n_, r);
    if (dir(r.v, r.u)) return Feature::Forward;
    if (dir(r.u, r.v)) return Feature::Backward;
    if (bidir(r.u, r.v)) return Feature::Bidirected;
    return Feature::None;
}

AncestralGraph AncestralGraph::with_feature(Relation r, Feature f) const {
    check_relation(n_, r);
    AncestralGraph g = *this;
    const std::uint32_t bu = 1u << r.u;
    const std::uint32_t bv = 1u << r.v;
    g.parents_[r.v] &= ~bu;
    g.parents_[r.u] &= ~bv;
    g.spouses_[r.u] &= ~bv;
    g.spouses_[r.v] &= ~bu;
    switch (f) {
        case Feature::None: break;
        case Feature::Forward: g.parents_[r.v] |= bu; break;
        case Feature::Backward: g.parents_[r.u] |= bv; break;
        case Feature::Bidirected:
            g.spouses_[r.u] |= bv;
            g.spouses_[r.v] |= bu;
            break;
    }
    return g;
}

int AncestralGraph::directed_edge_count() const {
    int c = 0;
    for (auto m : parents_) c += std::popcount(m);
    return c;
}

int AncestralGraph::bidirected_edge_count() const {
    int c = 0;
    for (auto m : spouses_) c += std::popcount(m);
    return c / 2;
}

Eigen::MatrixXd AncestralGraph::dir_matrix() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n_, n_);
    for (int i = 0; i < n_; ++i)
        for (int j = 0; j < n_; ++j)
            if (dir(i, j)) a(i, j) = 1.0;
    return a;
}

Eigen::MatrixXd AncestralGraph::bidir_matrix() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n_, n_);
    for (int i = 0; i < n_; ++i)
        for (int j = 0; j < n_; ++j)
            if (bidir(i, j)) a(i, j) = 1.0;
    return a;
}

std::vector<Feature> AncestralGraph::features() const {
    std::vector<Feature> out;
    out.reserve(pair_count(n_));
    for (int u = 0; u < n_; ++u)
        for (int v = u + 1; v < n_; ++v) out.push_back(feature({u, v}));
    return out;
}

std::string AncestralGraph::key() const {
    std::string s;
    s.reserve(pair_count(n_) + 4);
    s += std::to_string(n_);
    s += ':';
    for (auto f : features()) s += static_cast<char>('0' + static_cast<int>(f));
    return s;
}

std::vector<std::uint32_t> ancestor_masks(const AncestralGraph& g) {
    const int n = g.n();
    std::vector<std::uint32_t> anc(n);
    for (int i = 0; i < n; ++i) anc[i] = g.parents_mask(i);
    // Fixed-point closure: anc[i] |= anc[p] for each parent p. At most n rounds.
    for (bool changed = true; changed;) {
        changed = false;
        for (int i = 0; i < n; ++i) {
            std::uint32_t acc = anc[i];
            for (std::uint32_t m = anc[i]; m; m &= m - 1) acc |= anc[std::countr_zero(m)];
            if (acc != anc[i]) {
                anc[i] = acc;
                changed = true;
            }
        }
    }
    return anc;
}

bool is_ancestral(const AncestralGraph& g) {
    const auto anc = ancestor_masks(g);
    for (int i = 0; i < g.n(); ++i) {
        if ((anc[i] >> i) & 1u) return false;
        if (g.spouses_mask(i) & anc[i]) return false;
    }
    return true;
}

double ancestrality_residual(const AncestralGraph& g) {
    const Eigen::MatrixXd e = g.dir_matrix().exp();
    return e.trace() - g.n() + e.cwiseProduct(g.bidir_matrix()).sum();
}

bool is_ancestral_algebraic(const AncestralGraph& g) {
    return std::abs(ancestrality_residual(g)) <= kAncestralTolerance;
}

bool is_ancestral_algebraic(const Eigen::MatrixXd& dir, const Eigen::MatrixXd& bidir) {
    if (dir.rows() != dir.cols() || bidir.rows() != bidir.cols() || dir.rows() != bidir.rows()) {
        throw StructuralError("adjacency matrices must be square and of equal size");
    }
    const Eigen::MatrixXd e = dir.exp();
    const double r = e.trace() - static_cast<double>(dir.rows()) + e.cwiseProduct(bidir).sum();
    return std::abs(r) <= kAncestralTolerance;
}

std::vector<Action> valid_actions(const AncestralGraph& g) {
    if (!is_ancestral(g)) throw PreconditionError("valid_actions requires an ancestral graph");
    std::vector<Action> out;
    const int n = g.n();
    for (int u = 0; u < n; ++u) {
        for (int v = u + 1; v < n; ++v) {
            if (g.feature({u, v}) != Feature::None) continue;
            for (auto f : {Feature::Forward, Feature::Backward, Feature::Bidirected}) {
                // Apply, check, and drop the candidate if it breaks ancestrality.
                if (is_ancestral(g.with_feature({u, v}, f))) out.push_back(Action::add({u, v}, f));
            }
        }
    }
    out.push_back(Action::stop());
    return out;
}

std::vector<std::uint8_t> valid_action_mask(const AncestralGraph& g) {
    std::vector<std::uint8_t> mask(action_count(g.n()), 0);
    for (const auto& a : valid_actions(g)) mask[action_index(g.n(), a)] = 1;
    return mask;
}

AncestralGraph apply_action(const AncestralGraph& g, const Action& a) {
    if (a.is_stop()) return g;
    if (a.feature == Feature::None) throw PreconditionError("cannot add an edge of type 'none'");
    if (g.feature(a.relation) != Feature::None) throw PreconditionError("pair is already occupied");
    return g.with_feature(a.relation, a.feature);
}

AncestralGraph undo_action(const AncestralGraph& g, const Action& a) {
    if (a.is_stop()) return g;
    if (g.feature(a.relation) != a.feature) throw PreconditionError("edge to undo is not present");
    return g.with_feature(a.relation, Feature::None);
}

int shd(const AncestralGraph& a, const AncestralGraph& b) {
    if (a.n() != b.n()) throw StructuralError("shd requires graphs of equal size");
    int d = 0;
    for (int u = 0; u < a.n(); ++u)
        for (int v = u + 1; v < a.n(); ++v)
            if (a.feature({u, v}) != b.feature({u, v})) ++d;
    return d;
}

nlohmann::json to_json(const AncestralGraph& g) {
    nlohmann::json edges = nlohmann::json::array();
    for (int u = 0; u < g.n(); ++u) {
        for (int v = u + 1; v < g.n(); ++v) {
            const auto f = g.feature({u, v});
            if (f != Feature::None) edges.push_back({u, v, static_cast<int>(f)});
        }
    }
    return {{"n", g.n()}, {"edges", std::move(edges)}};
}

AncestralGraph graph_from_json(const nlohmann::json& j) {
    try {
        const int n = j.at("n").get<int>();
        AncestralGraph g(n);
        for (const auto& e : j.at("edges")) {
            if (!e.is_array() || e.size() != 3) throw ParseError("edge entries must be [u, v, feature]");
            const int u = e[0].get<int>();
            const int v = e[1].get<int>();
            const int f = e[2].get<int>();
            if (u < 0 || v >= n || u >= v) throw ParseError("edge endpoints must satisfy 0 <= u < v < n");
            if (f < 2 || f > 4) throw ParseError("edge feature must be 2, 3 or 4");
            if (g.feature({u, v}) != Feature::None) throw ParseError("duplicate pair in edge list");
            g = g.with_feature({u, v}, static_cast<Feature>(f));
        }
        if (!is_ancestral(g)) throw StructuralError("graph is not ancestral: " + describe(g));
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed graph JSON: ") + e.what());
    }
}

std::string canonical_json(const AncestralGraph& g) { return to_json(g).dump(); }

std::string describe(const AncestralGraph& g) {
    std::ostringstream os;
    bool first = true;
    for (int u = 0; u < g.n(); ++u) {
        for (int v = u + 1; v < g.n(); ++v) {
            const auto f = g.feature({u, v});
            if (f == Feature::None) continue;
            if (!first) os << ", ";
            first = false;
            switch (f) {
                case Feature::Forward: os << u << "->" << v; break;
                case Feature::Backward: os << v << "->" << u; break;
                case Feature::Bidirected: os << u << "<->" << v; break;
                case Feature::None: break;
            }
        }
    }
    if (first) os << "(empty)";
    return os.str();
}

}  // namespace agfn
