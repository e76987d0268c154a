#include "agfn/scm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "agfn/error.hpp"

namespace agfn {

namespace {

double signed_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> mag(lo, hi);
    std::bernoulli_distribution sign(0.5);
    const double x = mag(rng);
    return sign(rng) ? x : -x;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

}  // namespace

Eigen::MatrixXd ScmModel::implied_covariance() const {
    const int k = n();
    const Eigen::MatrixXd inv = (Eigen::MatrixXd::Identity(k, k) - B).inverse();
    Eigen::MatrixXd sigma = inv * Omega * inv.transpose();
    return 0.5 * (sigma + sigma.transpose());
}

void ScmModel::validate(const AncestralGraph& g) const {
    const int k = g.n();
    if (B.rows() != k || B.cols() != k || Omega.rows() != k || Omega.cols() != k) {
        throw StructuralError("model dimensions do not match the graph");
    }
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            if (i == j) {
                if (B(i, i) != 0.0) throw StructuralError("B must have a zero diagonal");
                continue;
            }
            if (!g.dir(i, j) && B(i, j) != 0.0) throw StructuralError("B has a coefficient without a directed edge");
            if (!g.bidir(i, j) && Omega(i, j) != 0.0) {
                throw StructuralError("Omega has an off-diagonal entry without a bidirected edge");
            }
            if (Omega(i, j) != Omega(j, i)) throw StructuralError("Omega must be symmetric");
        }
    }
    Eigen::LLT<Eigen::MatrixXd> omega_llt(Omega);
    if (omega_llt.info() != Eigen::Success) throw StructuralError("Omega is not positive definite");
    Eigen::LLT<Eigen::MatrixXd> sigma_llt(implied_covariance());
    if (sigma_llt.info() != Eigen::Success) throw StructuralError("implied covariance is not positive definite");
}

AncestralGraph random_ancestral_structure(int n, int degree_max, std::uint64_t seed) {
    if (n < 2) throw PreconditionError("random structures need at least 2 nodes");
    if (degree_max < 0) throw PreconditionError("degree_max must be non-negative");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> degree(0, degree_max);

    std::vector<int> in_deg(n), out_deg(n);
    bool balanced = false;
    for (int attempt = 0; attempt < 100 && !balanced; ++attempt) {
        for (int i = 0; i < n; ++i) {
            in_deg[i] = degree(rng);
            out_deg[i] = degree(rng);
        }
        balanced = std::accumulate(in_deg.begin(), in_deg.end(), 0) ==
                   std::accumulate(out_deg.begin(), out_deg.end(), 0);
    }
    if (!balanced) throw Error("could not draw a feasible degree sequence after 100 retries");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> rank(n);
    for (int i = 0; i < n; ++i) rank[order[i]] = i;

    std::vector<int> out_stubs, in_stubs;
    for (int i = 0; i < n; ++i) {
        out_stubs.insert(out_stubs.end(), out_deg[i], i);
        in_stubs.insert(in_stubs.end(), in_deg[i], i);
    }
    std::shuffle(out_stubs.begin(), out_stubs.end(), rng);
    std::shuffle(in_stubs.begin(), in_stubs.end(), rng);

    AncestralGraph g(n);
    std::vector<Relation> against_order;
    for (std::size_t s = 0; s < out_stubs.size(); ++s) {
        const int tail = out_stubs[s];
        const int head = in_stubs[s];
        if (tail == head) continue;
        const Relation r{std::min(tail, head), std::max(tail, head)};
        if (g.feature(r) != Feature::None) continue;
        if (rank[tail] < rank[head]) {
            g = g.with_feature(r, tail < head ? Feature::Forward : Feature::Backward);
        } else {
            against_order.push_back(r);
        }
    }
    std::bernoulli_distribution keep(0.5);
    for (const auto& r : against_order) {
        if (!keep(rng) || g.feature(r) != Feature::None) continue;
        auto candidate = g.with_feature(r, Feature::Bidirected);
        if (is_ancestral(candidate)) g = std::move(candidate);
    }
    return g;
}

ScmModel random_parameters(const AncestralGraph& g, std::uint64_t seed) {
    if (!is_ancestral(g)) throw PreconditionError("random_parameters requires an ancestral graph");
    const int n = g.n();
    std::mt19937_64 rng(seed);
    ScmModel model{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    std::uniform_real_distribution<double> diag(0.7, 1.3);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
            if (g.dir(i, j)) model.B(i, j) = signed_uniform(rng, 0.5, 2.0);
    }
    for (int i = 0; i < n; ++i) model.Omega(i, i) = diag(rng);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (!g.bidir(i, j)) continue;
            const double w = signed_uniform(rng, 0.3, 0.6);
            model.Omega(i, j) = w;
            model.Omega(j, i) = w;
        }
    }
    const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(model.Omega).eigenvalues().minCoeff();
    if (min_eig < 0.1) model.Omega.diagonal().array() += 0.1 - min_eig;
    return model;
}

Dataset sample_dataset(const ScmModel& model, int m, std::uint64_t seed, std::vector<std::string> columns) {
    if (m < 2) throw PreconditionError("a dataset needs at least 2 samples");
    const int n = model.n();
    if (columns.empty()) columns = default_columns(n);
    if (static_cast<int>(columns.size()) != n) throw StructuralError("column count does not match the model");
    Eigen::LLT<Eigen::MatrixXd> llt(model.Omega);
    if (llt.info() != Eigen::Success) throw StructuralError("Omega is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    const Eigen::MatrixXd mix = (Eigen::MatrixXd::Identity(n, n) - model.B).inverse() * L;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd z(m, n);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) z(r, c) = normal(rng);
    return {z * mix.transpose(), std::move(columns)};
}

std::vector<std::string> default_columns(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("V" + std::to_string(i));
    return out;
}

AncestralGraph preset(std::string_view name) {
    using F = Feature;
    if (name == "chain4") {
        return AncestralGraph(4)
            .with_feature({0, 1}, F::Forward)
            .with_feature({1, 2}, F::Forward)
            .with_feature({2, 3}, F::Forward);
    }
    if (name == "iv") {
        // W=0, X=1, Z=2, Y=3: W -> X <- Z -> Y with X <-> Y.
        return AncestralGraph(4)
            .with_feature({0, 1}, F::Forward)
            .with_feature({1, 2}, F::Backward)
            .with_feature({2, 3}, F::Forward)
            .with_feature({1, 3}, F::Bidirected);
    }
    if (name == "collfork") {
        return AncestralGraph(4)
            .with_feature({0, 2}, F::Forward)
            .with_feature({1, 2}, F::Forward)
            .with_feature({1, 3}, F::Forward)
            .with_feature({0, 1}, F::Bidirected);
    }
    if (name == "fig1") {
        return AncestralGraph(3).with_feature({0, 1}, F::Forward).with_feature({1, 2}, F::Bidirected);
    }
    throw PreconditionError("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() { return {"chain4", "iv", "collfork", "fig1"}; }

Dataset read_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || trim(line).empty()) throw ParseError("CSV is empty (missing header row)");
    Dataset data;
    data.columns = split_csv_line(line);
    const int n = static_cast<int>(data.columns.size());
    if (n < 2) throw ParseError("CSV needs at least 2 columns");

    std::vector<double> cells;
    int row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const auto fields = split_csv_line(line);
        if (static_cast<int>(fields.size()) != n) {
            throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(n) + " fields, got " +
                             std::to_string(fields.size()));
        }
        for (int c = 0; c < n; ++c) {
            const auto& f = fields[c];
            double x = 0.0;
            const char* first = f.data();
            const char* last = f.data() + f.size();
            if (!f.empty() && *first == '+') ++first;
            auto [ptr, ec] = std::from_chars(first, last, x);
            if (f.empty() || ec != std::errc() || ptr != last || !std::isfinite(x)) {
                throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(c + 1) + " ('" +
                                 data.columns[c] + "'): non-numeric or non-finite value '" + f + "'");
            }
            cells.push_back(x);
        }
    }
    if (row < 2) throw ParseError("CSV needs at least 2 data rows");
    data.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cells.data(), row, n);
    return data;
}

Dataset read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    return read_csv(in);
}

void write_csv(std::ostream& out, const Dataset& data) {
    for (int c = 0; c < data.cols(); ++c) out << (c ? "," : "") << data.columns[c];
    out << '\n';
    char buf[64];
    for (int r = 0; r < data.rows(); ++r) {
        for (int c = 0; c < data.cols(); ++c) {
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), data.values(r, c));
            if (c) out << ',';
            out.write(buf, ptr - buf);
        }
        out << '\n';
    }
}

void write_csv_file(const std::string& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    write_csv(out, data);
}

nlohmann::json model_to_json(const ScmModel& model) {
    auto rows = [](const Eigen::MatrixXd& m) {
        nlohmann::json a = nlohmann::json::array();
        for (int i = 0; i < m.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
            a.push_back(std::move(row));
        }
        return a;
    };
    return {{"B", rows(model.B)}, {"Omega", rows(model.Omega)}};
}

ScmModel model_from_json(const nlohmann::json& j) {
    auto matrix = [](const nlohmann::json& a) {
        const auto n = static_cast<Eigen::Index>(a.size());
        Eigen::MatrixXd m(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (static_cast<Eigen::Index>(a[i].size()) != n) throw ParseError("model matrices must be square");
            for (Eigen::Index k = 0; k < n; ++k) m(i, k) = a[i][k].get<double>();
        }
        return m;
    };
    try {
        ScmModel model{matrix(j.at("B")), matrix(j.at("Omega"))};
        if (model.B.rows() != model.Omega.rows()) throw ParseError("B and Omega sizes differ");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed model JSON: ") + e.what());
    }
}

}  // namespace agfn
