#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "agfn/graph.hpp"

namespace agfn {

/// Linear Gaussian SCM: V = B V + U, U ~ N(0, Omega).
/// B(i, j) != 0 only for V_j -> V_i; Omega(i, j) != 0 (i != j) only for V_i <-> V_j.
struct ScmModel {
    Eigen::MatrixXd B;
    Eigen::MatrixXd Omega;

    int n() const { return static_cast<int>(B.rows()); }
    /// (I - B)^{-1} Omega (I - B)^{-T}
    Eigen::MatrixXd implied_covariance() const;
    /// Throws StructuralError if any ScmModel invariant is violated w.r.t. g.
    void validate(const AncestralGraph& g) const;
};

/// m x n sample matrix with column names.
struct Dataset {
    Eigen::MatrixXd values;
    std::vector<std::string> columns;

    int rows() const { return static_cast<int>(values.rows()); }
    int cols() const { return static_cast<int>(values.cols()); }
};

/// Random ancestral structure from a directed configuration model.
///
/// In- and out-degrees are uniform on {0..degree_max}; the degree draw is
/// retried until stub totals agree (100 attempts). Stubs are matched at
/// random; matches that agree with a random topological order become
/// directed edges, matches against the order become bidirected candidates
/// that are kept with probability 1/2 when the pair is free and the result
/// stays ancestral. Self loops and multi-edges are dropped.
AncestralGraph random_ancestral_structure(int n, int degree_max, std::uint64_t seed);

/// Coefficients uniform on +-[0.5, 2.0]; Omega diagonal uniform on [0.7, 1.3],
/// bidirected entries uniform on +-[0.3, 0.6], shifted by lambda I until the
/// smallest eigenvalue is at least 0.1.
ScmModel random_parameters(const AncestralGraph& g, std::uint64_t seed);

/// m i.i.d. draws from N(0, Sigma). Throws PreconditionError for m < 2.
Dataset sample_dataset(const ScmModel& model, int m, std::uint64_t seed,
                       std::vector<std::string> columns = {});

std::vector<std::string> default_columns(int n);

/// Built-in structures: "chain4", "iv", "collfork", "fig1".
AncestralGraph preset(std::string_view name);
std::vector<std::string> preset_names();

// CSV: header row, one numeric column per variable, '.' decimal point.
Dataset read_csv(std::istream& in);
Dataset read_csv_file(const std::string& path);
void write_csv(std::ostream& out, const Dataset& data);
void write_csv_file(const std::string& path, const Dataset& data);

nlohmann::json model_to_json(const ScmModel& model);
ScmModel model_from_json(const nlohmann::json& j);

}  // namespace agfn
