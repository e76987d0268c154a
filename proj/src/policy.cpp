#include "agfn/policy.hpp"

#include <bit>
#include <cmath>
#include <random>

#include "agfn/error.hpp"

namespace agfn {

namespace {

constexpr int kTensorsPerGinLayer = 7;
constexpr int kTensorsPerHead = 6;
constexpr int kCheckpointVersion = 1;

ad::Matrix gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    ad::Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = normal(rng);
    return m;
}

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Encoder: return "encoder";
        case ParamGroup::ForwardHead: return "forward";
        case ParamGroup::BackwardHead: return "backward";
    }
    return "?";
}

ParamGroup group_from_name(const std::string& s) {
    if (s == "encoder") return ParamGroup::Encoder;
    if (s == "forward") return ParamGroup::ForwardHead;
    if (s == "backward") return ParamGroup::BackwardHead;
    throw ParseError("unknown parameter group '" + s + "'");
}

int input_dim(int n, const PolicyConfig& c) { return (c.node_ids ? n : 0) + 3; }

}  // namespace

nlohmann::json policy_config_to_json(const PolicyConfig& c) {
    return {{"hidden", c.hidden},
            {"gin_layers", c.gin_layers},
            {"leaky_slope", c.leaky_slope},
            {"mask_epsilon", c.mask_epsilon},
            {"node_ids", c.node_ids}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.hidden = j.value("hidden", c.hidden);
    c.gin_layers = j.value("gin_layers", c.gin_layers);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.mask_epsilon = j.value("mask_epsilon", c.mask_epsilon);
    c.node_ids = j.value("node_ids", c.node_ids);
    if (c.hidden < 1 || c.gin_layers < 1) throw ParseError("policy config needs hidden >= 1 and gin_layers >= 1");
    return c;
}

std::size_t PolicyParams::scalar_count() const {
    std::size_t k = 0;
    for (const auto& t : tensors) k += static_cast<std::size_t>(t.value.size());
    return k;
}

bool PolicyParams::all_finite() const {
    for (const auto& t : tensors)
        if (!t.value.allFinite()) return false;
    return true;
}

PolicyNetwork::PolicyNetwork(int n, PolicyConfig config, std::uint64_t seed) : n_(n), config_(config) {
    if (n < 2 || n > kMaxNodes) throw PreconditionError("policy networks need 2 <= n <= 32");
    if (config_.hidden < 1 || config_.gin_layers < 1) throw PreconditionError("invalid policy configuration");
    std::mt19937_64 rng(seed);
    const int d = config_.hidden;
    auto add = [&](std::string name, ParamGroup g, ad::Matrix m) {
        params_.tensors.push_back({std::move(name), g, std::move(m)});
    };
    int f = input_dim(n, config_);
    for (int l = 0; l < config_.gin_layers; ++l) {
        const std::string p = "gin" + std::to_string(l) + ".";
        for (const char* t : {"msg_parent", "msg_child", "msg_spouse"}) {
            add(p + t, ParamGroup::Encoder, gaussian(f, f, std::sqrt(1.0 / f), rng));
        }
        add(p + "w1", ParamGroup::Encoder, gaussian(f, d, std::sqrt(2.0 / f), rng));
        add(p + "b1", ParamGroup::Encoder, ad::Matrix::Zero(1, d));
        add(p + "w2", ParamGroup::Encoder, gaussian(d, d, std::sqrt(2.0 / d), rng));
        add(p + "b2", ParamGroup::Encoder, ad::Matrix::Zero(1, d));
        f = d;
    }
    auto head = [&](const std::string& p, ParamGroup g, int out) {
        add(p + "w1", g, gaussian(d, d, std::sqrt(2.0 / d), rng));
        add(p + "b1", g, ad::Matrix::Zero(1, d));
        add(p + "w2", g, gaussian(d, d, std::sqrt(2.0 / d), rng));
        add(p + "b2", g, ad::Matrix::Zero(1, d));
        add(p + "w3", g, ad::Matrix::Zero(d, out));
        add(p + "b3", g, ad::Matrix::Zero(1, out));
    };
    forward_head_ = params_.tensors.size();
    head("fwd.", ParamGroup::ForwardHead, action_count(n));
    backward_head_ = params_.tensors.size();
    head("bwd.", ParamGroup::BackwardHead, edge_slot_count(n));
}

PolicyNetwork::PolicyNetwork(int n, PolicyConfig config, PolicyParams params)
    : PolicyNetwork(n, config, std::uint64_t{0}) {
    if (params.tensors.size() != params_.tensors.size()) throw ParseError("parameter archive has the wrong tensor count");
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        const auto& want = params_.tensors[i];
        const auto& got = params.tensors[i];
        if (want.name != got.name || want.value.rows() != got.value.rows() || want.value.cols() != got.value.cols()) {
            throw ParseError("parameter archive does not match the architecture at '" + want.name + "'");
        }
    }
    params_ = std::move(params);
}

std::vector<ad::Var> PolicyNetwork::bind(ad::Tape& tape, unsigned trainable) const {
    std::vector<ad::Var> out;
    out.reserve(params_.tensors.size());
    for (const auto& t : params_.tensors) {
        const bool train = (trainable & static_cast<unsigned>(t.group)) != 0;
        out.push_back(train ? tape.variable(t.value) : tape.constant(t.value));
    }
    return out;
}

ad::Matrix PolicyNetwork::input_features(std::span<const AncestralGraph> graphs) const {
    const int f = input_dim(n_, config_);
    ad::Matrix x = ad::Matrix::Zero(static_cast<Eigen::Index>(graphs.size()) * n_, f);
    const int deg = config_.node_ids ? n_ : 0;
    for (std::size_t b = 0; b < graphs.size(); ++b) {
        const auto& g = graphs[b];
        if (g.n() != n_) throw StructuralError("graph size does not match the policy network");
        for (int v = 0; v < n_; ++v) {
            const auto row = static_cast<Eigen::Index>(b) * n_ + v;
            if (config_.node_ids) x(row, v) = 1.0;
            int out_deg = 0;
            for (int w = 0; w < n_; ++w) out_deg += g.dir(w, v) ? 1 : 0;
            x(row, deg + 0) = std::popcount(g.parents_mask(v));
            x(row, deg + 1) = out_deg;
            x(row, deg + 2) = std::popcount(g.spouses_mask(v));
        }
    }
    return x;
}

ad::Var PolicyNetwork::encode(ad::Tape& tape, std::span<const ad::Var> bound,
                              std::span<const AncestralGraph> graphs) const {
    const int rows = static_cast<int>(graphs.size()) * n_;
    std::vector<std::vector<int>> from_parents(rows), from_children(rows), from_spouses(rows);
    for (std::size_t b = 0; b < graphs.size(); ++b) {
        const auto& g = graphs[b];
        const int off = static_cast<int>(b) * n_;
        for (int v = 0; v < n_; ++v) {
            for (int w = 0; w < n_; ++w) {
                if (g.dir(v, w)) from_parents[off + v].push_back(off + w);
                if (g.dir(w, v)) from_children[off + v].push_back(off + w);
                if (g.bidir(v, w)) from_spouses[off + v].push_back(off + w);
            }
        }
    }
    ad::Var h = tape.constant(input_features(graphs));
    const double slope = config_.leaky_slope;
    for (int l = 0; l < config_.gin_layers; ++l) {
        const auto* p = &bound[static_cast<std::size_t>(l) * kTensorsPerGinLayer];
        ad::Var agg = h;
        agg = add(agg, matmul(neighbor_sum(h, from_parents), p[0]));
        agg = add(agg, matmul(neighbor_sum(h, from_children), p[1]));
        agg = add(agg, matmul(neighbor_sum(h, from_spouses), p[2]));
        ad::Var z = leaky_relu(add_row(matmul(agg, p[3]), p[4]), slope);
        h = leaky_relu(add_row(matmul(z, p[5]), p[6]), slope);
    }
    return h;
}

ad::Var PolicyNetwork::mlp_head(ad::Tape&, std::span<const ad::Var> bound, std::size_t first, ad::Var x) const {
    const double slope = config_.leaky_slope;
    const auto* p = &bound[first];
    ad::Var h = leaky_relu(add_row(matmul(x, p[0]), p[1]), slope);
    h = leaky_relu(add_row(matmul(h, p[2]), p[3]), slope);
    return add_row(matmul(h, p[4]), p[5]);
}

PolicyNetwork::Heads PolicyNetwork::evaluate(ad::Tape& tape, std::span<const ad::Var> bound,
                                             std::span<const AncestralGraph> graphs,
                                             std::span<const std::vector<std::uint8_t>> forward_masks) const {
    if (forward_masks.size() != graphs.size()) throw StructuralError("one forward mask per graph required");
    const ad::Var pooled = segment_sum_rows(encode(tape, bound, graphs), n_);
    const int a = action_count(n_);
    const int e = edge_slot_count(n_);
    ad::Matrix fmask(static_cast<Eigen::Index>(graphs.size()), a);
    ad::Matrix bmask(static_cast<Eigen::Index>(graphs.size()), e);
    for (std::size_t b = 0; b < graphs.size(); ++b) {
        if (static_cast<int>(forward_masks[b].size()) != a) throw StructuralError("forward mask has the wrong length");
        for (int k = 0; k < a; ++k) fmask(static_cast<Eigen::Index>(b), k) = forward_masks[b][k];
        const auto present = edge_presence_mask(graphs[b]);
        for (int k = 0; k < e; ++k) bmask(static_cast<Eigen::Index>(b), k) = present[k];
    }
    const ad::Var fwd = mlp_head(tape, bound, forward_head_, pooled);
    const ad::Var bwd = mlp_head(tape, bound, backward_head_, pooled);
    return {log_softmax_rows(apply_mask(fwd, fmask, config_.mask_epsilon)),
            log_softmax_rows(apply_mask(bwd, bmask, config_.mask_epsilon))};
}

ad::Matrix PolicyNetwork::forward_logp(std::span<const AncestralGraph> graphs,
                                       std::span<const std::vector<std::uint8_t>> forward_masks) const {
    ad::Tape tape(false);
    const auto bound = bind(tape, 0);
    const ad::Var pooled = segment_sum_rows(encode(tape, bound, graphs), n_);
    const int a = action_count(n_);
    ad::Matrix fmask(static_cast<Eigen::Index>(graphs.size()), a);
    for (std::size_t b = 0; b < graphs.size(); ++b) {
        if (static_cast<int>(forward_masks[b].size()) != a) throw StructuralError("forward mask has the wrong length");
        for (int k = 0; k < a; ++k) fmask(static_cast<Eigen::Index>(b), k) = forward_masks[b][k];
    }
    const ad::Var fwd = mlp_head(tape, bound, forward_head_, pooled);
    return log_softmax_rows(apply_mask(fwd, fmask, config_.mask_epsilon)).value();
}

std::vector<std::uint8_t> edge_presence_mask(const AncestralGraph& g) {
    std::vector<std::uint8_t> mask(edge_slot_count(g.n()), 0);
    const auto feats = g.features();
    for (std::size_t p = 0; p < feats.size(); ++p) {
        if (feats[p] != Feature::None) mask[3 * p + (static_cast<int>(feats[p]) - 2)] = 1;
    }
    return mask;
}

int edge_slot(int n, const Action& a) {
    if (a.is_stop()) throw PreconditionError("Stop has no edge slot");
    return action_index(n, a);
}

Eigen::MatrixXd encode(const PolicyNetwork& net, const AncestralGraph& g) {
    ad::Tape tape(false);
    const auto bound = net.bind(tape, 0);
    const AncestralGraph graphs[] = {g};
    return net.encode(tape, bound, graphs).value();
}

MaskedDistribution forward_policy(const PolicyNetwork& net, const AncestralGraph& g,
                                  const std::vector<std::uint8_t>& mask) {
    bool any = false;
    for (auto m : mask) any |= m != 0;
    if (!any) throw PreconditionError("forward policy mask excludes every action");
    const AncestralGraph graphs[] = {g};
    const std::vector<std::uint8_t> masks[] = {mask};
    const ad::Matrix lp = net.forward_logp(graphs, masks);
    return {lp.row(0).transpose().array().exp().matrix(), mask};
}

MaskedDistribution forward_policy(const PolicyNetwork& net, const AncestralGraph& g) {
    return forward_policy(net, g, valid_action_mask(g));
}

MaskedDistribution backward_policy(const PolicyNetwork& net, const AncestralGraph& g) {
    if (g.empty()) throw PreconditionError("the empty graph has no backward step");
    ad::Tape tape(false);
    const auto bound = net.bind(tape, 0);
    const AncestralGraph graphs[] = {g};
    const std::vector<std::uint8_t> masks[] = {valid_action_mask(g)};
    const auto heads = net.evaluate(tape, bound, graphs, masks);
    return {heads.backward_logp.value().row(0).transpose().array().exp().matrix(), edge_presence_mask(g)};
}

nlohmann::json params_to_json(const PolicyParams& p) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : p.tensors) {
        std::vector<double> data(static_cast<std::size_t>(t.value.size()));
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < t.value.rows(); ++r)
            for (Eigen::Index c = 0; c < t.value.cols(); ++c) data[k++] = t.value(r, c);
        tensors.push_back({{"name", t.name},
                           {"group", group_name(t.group)},
                           {"shape", {t.value.rows(), t.value.cols()}},
                           {"data", std::move(data)}});
    }
    return {{"format", "agfn-params"}, {"version", kCheckpointVersion}, {"tensors", std::move(tensors)}};
}

PolicyParams params_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "agfn-params") throw ParseError("not a parameter archive");
        if (j.at("version").get<int>() != kCheckpointVersion) throw ParseError("unsupported parameter archive version");
        PolicyParams p;
        for (const auto& t : j.at("tensors")) {
            const auto rows = t.at("shape").at(0).get<Eigen::Index>();
            const auto cols = t.at("shape").at(1).get<Eigen::Index>();
            const auto& data = t.at("data");
            if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ParseError("tensor data does not match its shape");
            ad::Matrix m(rows, cols);
            std::size_t k = 0;
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
            p.tensors.push_back({t.at("name").get<std::string>(), group_from_name(t.at("group").get<std::string>()),
                                 std::move(m)});
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed parameter archive: ") + e.what());
    }
}

}  // namespace agfn
