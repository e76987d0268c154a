#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "agfn/autodiff.hpp"
#include "agfn/graph.hpp"

namespace agfn {

struct PolicyConfig {
    int hidden = 256;
    int gin_layers = 2;
    double leaky_slope = 0.01;
    /// Logit assigned to masked actions before the softmax.
    double mask_epsilon = -1e5;
    /// Include one-hot node ids in the input features.
    bool node_ids = true;
};

nlohmann::json policy_config_to_json(const PolicyConfig& c);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

enum class ParamGroup : std::uint8_t { Encoder = 1, ForwardHead = 2, BackwardHead = 4 };

struct NamedTensor {
    std::string name;
    ParamGroup group;
    ad::Matrix value;
};

/// All learnable weights: the GIN encoder plus forward and backward heads.
struct PolicyParams {
    std::vector<NamedTensor> tensors;

    std::size_t scalar_count() const;
    bool all_finite() const;
};

/// Probabilities over a fixed action index set with the mask that produced them.
struct MaskedDistribution {
    Eigen::VectorXd probs;
    std::vector<std::uint8_t> mask;
};

/// Graph isomorphism network encoder with forward (add edge / stop) and
/// backward (remove edge) perceptron heads on the sum-pooled embedding.
///
/// Message passing is edge-type aware: each node sums its parents',
/// children's and spouses' states through separate linear maps, adds its own
/// state, and feeds the result through a two-layer leaky-ReLU perceptron.
/// Final head layers start at zero so an untrained policy is uniform over
/// the unmasked actions.
class PolicyNetwork {
public:
    PolicyNetwork() = default;
    PolicyNetwork(int n, PolicyConfig config, std::uint64_t seed);
    PolicyNetwork(int n, PolicyConfig config, PolicyParams params);

    int n() const { return n_; }
    const PolicyConfig& config() const { return config_; }
    PolicyParams& params() { return params_; }
    const PolicyParams& params() const { return params_; }

    /// Puts every tensor on the tape; tensors whose group is in
    /// `trainable` (bitwise-or of ParamGroup) become gradient variables.
    std::vector<ad::Var> bind(ad::Tape& tape, unsigned trainable) const;

    /// Node embeddings for a batch of graphs, rows grouped per graph (B*n x d).
    ad::Var encode(ad::Tape& tape, std::span<const ad::Var> bound, std::span<const AncestralGraph> graphs) const;

    struct Heads {
        ad::Var forward_logp;   // B x action_count(n)
        ad::Var backward_logp;  // B x edge_slot_count(n)
    };
    /// Masked log-probabilities of both heads. `forward_masks[b]` is the
    /// valid-action mask of graphs[b]; the backward mask is the set of
    /// present edges.
    Heads evaluate(ad::Tape& tape, std::span<const ad::Var> bound, std::span<const AncestralGraph> graphs,
                   std::span<const std::vector<std::uint8_t>> forward_masks) const;

    /// Forward log-probabilities only (cheaper; used for rollouts).
    ad::Matrix forward_logp(std::span<const AncestralGraph> graphs,
                            std::span<const std::vector<std::uint8_t>> forward_masks) const;

private:
    ad::Var mlp_head(ad::Tape& tape, std::span<const ad::Var> bound, std::size_t first, ad::Var x) const;
    ad::Matrix input_features(std::span<const AncestralGraph> graphs) const;

    int n_ = 0;
    PolicyConfig config_;
    PolicyParams params_;
    std::size_t forward_head_ = 0;
    std::size_t backward_head_ = 0;
};

/// Presence mask of each edge slot (3 per pair) for the backward head.
std::vector<std::uint8_t> edge_presence_mask(const AncestralGraph& g);
/// Removal slot of an AddEdge action (same indexing as the action minus Stop).
int edge_slot(int n, const Action& a);

/// Node embeddings H (n x d) of one graph.
Eigen::MatrixXd encode(const PolicyNetwork& net, const AncestralGraph& g);
/// Masked forward distribution; throws if the mask leaves nothing (Stop is always valid).
MaskedDistribution forward_policy(const PolicyNetwork& net, const AncestralGraph& g,
                                  const std::vector<std::uint8_t>& mask);
MaskedDistribution forward_policy(const PolicyNetwork& net, const AncestralGraph& g);
/// Distribution over removing one of the present edges; throws on the empty graph.
MaskedDistribution backward_policy(const PolicyNetwork& net, const AncestralGraph& g);

/// Versioned JSON archive of all tensors with a shape manifest.
nlohmann::json params_to_json(const PolicyParams& p);
PolicyParams params_from_json(const nlohmann::json& j);

}  // namespace agfn
