#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agfn/autodiff.hpp"
#include "agfn/graph.hpp"
#include "agfn/policy.hpp"
#include "agfn/scorer.hpp"

namespace agfn {

struct TrainConfig {
    int epochs = 500;
    /// Early stopping is not considered before this many epochs.
    int min_epochs = 0;
    int batch_size = 256;
    /// Share of on-policy actions in the exploratory mixture.
    double alpha = 0.5;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
    double stop_loss = 0.1;
    int patience = 5;
    double temperature = 1.0;
    int calibration_samples = 1000;
    PolicyConfig policy;

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// s_0 (empty) -> ... -> s_T followed by Stop.
struct Trajectory {
    std::vector<AncestralGraph> states;             // T + 1 states
    std::vector<Action> actions;                    // T edge additions, then Stop
    std::vector<std::vector<std::uint8_t>> masks;   // valid-action mask per state
    std::vector<double> log_pf;                     // log pi_F(a_t | s_t) for every action, Stop included

    const AncestralGraph& final_graph() const { return states.back(); }
    int transitions() const { return static_cast<int>(states.size()) - 1; }
};

/// log R of a graph.
using LogRewardFn = std::function<double(const AncestralGraph&)>;

/// Rolls out `count` trajectories in lockstep. Each step draws an action
/// from (1 - alpha) * Uniform(valid actions) + alpha * pi_F.
std::vector<Trajectory> rollout_batch(const PolicyNetwork& net, int count, double alpha, std::mt19937_64& rng);
Trajectory rollout(const PolicyNetwork& net, double alpha, std::mt19937_64& rng);

/// Mean over all transitions of the squared detailed-balance residual
///   log[R(s') pi_B(s | s') pi_F(stop | s)] - log[R(s) pi_F(s' | s) pi_F(stop | s')].
/// Trajectories without transitions contribute nothing; an all-empty batch
/// yields a constant zero.
ad::Var db_loss(ad::Tape& tape, const PolicyNetwork& net, std::span<const ad::Var> bound,
                std::span<const Trajectory> batch, const LogRewardFn& log_reward);
double db_loss(std::span<const Trajectory> batch, const PolicyNetwork& net, const LogRewardFn& log_reward);

/// Adam on a subset of parameter groups.
class AdamOptimizer {
public:
    AdamOptimizer(const PolicyParams& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    /// grads[i] is the gradient of params.tensors[i]; only tensors whose
    /// group is in `groups` move.
    void step(PolicyParams& params, std::span<const ad::Matrix> grads, unsigned groups);

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<ad::Matrix> m_, v_;
    std::vector<long> t_;
};

struct EpochRecord {
    int epoch = 0;
    double mean_loss = 0.0;
    double mean_reward = 0.0;
    int unique_graphs = 0;
    double alpha = 0.5;
};

nlohmann::json epoch_record_to_json(const EpochRecord& r);

struct TrainResult {
    PolicyNetwork network;
    RewardSpec reward;
    std::vector<EpochRecord> log;
    bool reached_threshold = false;
    /// Training stopped on a non-finite loss; `network` holds the last finite state.
    bool diverged = false;
    std::string divergence_reason;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Calibrates the reward on untrained-policy samples, then minimises the
/// detailed-balance loss with one forward-side (encoder + forward head) Adam
/// step followed by one backward-head step per batch. Stops once the mean
/// batch loss stays below `stop_loss` for `patience` consecutive epochs
/// (after `min_epochs`) or at the epoch cap.
TrainResult train(Scorer& scorer, const TrainConfig& config, const EpochCallback& on_epoch = {});

struct GraphSample {
    AncestralGraph graph;
    double score = 0.0;       // BIC U(G)
    double log_reward = 0.0;  // log R(G)
};

/// `count` independent on-policy (alpha = 1) rollouts.
std::vector<GraphSample> sample(const PolicyNetwork& net, Scorer& scorer, const RewardSpec& spec, int count,
                                std::uint64_t seed);

/// Everything needed to sample and score after training.
struct Checkpoint {
    PolicyNetwork network;
    RewardSpec reward;
    SampleMoments moments;
    std::vector<std::string> columns;
    TrainConfig config;
};

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace agfn
