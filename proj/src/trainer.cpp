#include "agfn/trainer.hpp"

#include <cmath>
#include <fstream>
#include <unordered_set>

#include "agfn/error.hpp"

namespace agfn {

namespace {

constexpr int kSampleChunk = 1024;

int draw_index(const Eigen::VectorXd& probs, std::mt19937_64& rng) {
    const double total = probs.sum();
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError("policy puts no finite mass on valid actions");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double x = u(rng) * total;
    int last = -1;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        if (probs(k) <= 0.0) continue;
        last = static_cast<int>(k);
        x -= probs(k);
        if (x < 0.0) return last;
    }
    return last;
}

unsigned groups(std::initializer_list<ParamGroup> gs) {
    unsigned m = 0;
    for (auto g : gs) m |= static_cast<unsigned>(g);
    return m;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw PreconditionError("alpha must lie in [0, 1]");
    if (batch_size < 1) throw PreconditionError("batch size must be at least 1");
    if (epochs < 0 || min_epochs < 0 || patience < 1) throw PreconditionError("invalid epoch settings");
    if (!(learning_rate > 0.0)) throw PreconditionError("learning rate must be positive");
    if (!(temperature > 0.0)) throw PreconditionError("temperature must be positive");
    if (calibration_samples < 2) throw PreconditionError("calibration needs at least 2 samples");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"min_epochs", c.min_epochs},
            {"batch_size", c.batch_size},
            {"alpha", c.alpha},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"seed", c.seed},
            {"stop_loss", c.stop_loss},
            {"patience", c.patience},
            {"temperature", c.temperature},
            {"calibration_samples", c.calibration_samples},
            {"policy", policy_config_to_json(c.policy)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    try {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.min_epochs = j.value("min_epochs", c.min_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.alpha = j.value("alpha", c.alpha);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.seed = j.value("seed", c.seed);
        c.stop_loss = j.value("stop_loss", c.stop_loss);
        c.patience = j.value("patience", c.patience);
        c.temperature = j.value("temperature", c.temperature);
        c.calibration_samples = j.value("calibration_samples", c.calibration_samples);
        if (j.contains("policy")) c.policy = policy_config_from_json(j.at("policy"));
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed training config: ") + e.what());
    } catch (const PreconditionError& e) {
        throw ParseError(e.what());
    }
}

std::vector<Trajectory> rollout_batch(const PolicyNetwork& net, int count, double alpha, std::mt19937_64& rng) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw PreconditionError("alpha must lie in [0, 1]");
    const int n = net.n();
    std::vector<Trajectory> out(static_cast<std::size_t>(std::max(count, 0)));
    std::vector<int> active;
    for (int b = 0; b < count; ++b) {
        out[b].states.emplace_back(n);
        out[b].masks.push_back(valid_action_mask(out[b].states.back()));
        active.push_back(b);
    }
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    while (!active.empty()) {
        std::vector<AncestralGraph> graphs;
        std::vector<std::vector<std::uint8_t>> masks;
        graphs.reserve(active.size());
        masks.reserve(active.size());
        for (int b : active) {
            graphs.push_back(out[b].states.back());
            masks.push_back(out[b].masks.back());
        }
        const ad::Matrix logp = net.forward_logp(graphs, masks);
        std::vector<int> still;
        for (std::size_t k = 0; k < active.size(); ++k) {
            Trajectory& tr = out[active[k]];
            std::vector<std::uint8_t> mask = tr.masks.back();
            while (true) {
                Eigen::VectorXd probs(mask.size());
                if (coin(rng) < alpha) {
                    probs = logp.row(static_cast<Eigen::Index>(k)).transpose().array().exp();
                    for (std::size_t a = 0; a < mask.size(); ++a)
                        if (!mask[a]) probs(static_cast<Eigen::Index>(a)) = 0.0;
                } else {
                    for (std::size_t a = 0; a < mask.size(); ++a) probs(static_cast<Eigen::Index>(a)) = mask[a];
                }
                const int idx = draw_index(probs, rng);
                const Action act = action_at(n, idx);
                AncestralGraph next = apply_action(tr.states.back(), act);
                if (!act.is_stop() && !is_ancestral(next)) {
                    // Revert and mask the offending action, then redraw.
                    mask[idx] = 0;
                    continue;
                }
                tr.actions.push_back(act);
                tr.log_pf.push_back(logp(static_cast<Eigen::Index>(k), idx));
                if (!act.is_stop()) {
                    tr.states.push_back(std::move(next));
                    tr.masks.push_back(valid_action_mask(tr.states.back()));
                    still.push_back(active[k]);
                }
                break;
            }
        }
        active = std::move(still);
    }
    return out;
}

Trajectory rollout(const PolicyNetwork& net, double alpha, std::mt19937_64& rng) {
    return std::move(rollout_batch(net, 1, alpha, rng).front());
}

ad::Var db_loss(ad::Tape& tape, const PolicyNetwork& net, std::span<const ad::Var> bound,
                std::span<const Trajectory> batch, const LogRewardFn& log_reward) {
    const int n = net.n();
    const int stop = action_count(n) - 1;
    std::vector<AncestralGraph> states;
    std::vector<std::vector<std::uint8_t>> masks;
    std::vector<std::pair<int, int>> f_action, f_stop_src, f_stop_dst, b_remove;
    std::vector<double> reward_delta;
    for (const auto& tr : batch) {
        if (tr.transitions() == 0) continue;
        if (tr.masks.size() != tr.states.size()) throw PreconditionError("trajectory masks do not match its states");
        const int base = static_cast<int>(states.size());
        std::vector<double> lr(tr.states.size());
        for (std::size_t t = 0; t < tr.states.size(); ++t) {
            states.push_back(tr.states[t]);
            masks.push_back(tr.masks[t]);
            lr[t] = log_reward(tr.states[t]);
            if (!std::isfinite(lr[t])) throw PreconditionError("every state needs a positive finite reward");
        }
        for (int t = 0; t < tr.transitions(); ++t) {
            const Action& a = tr.actions[t];
            f_action.emplace_back(base + t, action_index(n, a));
            f_stop_src.emplace_back(base + t, stop);
            f_stop_dst.emplace_back(base + t + 1, stop);
            b_remove.emplace_back(base + t + 1, edge_slot(n, a));
            reward_delta.push_back(lr[t + 1] - lr[t]);
        }
    }
    if (states.empty()) return tape.constant(ad::Matrix::Zero(1, 1));

    const auto heads = net.evaluate(tape, bound, states, masks);
    ad::Matrix delta(static_cast<Eigen::Index>(reward_delta.size()), 1);
    for (std::size_t k = 0; k < reward_delta.size(); ++k) delta(static_cast<Eigen::Index>(k), 0) = reward_delta[k];

    ad::Var residual = tape.constant(std::move(delta));
    residual = add(residual, gather(heads.backward_logp, b_remove));
    residual = add(residual, gather(heads.forward_logp, f_stop_src));
    residual = sub(residual, gather(heads.forward_logp, f_action));
    residual = sub(residual, gather(heads.forward_logp, f_stop_dst));
    return mean(square(residual));
}

double db_loss(std::span<const Trajectory> batch, const PolicyNetwork& net, const LogRewardFn& log_reward) {
    ad::Tape tape(false);
    const auto bound = net.bind(tape, 0);
    return db_loss(tape, net, bound, batch, log_reward).value()(0, 0);
}

AdamOptimizer::AdamOptimizer(const PolicyParams& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), t_(params.tensors.size(), 0) {
    for (const auto& t : params.tensors) {
        m_.push_back(ad::Matrix::Zero(t.value.rows(), t.value.cols()));
        v_.push_back(ad::Matrix::Zero(t.value.rows(), t.value.cols()));
    }
}

void AdamOptimizer::step(PolicyParams& params, std::span<const ad::Matrix> grads, unsigned groups) {
    if (grads.size() != params.tensors.size()) throw StructuralError("one gradient per tensor required");
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto& p = params.tensors[i];
        if (!(groups & static_cast<unsigned>(p.group))) continue;
        const auto& g = grads[i];
        ++t_[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_[i]));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_[i]));
        p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

nlohmann::json epoch_record_to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},
            {"mean_loss", r.mean_loss},
            {"mean_reward", r.mean_reward},
            {"unique_graphs", r.unique_graphs},
            {"alpha", r.alpha}};
}

TrainResult train(Scorer& scorer, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    const int n = scorer.moments().n();
    if (scorer.moments().m < n + 1) throw PreconditionError("training needs at least n + 1 samples");
    std::mt19937_64 rng(config.seed);

    TrainResult result;
    result.network = PolicyNetwork(n, config.policy, rng());

    // Untrained policy samples fix the reward's location and scale.
    {
        const auto calib = rollout_batch(result.network, config.calibration_samples, 1.0, rng);
        std::vector<double> scores;
        scores.reserve(calib.size());
        for (const auto& tr : calib) scores.push_back(scorer.score(tr.final_graph()));
        result.reward = calibrate_reward(scores, config.temperature);
    }
    const RewardSpec spec = result.reward;
    const LogRewardFn log_r = [&scorer, spec](const AncestralGraph& g) { return log_reward(scorer.score(g), spec); };

    PolicyNetwork& net = result.network;
    AdamOptimizer adam(net.params(), config.learning_rate, config.beta1, config.beta2);
    const unsigned forward_side = groups({ParamGroup::Encoder, ParamGroup::ForwardHead});
    const unsigned backward_side = groups({ParamGroup::BackwardHead});

    auto gradients = [&](unsigned trainable, const std::vector<Trajectory>& batch, double& loss_value) {
        ad::Tape tape;
        const auto bound = net.bind(tape, trainable);
        const ad::Var loss = db_loss(tape, net, bound, batch, log_r);
        loss_value = loss.value()(0, 0);
        std::vector<ad::Matrix> grads;
        grads.reserve(bound.size());
        if (tape.requires_grad(loss)) {
            tape.backward(loss);
            for (const auto& v : bound) grads.push_back(tape.grad(v));
        } else {
            for (const auto& v : bound) grads.push_back(ad::Matrix::Zero(v.rows(), v.cols()));
        }
        return grads;
    };

    int below = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        PolicyParams last_finite = net.params();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.alpha = config.alpha;
        try {
            const auto batch = rollout_batch(net, config.batch_size, config.alpha, rng);
            double loss = 0.0;
            const auto g_fwd = gradients(forward_side, batch, loss);
            adam.step(net.params(), g_fwd, forward_side);
            double loss_b = 0.0;
            const auto g_bwd = gradients(backward_side, batch, loss_b);
            adam.step(net.params(), g_bwd, backward_side);
            if (!std::isfinite(loss) || !net.params().all_finite()) throw NumericalError("non-finite training loss");

            std::unordered_set<std::string> unique;
            double reward_sum = 0.0;
            for (const auto& tr : batch) {
                unique.insert(tr.final_graph().key());
                reward_sum += std::exp(log_r(tr.final_graph()));
            }
            rec.mean_loss = loss;
            rec.mean_reward = reward_sum / static_cast<double>(batch.size());
            rec.unique_graphs = static_cast<int>(unique.size());
        } catch (const NumericalError& e) {
            net.params() = std::move(last_finite);
            result.diverged = true;
            result.divergence_reason = e.what();
            break;
        }
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);

        below = rec.mean_loss < config.stop_loss ? below + 1 : 0;
        if (below >= config.patience && epoch >= config.min_epochs) {
            result.reached_threshold = true;
            break;
        }
    }
    return result;
}

std::vector<GraphSample> sample(const PolicyNetwork& net, Scorer& scorer, const RewardSpec& spec, int count,
                                std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GraphSample> out;
    out.reserve(static_cast<std::size_t>(std::max(count, 0)));
    for (int done = 0; done < count;) {
        const int chunk = std::min(kSampleChunk, count - done);
        for (auto& tr : rollout_batch(net, chunk, 1.0, rng)) {
            const double u = scorer.score(tr.final_graph());
            out.push_back({tr.final_graph(), u, log_reward(u, spec)});
        }
        done += chunk;
    }
    return out;
}

nlohmann::json checkpoint_to_json(const Checkpoint& c) {
    return {{"format", "agfn-checkpoint"},
            {"version", 1},
            {"n", c.network.n()},
            {"columns", c.columns},
            {"policy", policy_config_to_json(c.network.config())},
            {"params", params_to_json(c.network.params())},
            {"reward", reward_spec_to_json(c.reward)},
            {"moments", moments_to_json(c.moments)},
            {"train_config", train_config_to_json(c.config)}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "agfn-checkpoint") throw ParseError("not a checkpoint");
        if (j.at("version").get<int>() != 1) throw ParseError("unsupported checkpoint version");
        Checkpoint c;
        const int n = j.at("n").get<int>();
        c.network = PolicyNetwork(n, policy_config_from_json(j.at("policy")), params_from_json(j.at("params")));
        c.reward = reward_spec_from_json(j.at("reward"));
        c.moments = moments_from_json(j.at("moments"));
        c.columns = j.at("columns").get<std::vector<std::string>>();
        c.config = train_config_from_json(j.at("train_config"));
        if (c.moments.n() != n || static_cast<int>(c.columns.size()) != n) {
            throw ParseError("checkpoint sizes are inconsistent");
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << checkpoint_to_json(c).dump();
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    try {
        return checkpoint_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
}

}  // namespace agfn
