// Command-line front end: simulate, train, sample, assess, elicit, serve.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "agfn/error.hpp"
#include "agfn/hitl.hpp"
#include "agfn/oracle.hpp"
#include "agfn/scm.hpp"
#include "agfn/service.hpp"
#include "agfn/trainer.hpp"

using nlohmann::json;
using namespace agfn;

namespace {

// A table written as <prefix>.csv and <prefix>.json with the same rows.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<json>> rows;

    void add(std::vector<json> row) { rows.push_back(std::move(row)); }

    // With `jsonl`, also one object per line in <prefix>.jsonl.
    void write(const std::string& prefix, bool jsonl = false) const {
        std::ofstream csv(prefix + ".csv");
        if (!csv) throw Error("cannot write " + prefix + ".csv");
        for (std::size_t c = 0; c < columns.size(); ++c) csv << (c ? "," : "") << columns[c];
        csv << '\n';
        json arr = json::array();
        for (const auto& row : rows) {
            json obj = json::object();
            for (std::size_t c = 0; c < columns.size(); ++c) {
                const json& v = row[c];
                csv << (c ? "," : "");
                if (v.is_string()) csv << v.get<std::string>();
                else if (!v.is_null()) csv << v.dump();
                obj[columns[c]] = v;
            }
            csv << '\n';
            arr.push_back(std::move(obj));
        }
        std::ofstream js(prefix + ".json");
        if (!js) throw Error("cannot write " + prefix + ".json");
        js << arr.dump(2) << '\n';
        if (!jsonl) return;
        std::ofstream lines(prefix + ".jsonl");
        if (!lines) throw Error("cannot write " + prefix + ".jsonl");
        for (const auto& obj : arr) lines << obj.dump() << '\n';
    }
};

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << '\n';
}

AncestralGraph read_graph(const std::string& path) {
    const json j = read_json(path);
    return graph_from_json(j.contains("graph") ? j.at("graph") : j);
}

std::string relation_label(Relation r) { return std::to_string(r.u) + "-" + std::to_string(r.v); }

// --- simulate ---------------------------------------------------------------

struct SimulateOpts {
    std::string preset;
    int nodes = 0;
    int degree = 2;
    int samples = 500;
    std::uint64_t seed = 0;
    std::string out = "sim";
};

int cmd_simulate(const SimulateOpts& o) {
    if (o.preset.empty() == (o.nodes == 0)) throw PreconditionError("give exactly one of --preset or --nodes");
    const AncestralGraph g = o.preset.empty() ? random_ancestral_structure(o.nodes, o.degree, o.seed) : preset(o.preset);
    const ScmModel model = random_parameters(g, o.seed);
    const Dataset data = sample_dataset(model, o.samples, o.seed);
    write_csv_file(o.out + ".csv", data);
    json m = model_to_json(model);
    m["graph"] = to_json(g);
    m["columns"] = data.columns;
    write_json(o.out + ".model.json", m);
    std::cout << "graph " << describe(g) << "\n" << data.rows() << " rows x " << data.cols() << " columns -> "
              << o.out << ".csv\n";
    return 0;
}

// --- train ------------------------------------------------------------------

struct TrainOpts {
    std::string data;
    std::string config;
    int epochs = 500;
    int min_epochs = 0;
    double alpha = 0.5;
    int batch = 256;
    double temperature = 1.0;
    double lr = 1e-3;
    int hidden = 256;
    std::uint64_t seed = 0;
    std::string out_checkpoint = "checkpoint.json";
    std::string log;
};

int cmd_train(const TrainOpts& o, const CLI::App& app) {
    const Dataset data = read_csv_file(o.data);
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : train_config_from_json(read_json(o.config));
    auto given = [&](const char* name) { return o.config.empty() || app.count(name) > 0; };
    if (given("--epochs")) cfg.epochs = o.epochs;
    if (given("--min-epochs")) cfg.min_epochs = o.min_epochs;
    if (given("--alpha")) cfg.alpha = o.alpha;
    if (given("--batch")) cfg.batch_size = o.batch;
    if (given("--temperature")) cfg.temperature = o.temperature;
    if (given("--lr")) cfg.learning_rate = o.lr;
    if (given("--hidden")) cfg.policy.hidden = o.hidden;
    if (given("--seed")) cfg.seed = o.seed;
    cfg.validate();

    Checkpoint ck;
    ck.moments = SampleMoments::from(data);
    ck.columns = data.columns;
    ck.config = cfg;
    Scorer scorer(ck.moments);
    Table log{{"epoch", "mean_loss", "mean_reward", "unique_graphs", "alpha"}, {}};
    TrainResult result = train(scorer, cfg, [&](const EpochRecord& r) {
        log.add({r.epoch, r.mean_loss, r.mean_reward, r.unique_graphs, r.alpha});
        if (r.epoch % 50 == 0) std::cerr << "epoch " << r.epoch << " loss " << r.mean_loss << "\n";
    });
    ck.network = std::move(result.network);
    ck.reward = result.reward;
    save_checkpoint(o.out_checkpoint, ck);
    if (!o.log.empty()) log.write(o.log, true);
    std::cout << "epochs " << result.log.size() << ", final loss "
              << (result.log.empty() ? 0.0 : result.log.back().mean_loss)
              << (result.reached_threshold ? " (threshold reached)" : "") << "\n";
    if (result.diverged) {
        std::cerr << "training diverged: " << result.divergence_reason << "\n";
        return 2;
    }
    std::cout << "checkpoint -> " << o.out_checkpoint << "\n";
    return 0;
}

// --- sample -----------------------------------------------------------------

struct SampleOpts {
    std::string checkpoint;
    int count = 10000;
    std::uint64_t seed = 0;
    int top = 3;
    std::string out = "samples";
};

int cmd_sample(const SampleOpts& o) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    Scorer scorer(ck.moments);
    const auto samples = sample(ck.network, scorer, ck.reward, o.count, o.seed);
    Table t{{"index", "graph", "U", "log_R"}, {}};
    std::map<std::string, std::pair<int, const GraphSample*>> uniq;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        t.add({static_cast<int>(i), canonical_json(s.graph), s.score, s.log_reward});
        auto& slot = uniq[s.graph.key()];
        ++slot.first;
        slot.second = &s;
    }
    t.write(o.out);
    std::vector<std::pair<int, const GraphSample*>> ranked;
    for (const auto& [k, v] : uniq) ranked.push_back(v);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second->log_reward != b.second->log_reward ? a.second->log_reward > b.second->log_reward
                                                             : a.second->graph.key() < b.second->graph.key();
    });
    Table top{{"rank", "graph", "U", "log_R", "count"}, {}};
    std::cout << uniq.size() << " unique graphs in " << samples.size() << " samples\n";
    for (int k = 0; k < std::min<int>(o.top, static_cast<int>(ranked.size())); ++k) {
        const auto& [cnt, s] = ranked[static_cast<std::size_t>(k)];
        top.add({k + 1, canonical_json(s->graph), s->score, s->log_reward, cnt});
        std::cout << "#" << k + 1 << " U=" << s->score << " " << describe(s->graph) << " (" << cnt << "x)\n";
    }
    top.write(o.out + ".top");
    return 0;
}

// --- assess -----------------------------------------------------------------

struct AssessOpts {
    std::string checkpoint;
    std::string truth;
    int count = 50000;
    int bins = 20;
    std::uint64_t seed = 0;
    std::string out = "assess";
};

int cmd_assess(const AssessOpts& o) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    if (ck.network.n() > kMaxExactNodes) throw PreconditionError("assess supports at most 4 nodes");
    Scorer scorer(ck.moments);
    const ExactSpace space = exact_distribution(scorer, ck.reward);
    const auto samples = sample(ck.network, scorer, ck.reward, o.count, o.seed);
    std::vector<AncestralGraph> graphs;
    for (const auto& s : samples) graphs.push_back(s.graph);
    const double tv = total_variation(space, space.probs, graphs);

    std::vector<double> observed(space.size(), 0.0);
    for (const auto& g : graphs) {
        const std::size_t i = space.index_of(g);
        if (i < space.size()) observed[i] += 1.0 / static_cast<double>(graphs.size());
    }
    const auto em = exact_marginals(space, space.probs);
    const auto om = exact_marginals(space, observed);
    Table marg{{"relation", "feature", "expected", "observed"}, {}};
    double max_dev = 0.0;
    for (int p = 0; p < static_cast<int>(em.size()); ++p) {
        for (int k = 0; k < kNumFeatures; ++k) {
            const double e = em[static_cast<std::size_t>(p)][k], ob = om[static_cast<std::size_t>(p)][k];
            marg.add({relation_label(pair_at(space.n, p)), k + 1, e, ob});
            max_dev = std::max(max_dev, std::abs(e - ob));
        }
    }
    marg.write(o.out + ".marginals");

    const auto [lo_it, hi_it] = std::minmax_element(space.scores.begin(), space.scores.end());
    const double lo = *lo_it, width = std::max((*hi_it - lo) / o.bins, 1e-12);
    Table bic{{"bin_low", "bin_high", "expected", "observed"}, {}};
    std::vector<double> eb(static_cast<std::size_t>(o.bins), 0.0), ob(static_cast<std::size_t>(o.bins), 0.0);
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto b = static_cast<std::size_t>(std::min(o.bins - 1, static_cast<int>((space.scores[i] - lo) / width)));
        eb[b] += space.probs[i];
        ob[b] += observed[i];
    }
    for (int b = 0; b < o.bins; ++b)
        bic.add({lo + b * width, lo + (b + 1) * width, eb[static_cast<std::size_t>(b)], ob[static_cast<std::size_t>(b)]});
    bic.write(o.out + ".bic_hist");

    // SHD against the truth when given, otherwise against the highest-reward graph.
    const AncestralGraph ref = o.truth.empty()
                                   ? space.graphs[static_cast<std::size_t>(
                                         std::max_element(space.probs.begin(), space.probs.end()) - space.probs.begin())]
                                   : read_graph(o.truth);
    const int max_shd = pair_count(space.n);
    std::vector<double> es(static_cast<std::size_t>(max_shd + 1), 0.0), os(es.size(), 0.0);
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto d = static_cast<std::size_t>(shd(space.graphs[i], ref));
        es[d] += space.probs[i];
        os[d] += observed[i];
    }
    Table shd_t{{"shd", "expected", "observed"}, {}};
    for (int d = 0; d <= max_shd; ++d) shd_t.add({d, es[static_cast<std::size_t>(d)], os[static_cast<std::size_t>(d)]});
    shd_t.write(o.out + ".shd_hist");

    Table summary{{"graphs", "samples", "total_variation", "max_marginal_deviation"}, {}};
    summary.add({static_cast<int>(space.size()), o.count, tv, max_dev});
    summary.write(o.out + ".summary");
    std::ofstream dump(o.out + ".space.jsonl");
    write_space_jsonl(dump, space, ck.reward);
    std::cout << "total variation " << tv << ", max marginal deviation " << max_dev << " over " << space.size()
              << " graphs\n";
    return 0;
}

// --- elicit -----------------------------------------------------------------

struct ElicitOpts {
    std::string checkpoint;
    std::string truth;
    std::string source = "policy";
    double pi = 0.9;
    std::string strategy = "ce";
    int budget = -1;
    int repeats = 1;
    int count = 10000;
    std::uint64_t seed = 0;
    std::string out = "elicit";
};

int cmd_elicit(const ElicitOpts& o) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const AncestralGraph truth = read_graph(o.truth);
    if (truth.n() != ck.network.n()) throw StructuralError("truth graph size does not match the checkpoint");
    const Strategy strategy = strategy_from_string(o.strategy);
    const int budget = o.budget < 0 ? pair_count(truth.n()) : o.budget;
    if (o.source != "policy" && o.source != "exact") throw PreconditionError("--source must be policy or exact");
    Scorer scorer(ck.moments);
    std::optional<ExactSpace> space;
    if (o.source == "exact") space = exact_distribution(scorer, ck.reward);

    Table t{{"repeat", "step", "query", "answer", "expected_shd", "expected_bic", "ess"}, {}};
    std::vector<double> shd_sum, bic_sum;
    for (int rep = 0; rep < o.repeats; ++rep) {
        const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(rep);
        std::vector<BeliefSample> samples;
        if (space) {
            samples = sample_exact(*space, space->probs, o.count, seed);
        } else {
            for (const auto& g : sample(ck.network, scorer, ck.reward, o.count, seed))
                samples.push_back({g.graph, g.score, g.log_reward});
        }
        const auto trace = run_loop(BeliefState(std::move(samples)), &truth, o.pi, strategy, budget, seed);
        shd_sum.resize(std::max(shd_sum.size(), trace.size()), 0.0);
        bic_sum.resize(shd_sum.size(), 0.0);
        for (const auto& s : trace) {
            t.add({rep, s.step, s.query ? json(relation_label(*s.query)) : json(nullptr),
                   s.answer ? json(*s.answer) : json(nullptr), s.expected_shd, s.expected_bic, s.ess});
            shd_sum[static_cast<std::size_t>(s.step)] += s.expected_shd;
            bic_sum[static_cast<std::size_t>(s.step)] += s.expected_bic;
        }
    }
    t.write(o.out + ".trace", true);
    Table mean{{"step", "mean_expected_shd", "mean_expected_bic"}, {}};
    for (std::size_t k = 0; k < shd_sum.size(); ++k)
        mean.add({static_cast<int>(k), shd_sum[k] / o.repeats, bic_sum[k] / o.repeats});
    mean.write(o.out + ".mean");
    std::cout << "expected SHD " << shd_sum.front() / o.repeats << " -> " << shd_sum.back() / o.repeats
              << ", expected BIC " << bic_sum.front() / o.repeats << " -> " << bic_sum.back() / o.repeats << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ancestral graph sampling and expert elicitation"};
    app.require_subcommand(1);

    SimulateOpts sim;
    auto* s = app.add_subcommand("simulate", "generate an SCM and a dataset");
    s->add_option("--preset", sim.preset, "built-in structure")->check(CLI::IsMember(preset_names()));
    s->add_option("--nodes", sim.nodes, "random structure size")->check(CLI::Range(1, 32));
    s->add_option("--degree", sim.degree, "max in/out degree of random structures")->check(CLI::NonNegativeNumber);
    s->add_option("--samples", sim.samples, "rows")->check(CLI::Range(2, 100000000));
    s->add_option("--seed", sim.seed);
    s->add_option("--out", sim.out, "output prefix");

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "train a sampler on a CSV dataset");
    t->add_option("--data", tr.data)->required()->check(CLI::ExistingFile);
    t->add_option("--config", tr.config, "JSON training config; flags override it")->check(CLI::ExistingFile);
    t->add_option("--epochs", tr.epochs);
    t->add_option("--min-epochs", tr.min_epochs);
    t->add_option("--alpha", tr.alpha);
    t->add_option("--batch", tr.batch);
    t->add_option("--temperature", tr.temperature);
    t->add_option("--lr", tr.lr);
    t->add_option("--hidden", tr.hidden);
    t->add_option("--seed", tr.seed);
    t->add_option("--out-checkpoint", tr.out_checkpoint);
    t->add_option("--log", tr.log, "epoch log prefix");

    SampleOpts sa;
    auto* sp = app.add_subcommand("sample", "draw graphs from a checkpoint");
    sp->add_option("--checkpoint", sa.checkpoint)->required()->check(CLI::ExistingFile);
    sp->add_option("--count", sa.count)->check(CLI::PositiveNumber);
    sp->add_option("--seed", sa.seed);
    sp->add_option("--top", sa.top)->check(CLI::NonNegativeNumber);
    sp->add_option("--out", sa.out, "output prefix");

    AssessOpts as;
    auto* a = app.add_subcommand("assess", "compare a checkpoint with the exact distribution (n <= 4)");
    a->add_option("--checkpoint", as.checkpoint)->required()->check(CLI::ExistingFile);
    a->add_option("--truth", as.truth, "graph JSON used as the SHD reference")->check(CLI::ExistingFile);
    a->add_option("--count", as.count)->check(CLI::PositiveNumber);
    a->add_option("--bins", as.bins)->check(CLI::PositiveNumber);
    a->add_option("--seed", as.seed);
    a->add_option("--out", as.out, "output prefix");

    ElicitOpts el;
    auto* e = app.add_subcommand("elicit", "run the query loop against a simulated expert");
    e->add_option("--checkpoint", el.checkpoint)->required()->check(CLI::ExistingFile);
    e->add_option("--truth", el.truth, "true graph JSON")->required()->check(CLI::ExistingFile);
    e->add_option("--source", el.source, "policy or exact samples")->check(CLI::IsMember({"policy", "exact"}));
    e->add_option("--pi", el.pi, "expert reliability")->check(CLI::Range(0.0, 1.0));
    e->add_option("--strategy", el.strategy)->check(CLI::IsMember({"ce", "cross_entropy", "random"}));
    e->add_option("--budget", el.budget, "queries per run (default: every relation)");
    e->add_option("--repeats", el.repeats)->check(CLI::PositiveNumber);
    e->add_option("--count", el.count, "belief samples")->check(CLI::PositiveNumber);
    e->add_option("--seed", el.seed);
    e->add_option("--out", el.out, "output prefix");

    std::string config_path, data_dir;
    int port = -1;
    auto* sv = app.add_subcommand("serve", "start the HTTP service");
    sv->add_option("--config", config_path)->check(CLI::ExistingFile);
    sv->add_option("--port", port);
    sv->add_option("--data-dir", data_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*s) return cmd_simulate(sim);
        if (*t) return cmd_train(tr, *t);
        if (*sp) return cmd_sample(sa);
        if (*a) return cmd_assess(as);
        if (*e) return cmd_elicit(el);
        if (*sv) {
            ServiceConfig cfg = load_service_config(config_path.empty() ? std::nullopt
                                                                        : std::optional<std::filesystem::path>(config_path));
            if (port >= 0) cfg.port = port;
            if (!data_dir.empty()) cfg.data_dir = data_dir;
            serve(cfg);
            return 0;
        }
    } catch (const PreconditionError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 1;
}
