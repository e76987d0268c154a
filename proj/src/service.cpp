#include "agfn/service.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <httplib.h>

#include "agfn/log.hpp"
#include "agfn/scm.hpp"

namespace agfn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw NotFoundError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write " + tmp.string());
        out << bytes;
    }
    fs::rename(tmp, p);
}

// Ids become file names, so only accept what we hand out.
void check_id(const std::string& id) {
    if (id.empty() || id.size() > 64) throw NotFoundError("unknown id '" + id + "'");
    for (char c : id)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-') throw NotFoundError("unknown id '" + id + "'");
}

int env_int(const char* name, int fallback) {
    const char* v = std::getenv(name);
    if (!v || !*v) return fallback;
    try {
        return std::stoi(v);
    } catch (const std::exception&) {
        throw ParseError(std::string("environment variable ") + name + " is not an integer");
    }
}

Relation relation_from_json(const json& j, int n) {
    if (!j.is_array() || j.size() != 2) throw PreconditionError("relation must be [u, v]");
    Relation r{j.at(0).get<int>(), j.at(1).get<int>()};
    (void)pair_index(n, r);
    return r;
}

json marginals_json(const std::vector<Simplex>& m, int n) {
    json out = json::array();
    for (int p = 0; p < static_cast<int>(m.size()); ++p) {
        const Relation r = pair_at(n, p);
        out.push_back({{"relation", {r.u, r.v}}, {"probs", m[static_cast<std::size_t>(p)]}});
    }
    return out;
}

json sample_to_json(const BeliefSample& s) {
    return {{"graph", to_json(s.graph)}, {"U", s.score}, {"log_R", s.log_reward}};
}

}  // namespace

std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ServiceConfig load_service_config(const std::optional<fs::path>& path) {
    ServiceConfig c;
    if (path) {
        json j;
        try {
            j = json::parse(read_file(*path));
        } catch (const json::exception& e) {
            throw ParseError("malformed service config: " + std::string(e.what()));
        }
        c.host = j.value("host", c.host);
        c.port = j.value("port", c.port);
        c.data_dir = j.value("data_dir", c.data_dir.string());
        c.job_concurrency = j.value("job_concurrency", c.job_concurrency);
        c.default_sample_count = j.value("default_sample_count", c.default_sample_count);
    }
    c.port = env_int("AGFN_PORT", c.port);
    if (const char* d = std::getenv("AGFN_DATA_DIR"); d && *d) c.data_dir = d;
    c.job_concurrency = env_int("AGFN_JOB_CONCURRENCY", c.job_concurrency);
    if (c.port < 0 || c.port > 65535) throw ParseError("port out of range");
    if (c.job_concurrency < 1) throw ParseError("job concurrency must be at least 1");
    return c;
}

struct SessionService::Job {
    std::string id;
    std::string dataset;
    TrainConfig config;
    std::string state = "queued";
    int epoch = 0;
    double mean_loss = 0.0;
    std::string checkpoint;
    std::string reason;
};

struct SessionService::Session {
    std::string id;
    SessionParams params;
    std::vector<std::string> columns;
    BeliefState belief;
    std::optional<Relation> pending;
    std::string status;
    std::vector<TraceStep> trace;
    std::string created_at;
    std::string updated_at;
    std::mutex mu;
    json view;  // last snapshot, rebuilt after every mutation
};

SessionService::SessionService(ServiceConfig config) : config_(std::move(config)) {
    for (const char* sub : {"datasets", "checkpoints", "samples", "sessions"}) fs::create_directories(config_.data_dir / sub);
}

SessionService::~SessionService() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    job_cv_.notify_all();
    for (auto& t : workers_)
        if (t.joinable()) t.join();
}

json SessionService::ingest_dataset(const std::string& csv) {
    std::istringstream in(csv);
    const Dataset data = read_csv(in);
    const std::string id = content_hash(csv);
    const fs::path p = config_.data_dir / "datasets" / (id + ".csv");
    if (!fs::exists(p)) write_file(p, csv);
    return {{"id", id}, {"rows", data.rows()}, {"columns", data.columns}};
}

json SessionService::start_training(const std::string& dataset_id, const TrainConfig& config) {
    check_id(dataset_id);
    if (!fs::exists(config_.data_dir / "datasets" / (dataset_id + ".csv"))) {
        throw NotFoundError("unknown dataset '" + dataset_id + "'");
    }
    config.validate();
    auto job = std::make_shared<Job>();
    job->dataset = dataset_id;
    job->config = config;
    {
        std::lock_guard lock(mutex_);
        if (stopping_) throw ConflictError("service is shutting down");
        const std::string salt = dataset_id + train_config_to_json(config).dump() + std::to_string(next_job_++) +
                                 std::to_string(std::chrono::system_clock::now().time_since_epoch().count());
        job->id = content_hash(salt);
        jobs_[job->id] = job;
        workers_.emplace_back([this, job] { run_job(job); });
    }
    return job_status(job->id);
}

void SessionService::run_job(std::shared_ptr<Job> job) {
    {
        std::unique_lock lock(mutex_);
        job_cv_.wait(lock, [&] { return stopping_ || running_jobs_ < config_.job_concurrency; });
        if (stopping_) {
            job->state = "failed";
            job->reason = "service stopped";
            job_cv_.notify_all();
            return;
        }
        ++running_jobs_;
        job->state = "running";
    }
    struct Stopped {};
    try {
        const Dataset data = read_csv_file((config_.data_dir / "datasets" / (job->dataset + ".csv")).string());
        Checkpoint ck;
        ck.moments = SampleMoments::from(data);
        ck.columns = data.columns;
        ck.config = job->config;
        Scorer scorer(ck.moments);
        TrainResult result = train(scorer, job->config, [&](const EpochRecord& r) {
            std::lock_guard lock(mutex_);
            if (stopping_) throw Stopped{};
            job->epoch = r.epoch;
            job->mean_loss = r.mean_loss;
        });
        ck.network = std::move(result.network);
        ck.reward = result.reward;
        save_checkpoint((config_.data_dir / "checkpoints" / (job->id + ".json")).string(), ck);
        std::lock_guard lock(mutex_);
        job->state = "done";
        job->checkpoint = job->id;
        if (result.diverged) job->reason = result.divergence_reason;
    } catch (const Stopped&) {
        std::lock_guard lock(mutex_);
        job->state = "failed";
        job->reason = "service stopped";
    } catch (const std::exception& e) {
        std::lock_guard lock(mutex_);
        job->state = "failed";
        job->reason = e.what();
    }
    {
        std::lock_guard lock(mutex_);
        --running_jobs_;
    }
    job_cv_.notify_all();
}

json SessionService::job_status(const std::string& job_id) const {
    std::lock_guard lock(mutex_);
    const auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw NotFoundError("unknown job '" + job_id + "'");
    const Job& j = *it->second;
    json out{{"id", j.id}, {"dataset", j.dataset}, {"state", j.state}, {"epoch", j.epoch}, {"mean_loss", j.mean_loss}};
    if (j.state == "done") out["checkpoint"] = j.checkpoint;
    if (!j.reason.empty()) out["reason"] = j.reason;
    return out;
}

json SessionService::wait_job(const std::string& job_id) const {
    std::unique_lock lock(mutex_);
    const auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw NotFoundError("unknown job '" + job_id + "'");
    const auto job = it->second;
    job_cv_.wait(lock, [&] { return job->state == "done" || job->state == "failed"; });
    lock.unlock();
    return job_status(job_id);
}

std::shared_ptr<const std::vector<BeliefSample>> SessionService::samples_for(const std::string& checkpoint, int count,
                                                                              std::uint64_t seed) {
    check_id(checkpoint);
    const std::string key = checkpoint + "-" + std::to_string(count) + "-" + std::to_string(seed);
    {
        std::lock_guard lock(mutex_);
        if (const auto it = sample_sets_.find(key); it != sample_sets_.end()) return it->second;
    }
    const fs::path file = config_.data_dir / "samples" / (key + ".jsonl");
    auto samples = std::make_shared<std::vector<BeliefSample>>();
    if (fs::exists(file)) {
        std::ifstream in(file);
        std::string line;
        while (std::getline(in, line)) {
            const json j = json::parse(line);
            samples->push_back({graph_from_json(j.at("graph")), j.at("U").get<double>(), j.at("log_R").get<double>()});
        }
    } else {
        const fs::path ck_path = config_.data_dir / "checkpoints" / (checkpoint + ".json");
        if (!fs::exists(ck_path)) throw NotFoundError("unknown checkpoint '" + checkpoint + "'");
        const Checkpoint ck = load_checkpoint(ck_path.string());
        Scorer scorer(ck.moments);
        std::string bytes;
        for (const auto& g : sample(ck.network, scorer, ck.reward, count, seed)) {
            samples->push_back({g.graph, g.score, g.log_reward});
            bytes += sample_to_json(samples->back()).dump() + "\n";
        }
        write_file(file, bytes);
    }
    std::lock_guard lock(mutex_);
    return sample_sets_.try_emplace(key, std::move(samples)).first->second;
}

void SessionService::advance(Session& s) {
    const int answered = static_cast<int>(s.belief.feedbacks().size());
    s.pending.reset();
    if (s.params.budget > 0 && answered >= s.params.budget) {
        s.status = "idle";
        return;
    }
    if (s.params.strategy == Strategy::CrossEntropy) {
        s.pending = select_query(s.belief, s.params.reliability);
    } else {
        const auto open = s.belief.unqueried();
        if (!open.empty()) {
            std::mt19937_64 rng(s.params.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(answered));
            std::uniform_int_distribution<std::size_t> d(0, open.size() - 1);
            s.pending = open[d(rng)];
        }
    }
    s.status = s.pending ? "awaiting_answer" : "exhausted";
}

json SessionService::snapshot(const Session& s) const {
    const int n = s.belief.n();
    json history = json::array();
    for (const auto& fb : s.belief.feedbacks()) history.push_back({{"relation", {fb.relation.u, fb.relation.v}}, {"answer", fb.answer}});
    const TraceStep& last = s.trace.back();
    const double ess = s.belief.effective_sample_size();
    json out{{"id", s.id},
             {"checkpoint", s.params.checkpoint},
             {"n", n},
             {"columns", s.columns},
             {"status", s.status},
             {"pending_query", s.pending ? json{s.pending->u, s.pending->v} : json(nullptr)},
             {"reliability", s.params.reliability},
             {"strategy", to_string(s.params.strategy)},
             {"sample_count", s.belief.size()},
             {"marginals", marginals_json(s.belief.marginals(), n)},
             {"expected_bic", last.expected_bic},
             {"expected_shd", std::isfinite(last.expected_shd) ? json(last.expected_shd) : json(nullptr)},
             {"ess", ess},
             {"low_ess", ess < 10.0},
             {"history", history},
             {"created_at", s.created_at},
             {"updated_at", s.updated_at}};
    return out;
}

void SessionService::append_event(const Session& s, const json& event) const {
    std::ofstream out(config_.data_dir / "sessions" / (s.id + ".jsonl"), std::ios::app);
    if (!out) throw Error("cannot append to session log " + s.id);
    out << event.dump() << '\n';
}

namespace {

TraceStep make_step(const BeliefState& b, const std::optional<AncestralGraph>& truth, int step,
                    std::optional<Relation> q, std::optional<int> a) {
    TraceStep t;
    t.step = step;
    t.query = q;
    t.answer = a;
    t.expected_bic = b.expectation([](const BeliefSample& x) { return x.score; });
    t.expected_shd = truth ? b.expectation([&](const BeliefSample& x) { return static_cast<double>(shd(x.graph, *truth)); })
                           : std::numeric_limits<double>::quiet_NaN();
    t.ess = b.effective_sample_size();
    return t;
}

json params_to_json(const SessionParams& p) {
    json j{{"checkpoint", p.checkpoint},
           {"sample_count", p.sample_count},
           {"reliability", p.reliability},
           {"strategy", to_string(p.strategy)},
           {"seed", p.seed},
           {"budget", p.budget}};
    j["truth"] = p.truth ? to_json(*p.truth) : json(nullptr);
    return j;
}

SessionParams params_from_json(const json& j, int default_count) {
    SessionParams p;
    p.checkpoint = j.at("checkpoint").get<std::string>();
    p.sample_count = j.value("sample_count", default_count);
    p.reliability = j.value("reliability", p.reliability);
    p.strategy = strategy_from_string(j.value("strategy", std::string("cross_entropy")));
    p.seed = j.value("seed", p.seed);
    p.budget = j.value("budget", p.budget);
    if (j.contains("truth") && !j.at("truth").is_null()) p.truth = graph_from_json(j.at("truth"));
    return p;
}

}  // namespace

json SessionService::open_session(const SessionParams& params) {
    if (params.sample_count < 1) throw PreconditionError("sample_count must be positive");
    if (!(params.reliability >= 0.0 && params.reliability <= 1.0)) throw PreconditionError("reliability must lie in [0, 1]");
    if (params.budget < 0) throw PreconditionError("budget must be non-negative");
    check_id(params.checkpoint);
    const fs::path ck_path = config_.data_dir / "checkpoints" / (params.checkpoint + ".json");
    if (!fs::exists(ck_path)) throw NotFoundError("unknown checkpoint '" + params.checkpoint + "'");
    const Checkpoint ck = load_checkpoint(ck_path.string());
    if (params.truth && params.truth->n() != ck.network.n()) throw StructuralError("truth graph size does not match");

    auto s = std::make_shared<Session>();
    s->params = params;
    s->columns = ck.columns;
    s->belief = BeliefState(*samples_for(params.checkpoint, params.sample_count, params.seed));
    s->created_at = s->updated_at = now_iso();
    {
        std::lock_guard lock(mutex_);
        do {
            s->id = content_hash(params_to_json(params).dump() + std::to_string(next_job_++) +
                                 std::to_string(std::chrono::system_clock::now().time_since_epoch().count()));
        } while (sessions_.contains(s->id) || fs::exists(config_.data_dir / "sessions" / (s->id + ".jsonl")));
    }
    s->trace.push_back(make_step(s->belief, params.truth, 0, std::nullopt, std::nullopt));
    advance(*s);
    append_event(*s, {{"type", "open"}, {"params", params_to_json(params)}, {"at", s->created_at}});
    s->view = snapshot(*s);
    write_file(config_.data_dir / "sessions" / (s->id + ".snapshot.json"), s->view.dump());
    std::lock_guard lock(mutex_);
    sessions_[s->id] = s;
    return s->view;
}

std::shared_ptr<SessionService::Session> SessionService::load_session(const std::string& id) {
    const fs::path log = config_.data_dir / "sessions" / (id + ".jsonl");
    if (!fs::exists(log)) throw NotFoundError("unknown session '" + id + "'");
    std::ifstream in(log);
    std::string line;
    auto s = std::make_shared<Session>();
    s->id = id;
    bool opened = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json ev = json::parse(line);
        const std::string type = ev.at("type").get<std::string>();
        if (type == "open") {
            s->params = params_from_json(ev.at("params"), config_.default_sample_count);
            const Checkpoint ck =
                load_checkpoint((config_.data_dir / "checkpoints" / (s->params.checkpoint + ".json")).string());
            s->columns = ck.columns;
            s->belief = BeliefState(*samples_for(s->params.checkpoint, s->params.sample_count, s->params.seed));
            s->created_at = s->updated_at = ev.at("at").get<std::string>();
            s->trace.push_back(make_step(s->belief, s->params.truth, 0, std::nullopt, std::nullopt));
            opened = true;
        } else if (type == "answer" && opened) {
            const FeedbackRecord fb = feedback_from_json(ev.at("feedback"));
            s->belief.apply_record(fb);
            s->updated_at = ev.at("at").get<std::string>();
            s->trace.push_back(make_step(s->belief, s->params.truth, static_cast<int>(s->trace.size()), fb.relation,
                                         fb.answer));
        } else {
            throw ParseError("corrupt session log " + id);
        }
    }
    if (!opened) throw ParseError("session log " + id + " has no open event");
    advance(*s);
    s->view = snapshot(*s);
    return s;
}

std::shared_ptr<SessionService::Session> SessionService::find_session(const std::string& id) {
    check_id(id);
    {
        std::lock_guard lock(mutex_);
        if (const auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    }
    auto s = load_session(id);
    std::lock_guard lock(mutex_);
    return sessions_.try_emplace(id, std::move(s)).first->second;
}

json SessionService::session(const std::string& id) {
    auto s = find_session(id);
    std::lock_guard lock(s->mu);
    return s->view;
}

json SessionService::answer(const std::string& id, int f) {
    if (f < 1 || f > kNumFeatures) throw PreconditionError("answer must be in 1..4");
    auto s = find_session(id);
    std::lock_guard lock(s->mu);
    if (s->status != "awaiting_answer" || !s->pending) throw ConflictError("session is " + s->status);
    const Relation r = *s->pending;
    s->belief.apply(r, f, s->params.reliability);
    s->updated_at = now_iso();
    append_event(*s, {{"type", "answer"}, {"feedback", feedback_to_json(s->belief.feedbacks().back())}, {"at", s->updated_at}});
    s->trace.push_back(make_step(s->belief, s->params.truth, static_cast<int>(s->trace.size()), r, f));
    advance(*s);
    s->view = snapshot(*s);
    write_file(config_.data_dir / "sessions" / (s->id + ".snapshot.json"), s->view.dump());
    return s->view;
}

json SessionService::whatif(const std::string& id, Relation r, int f) {
    auto s = find_session(id);
    BeliefState copy;
    std::optional<AncestralGraph> truth;
    double pi = 0.0;
    {
        std::lock_guard lock(s->mu);
        copy = s->belief;
        truth = s->params.truth;
        pi = s->params.reliability;
    }
    (void)pair_index(copy.n(), r);
    const FeedbackRecord fb{r, f, pi, copy.marginal(r)};
    (void)feature_posterior(fb.prior, f, pi);
    copy.apply_record(fb);
    const TraceStep t = make_step(copy, truth, 0, r, f);
    return {{"relation", {r.u, r.v}},
            {"answer", f},
            {"marginals", marginals_json(copy.marginals(), copy.n())},
            {"expected_bic", t.expected_bic},
            {"expected_shd", std::isfinite(t.expected_shd) ? json(t.expected_shd) : json(nullptr)},
            {"ess", t.ess}};
}

json SessionService::trace(const std::string& id) {
    auto s = find_session(id);
    std::lock_guard lock(s->mu);
    json steps = json::array();
    for (const auto& t : s->trace) steps.push_back(trace_step_to_json(t));
    return {{"id", s->id}, {"steps", steps}};
}

std::vector<double> SessionService::session_log_weights(const std::string& id) {
    auto s = find_session(id);
    std::lock_guard lock(s->mu);
    return s->belief.log_weights();
}

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const json& detail = nullptr) {
    res.status = status;
    res.set_content(json{{"code", code}, {"message", message}, {"detail", detail}}.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const NotFoundError& e) {
            send_error(res, 404, "not_found", e.what());
        } catch (const ConflictError& e) {
            send_error(res, 409, "conflict", e.what());
        } catch (const DegenerateEvidenceError& e) {
            send_error(res, 422, "degenerate_evidence", e.what());
        } catch (const ParseError& e) {
            send_error(res, 400, "invalid_input", e.what());
        } catch (const PreconditionError& e) {
            send_error(res, 400, "invalid_request", e.what());
        } catch (const StructuralError& e) {
            send_error(res, 400, "invalid_request", e.what());
        } catch (const json::exception& e) {
            send_error(res, 400, "invalid_json", e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    return json::parse(req.body);
}

void reply(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

}  // namespace

void install_routes(httplib::Server& server, SessionService& svc) {
    server.Post("/v1/datasets", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
        std::string csv = req.body;
        if (req.get_header_value("Content-Type").starts_with("application/json")) {
            csv = json::parse(req.body).at("csv").get<std::string>();
        }
        reply(res, svc.ingest_dataset(csv), 201);
    }));
    server.Post("/v1/train", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
        const json j = body_json(req);
        const TrainConfig cfg = train_config_from_json(j.value("config", json::object()));
        reply(res, svc.start_training(j.at("dataset").get<std::string>(), cfg), 202);
    }));
    server.Get(R"(/v1/jobs/([A-Za-z0-9-]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
        reply(res, svc.job_status(req.matches[1]));
    }));
    server.Post("/v1/sessions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
        reply(res, svc.open_session(params_from_json(body_json(req), svc.config().default_sample_count)), 201);
    }));
    server.Get(R"(/v1/sessions/([A-Za-z0-9-]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
        reply(res, svc.session(req.matches[1]));
    }));
    server.Post(R"(/v1/sessions/([A-Za-z0-9-]+)/answer)",
                guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                    reply(res, svc.answer(req.matches[1], body_json(req).at("answer").get<int>()));
                }));
    server.Post(R"(/v1/sessions/([A-Za-z0-9-]+)/whatif)",
                guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                    const std::string id = req.matches[1];
                    const json j = body_json(req);
                    const int n = svc.session(id).at("n").get<int>();
                    reply(res, svc.whatif(id, relation_from_json(j.at("relation"), n), j.at("answer").get<int>()));
                }));
    server.Get(R"(/v1/sessions/([A-Za-z0-9-]+)/trace)",
               guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                   reply(res, svc.trace(req.matches[1]));
               }));
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such route");
    });
}

void serve(const ServiceConfig& config) {
    SessionService svc(config);
    httplib::Server server;
    install_routes(server, svc);
    std::cerr << "listening on " << config.host << ":" << config.port << " (data in " << config.data_dir.string()
              << ")\n";
    if (!server.listen(config.host, config.port)) throw Error("cannot listen on port " + std::to_string(config.port));
}

}  // namespace agfn
