#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "agfn/error.hpp"
#include "agfn/hitl.hpp"
#include "agfn/trainer.hpp"

namespace httplib {
class Server;
}

namespace agfn {

/// Unknown dataset, job, checkpoint or session id.
class NotFoundError : public Error {
public:
    using Error::Error;
};

/// Request is well formed but not allowed in the current state.
class ConflictError : public Error {
public:
    using Error::Error;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path data_dir = "agfn-data";
    int job_concurrency = 1;
    int default_sample_count = 10000;
};

/// Reads an optional JSON config file, then applies AGFN_PORT, AGFN_DATA_DIR
/// and AGFN_JOB_CONCURRENCY from the environment.
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& path);

/// 16 hex digits of FNV-1a 64 over the bytes.
std::string content_hash(std::string_view bytes);

struct SessionParams {
    std::string checkpoint;
    int sample_count = 10000;
    double reliability = 0.9;
    Strategy strategy = Strategy::CrossEntropy;
    std::uint64_t seed = 0;
    /// Stop asking after this many answers (status idle); 0 means every relation.
    int budget = 0;
    std::optional<AncestralGraph> truth;
};

/// Datasets, training jobs and elicitation sessions, persisted under
/// data_dir. Independent of the HTTP transport.
class SessionService {
public:
    explicit SessionService(ServiceConfig config);
    ~SessionService();
    SessionService(const SessionService&) = delete;
    SessionService& operator=(const SessionService&) = delete;

    const ServiceConfig& config() const { return config_; }

    nlohmann::json ingest_dataset(const std::string& csv);
    nlohmann::json start_training(const std::string& dataset_id, const TrainConfig& config);
    nlohmann::json job_status(const std::string& job_id) const;
    /// Blocks until the job leaves the queued/running states.
    nlohmann::json wait_job(const std::string& job_id) const;

    nlohmann::json open_session(const SessionParams& params);
    nlohmann::json session(const std::string& id);
    nlohmann::json answer(const std::string& id, int answer);
    nlohmann::json whatif(const std::string& id, Relation r, int answer);
    nlohmann::json trace(const std::string& id);

    /// Full weight vector of a session, for replay checks.
    std::vector<double> session_log_weights(const std::string& id);

private:
    struct Job;
    struct Session;

    std::shared_ptr<const std::vector<BeliefSample>> samples_for(const std::string& checkpoint, int count,
                                                                  std::uint64_t seed);
    std::shared_ptr<Session> find_session(const std::string& id);
    std::shared_ptr<Session> load_session(const std::string& id);
    void advance(Session& s);
    nlohmann::json snapshot(const Session& s) const;
    void append_event(const Session& s, const nlohmann::json& event) const;
    void run_job(std::shared_ptr<Job> job);

    ServiceConfig config_;
    mutable std::mutex mutex_;
    mutable std::condition_variable job_cv_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, std::shared_ptr<const std::vector<BeliefSample>>> sample_sets_;
    std::vector<std::thread> workers_;
    int running_jobs_ = 0;
    std::uint64_t next_job_ = 0;
    bool stopping_ = false;
};

/// Registers the /v1 routes on `server`.
void install_routes(httplib::Server& server, SessionService& service);

/// Blocking serve loop.
void serve(const ServiceConfig& config);

}  // namespace agfn
