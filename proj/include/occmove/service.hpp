// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "occmove/pipeline.hpp"

namespace occmove {

/// Region growing from (x, y): 4-connected pixels whose colour is within
/// `tolerance` (max channel difference) of the clicked pixel.
Mask segment_flood_fill(const Tensor& image, int x, int y, double tolerance = 0.1);

enum class JobState { queued, running, done, failed };
std::string_view to_string(JobState s);

struct JobError {
    std::string stage;
    std::string kind;
    std::string message;
};

struct JobSnapshot {
    std::string id;
    JobState state = JobState::queued;
    int done = 0;
    int total = 0;
    std::string stage;
    int target_x = 0;
    int target_y = 0;
    std::string category;
    std::optional<JobError> error;
    std::filesystem::path artifact_dir;
};

nlohmann::json to_json(const JobSnapshot& s);

/// Serialized-access registry. States only move forward and progress never
/// decreases; stale updates are ignored.
class JobStore {
public:
    /// Writes <dir>/<id>.json on every state change. Not reloaded on restart.
    void set_spill(std::filesystem::path dir);
    std::string create(const EditRequest& request, const std::filesystem::path& artifact_dir);
    std::optional<JobSnapshot> get(const std::string& id) const;
    void mark_running(const std::string& id);
    void progress(const std::string& id, const ProgressEvent& e);
    void finish(const std::string& id);
    void fail(const std::string& id, JobError error);
    std::size_t size() const;

private:
    mutable std::mutex m_mutex;
    std::map<std::string, JobSnapshot> m_jobs;
    std::uint64_t m_counter = 0;
    std::string m_prefix;
    std::filesystem::path m_spill;

    void spill(const JobSnapshot& s) const;
};

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0: any free port
    int workers = 1;
    std::size_t queue_capacity = 8;
    std::filesystem::path artifact_root = "occmove_jobs";
    PipelineConfig config;
    std::string cors_origin = "*";
    bool spill = true;  // job status files next to the artifact directories
    bool segmenter = true;
    double segment_tolerance = 0.1;
};

/// HTTP facade under /v1:
///   POST /v1/edits                     multipart: image, mask (PNG), target "x,y", category,
///                                      optional prompt and config (JSON overrides) -> 202 {"id"}
///   GET  /v1/edits/{id}                status JSON
///   GET  /v1/edits/{id}/result         edited PNG
///   GET  /v1/edits/{id}/artifacts      artifact listing
///   GET  /v1/edits/{id}/artifacts/{p}  one artifact file
///   POST /v1/segment                   multipart: image, point "x,y" -> mask PNG
///   GET  /v1/health
class EditService {
public:
    EditService(std::shared_ptr<const Backbone> backbone, ServiceOptions options);
    ~EditService();
    EditService(const EditService&) = delete;
    EditService& operator=(const EditService&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Serves on the calling thread until stop().
    void run();
    void stop();

    const JobStore& jobs() const;

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

}  // namespace occmove
