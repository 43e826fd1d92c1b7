// SPDX-License-Identifier: Apache-2.0

#include "occmove/service.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <random>
#include <sstream>
#include <thread>

#include "occmove/io.hpp"

// After Eigen: resolv.h defines _res.
#include <httplib.h>

namespace occmove {

Mask segment_flood_fill(const Tensor& image, int x, int y, double tolerance) {
    OCCMOVE_CHECK(image.channels() == 3, shape, "segmentation needs an RGB image");
    OCCMOVE_CHECK(x >= 0 && x < image.width() && y >= 0 && y < image.height(), input, "point (", x, ",", y,
                  ") outside the ", image.width(), "x", image.height(), " image");
    Mask m(MaskSpace::pixel, image.height(), image.width());
    double seed[3];
    for (int c = 0; c < 3; ++c) seed[c] = image.at(c, y, x);
    auto similar = [&](int yy, int xx) {
        for (int c = 0; c < 3; ++c)
            if (std::abs(image.at(c, yy, xx) - seed[c]) > tolerance) return false;
        return true;
    };
    std::deque<std::pair<int, int>> todo{{y, x}};
    m.set(y, x, true);
    constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
    while (!todo.empty()) {
        const auto [cy, cx] = todo.front();
        todo.pop_front();
        for (int k = 0; k < 4; ++k) {
            const int ny = cy + dy[k], nx = cx + dx[k];
            if (ny < 0 || nx < 0 || ny >= image.height() || nx >= image.width() || m.get(ny, nx)) continue;
            if (!similar(ny, nx)) continue;
            m.set(ny, nx, true);
            todo.emplace_back(ny, nx);
        }
    }
    return m;
}

std::string_view to_string(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::done: return "done";
        case JobState::failed: return "failed";
    }
    return "unknown";
}

nlohmann::json to_json(const JobSnapshot& s) {
    nlohmann::json j = {{"id", s.id},
                        {"state", to_string(s.state)},
                        {"progress", {{"done", s.done}, {"total", s.total}, {"stage", s.stage}}},
                        {"target", {s.target_x, s.target_y}},
                        {"category", s.category}};
    if (s.error) j["error"] = {{"stage", s.error->stage}, {"kind", s.error->kind}, {"message", s.error->message}};
    return j;
}

void JobStore::set_spill(std::filesystem::path dir) {
    std::lock_guard lock(m_mutex);
    m_spill = std::move(dir);
}

void JobStore::spill(const JobSnapshot& s) const {
    if (m_spill.empty()) return;
    try {
        io::write_text(m_spill / (s.id + ".json"), to_json(s).dump(2));
    } catch (const std::exception& e) {
        spdlog::warn("cannot spill job {}: {}", s.id, e.what());
    }
}

std::string JobStore::create(const EditRequest& request, const std::filesystem::path& artifact_root) {
    std::lock_guard lock(m_mutex);
    if (m_prefix.empty()) {
        std::random_device rd;
        std::ostringstream os;
        os << std::hex << rd() << rd();
        m_prefix = os.str();
    }
    const std::string id = m_prefix + "-" + std::to_string(++m_counter);
    JobSnapshot s;
    s.id = id;
    s.target_x = request.target_x;
    s.target_y = request.target_y;
    s.category = request.category;
    s.artifact_dir = artifact_root / id;
    spill(s);
    m_jobs.emplace(id, std::move(s));
    return id;
}

std::optional<JobSnapshot> JobStore::get(const std::string& id) const {
    std::lock_guard lock(m_mutex);
    const auto it = m_jobs.find(id);
    if (it == m_jobs.end()) return std::nullopt;
    return it->second;
}

void JobStore::mark_running(const std::string& id) {
    std::lock_guard lock(m_mutex);
    auto& j = m_jobs.at(id);
    if (j.state != JobState::queued) return;
    j.state = JobState::running;
    spill(j);
}

void JobStore::progress(const std::string& id, const ProgressEvent& e) {
    std::lock_guard lock(m_mutex);
    auto& j = m_jobs.at(id);
    if (j.state != JobState::running || e.done < j.done) return;
    j.done = e.done;
    j.total = e.total;
    j.stage = e.stage;
}

void JobStore::finish(const std::string& id) {
    std::lock_guard lock(m_mutex);
    auto& j = m_jobs.at(id);
    if (j.state != JobState::running) return;
    j.state = JobState::done;
    spill(j);
}

void JobStore::fail(const std::string& id, JobError error) {
    std::lock_guard lock(m_mutex);
    auto& j = m_jobs.at(id);
    if (j.state == JobState::done || j.state == JobState::failed) return;
    j.state = JobState::failed;
    j.error = std::move(error);
    spill(j);
}

std::size_t JobStore::size() const {
    std::lock_guard lock(m_mutex);
    return m_jobs.size();
}

namespace {

struct QueuedJob {
    std::string id;
    EditRequest request;
    PipelineConfig config;
    std::filesystem::path dir;
};

void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void error_reply(httplib::Response& res, int status, const std::string& message,
                 const nlohmann::json& fields = nlohmann::json::array()) {
    json_reply(res, status, {{"error", message}, {"fields", fields}});
}

std::optional<std::pair<int, int>> parse_point(const std::string& text) {
    int x = 0, y = 0;
    char comma = 0;
    std::istringstream is(text);
    if (!(is >> x >> comma >> y) || comma != ',') return std::nullopt;
    is >> std::ws;
    if (!is.eof()) return std::nullopt;
    return std::make_pair(x, y);
}

bool safe_relative(const std::string& p) {
    if (p.empty() || p.front() == '/') return false;
    const std::filesystem::path path(p);
    for (const auto& part : path)
        if (part == "..") return false;
    return true;
}

std::string content_type(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".png") return "image/png";
    if (ext == ".json") return "application/json";
    if (ext == ".csv") return "text/csv";
    return "application/octet-stream";
}

}  // namespace

struct EditService::Impl {
    std::shared_ptr<const Backbone> backbone;
    ServiceOptions options;
    httplib::Server server;
    JobStore store;

    std::mutex queue_mutex;
    std::condition_variable queue_cv;
    std::deque<QueuedJob> queue;
    bool stopping = false;
    std::vector<std::thread> workers;
    std::thread listener;
    int bound_port = 0;

    void worker_loop() {
        for (;;) {
            QueuedJob job;
            {
                std::unique_lock lock(queue_mutex);
                queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
                if (queue.empty()) return;
                job = std::move(queue.front());
                queue.pop_front();
            }
            store.mark_running(job.id);
            try {
                run_edit(*backbone, job.request, job.config, job.dir,
                         [&](const ProgressEvent& e) { store.progress(job.id, e); });
                store.finish(job.id);
                spdlog::info("job {} done", job.id);
            } catch (const StageError& e) {
                store.fail(job.id, {e.stage(), std::string(to_string(e.kind())), e.what()});
                spdlog::warn("job {} failed: {}", job.id, e.what());
            } catch (const std::exception& e) {
                store.fail(job.id, {"unknown", "contract", e.what()});
                spdlog::warn("job {} failed: {}", job.id, e.what());
            }
        }
    }

    void submit(const httplib::Request& req, httplib::Response& res) {
        nlohmann::json fields = nlohmann::json::array();
        auto field_error = [&](const std::string& f, const std::string& msg) {
            fields.push_back({{"field", f}, {"message", msg}});
        };
        auto text = [&](const std::string& key) -> std::optional<std::string> {
            if (req.has_file(key)) return req.get_file_value(key).content;
            if (req.has_param(key)) return req.get_param_value(key);
            return std::nullopt;
        };

        EditRequest er;
        if (const auto img = text("image")) {
            try {
                er.image = io::decode_png_rgb(std::vector<std::uint8_t>(img->begin(), img->end()));
            } catch (const Error& e) {
                field_error("image", e.what());
            }
        } else {
            field_error("image", "missing");
        }
        if (const auto mask = text("mask")) {
            try {
                er.visible = io::decode_png_mask(std::vector<std::uint8_t>(mask->begin(), mask->end()));
            } catch (const Error& e) {
                field_error("mask", e.what());
            }
        } else {
            field_error("mask", "missing");
        }
        if (const auto t = text("target")) {
            if (const auto p = parse_point(*t)) std::tie(er.target_x, er.target_y) = *p;
            else field_error("target", "expected \"x,y\"");
        } else {
            field_error("target", "missing");
        }
        if (const auto c = text("category")) er.category = *c;
        if (const auto p = text("prompt"); p && !p->empty()) er.prompt_override = *p;

        PipelineConfig cfg = options.config;
        if (const auto c = text("config"); c && !c->empty()) {
            try {
                merge_json(cfg, nlohmann::json::parse(*c));
                cfg.validate();
            } catch (const nlohmann::json::exception& e) {
                field_error("config", e.what());
            } catch (const Error& e) {
                field_error("config", e.what());
            }
        }
        if (fields.empty()) {
            try {
                er.validate();
            } catch (const Error& e) {
                const std::string msg = e.what();
                const std::string field = msg.find("mask") != std::string::npos     ? "mask"
                                          : msg.find("target") != std::string::npos ? "target"
                                          : msg.find("category") != std::string::npos ? "category"
                                                                                      : "image";
                field_error(field, msg);
            }
        }
        if (!fields.empty()) return error_reply(res, 400, "invalid edit request", fields);

        {
            std::lock_guard lock(queue_mutex);
            if (queue.size() >= options.queue_capacity) return error_reply(res, 429, "job queue is full");
            const std::string id = store.create(er, options.artifact_root);
            queue.push_back({id, std::move(er), std::move(cfg), options.artifact_root / id});
            json_reply(res, 202, {{"id", id}});
        }
        queue_cv.notify_one();
    }

    void routes() {
        server.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                    {"Access-Control-Allow-Headers", "Content-Type"}});
        server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
            json_reply(res, 200, {{"status", "ok"}});
        });
        server.Post("/v1/edits", [this](const httplib::Request& req, httplib::Response& res) { submit(req, res); });
        server.Get(R"(/v1/edits/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto job = store.get(req.matches[1]);
            if (!job) return error_reply(res, 404, "unknown job");
            json_reply(res, 200, to_json(*job));
        });
        server.Get(R"(/v1/edits/([^/]+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto job = store.get(req.matches[1]);
            if (!job) return error_reply(res, 404, "unknown job");
            if (job->state != JobState::done) return error_reply(res, 409, "job is " + std::string(to_string(job->state)));
            const auto bytes = io::read_bytes(job->artifact_dir / "edited.png");
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
        });
        server.Get(R"(/v1/edits/([^/]+)/artifacts)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto job = store.get(req.matches[1]);
            if (!job) return error_reply(res, 404, "unknown job");
            nlohmann::json names = nlohmann::json::array();
            if (std::filesystem::exists(job->artifact_dir)) {
                std::vector<std::string> list;
                for (const auto& e : std::filesystem::recursive_directory_iterator(job->artifact_dir))
                    if (e.is_regular_file())
                        list.push_back(std::filesystem::relative(e.path(), job->artifact_dir).generic_string());
                std::sort(list.begin(), list.end());
                names = list;
            }
            json_reply(res, 200, {{"id", job->id}, {"state", to_string(job->state)}, {"artifacts", names}});
        });
        server.Get(R"(/v1/edits/([^/]+)/artifacts/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto job = store.get(req.matches[1]);
            if (!job) return error_reply(res, 404, "unknown job");
            const std::string name = req.matches[2];
            if (!safe_relative(name)) return error_reply(res, 400, "bad artifact name");
            const auto path = job->artifact_dir / name;
            if (!std::filesystem::is_regular_file(path)) return error_reply(res, 404, "no such artifact");
            const auto bytes = io::read_bytes(path);
            res.set_content(std::string(bytes.begin(), bytes.end()), content_type(path));
        });
        server.Post("/v1/segment", [this](const httplib::Request& req, httplib::Response& res) {
            if (!options.segmenter)
                return error_reply(res, 503, "segmenter unavailable; upload a visible mask instead");
            auto text = [&](const std::string& key) -> std::optional<std::string> {
                if (req.has_file(key)) return req.get_file_value(key).content;
                if (req.has_param(key)) return req.get_param_value(key);
                return std::nullopt;
            };
            const auto img = text("image");
            const auto pt = text("point");
            if (!img || !pt) return error_reply(res, 400, "image and point are required");
            const auto p = parse_point(*pt);
            if (!p) return error_reply(res, 400, "point must be \"x,y\"");
            try {
                const Tensor image = io::decode_png_rgb(std::vector<std::uint8_t>(img->begin(), img->end()));
                const Mask m = segment_flood_fill(image, p->first, p->second, options.segment_tolerance);
                const auto png = io::encode_png_mask(m);
                res.set_content(std::string(png.begin(), png.end()), "image/png");
            } catch (const Error& e) {
                error_reply(res, 400, e.what());
            }
        });
    }
};

EditService::EditService(std::shared_ptr<const Backbone> backbone, ServiceOptions options)
    : m_impl(std::make_unique<Impl>()) {
    OCCMOVE_CHECK(backbone != nullptr, contract, "service needs a backbone");
    OCCMOVE_CHECK(options.workers >= 1, config, "service needs at least one worker");
    OCCMOVE_CHECK(options.queue_capacity >= 1, config, "queue capacity must be >= 1");
    options.config.validate();
    m_impl->backbone = std::move(backbone);
    m_impl->options = std::move(options);
    std::filesystem::create_directories(m_impl->options.artifact_root);
    if (m_impl->options.spill) m_impl->store.set_spill(m_impl->options.artifact_root);
    m_impl->routes();
}

EditService::~EditService() { stop(); }

int EditService::start() {
    auto& im = *m_impl;
    if (im.options.port == 0) im.bound_port = im.server.bind_to_any_port(im.options.host);
    else im.bound_port = im.server.bind_to_port(im.options.host, im.options.port) ? im.options.port : -1;
    OCCMOVE_CHECK(im.bound_port > 0, io, "cannot bind ", im.options.host, ":", im.options.port);
    for (int i = 0; i < im.options.workers; ++i) im.workers.emplace_back([&im] { im.worker_loop(); });
    im.listener = std::thread([&im] { im.server.listen_after_bind(); });
    im.server.wait_until_ready();
    spdlog::info("serving on {}:{} with {} worker(s)", im.options.host, im.bound_port, im.options.workers);
    return im.bound_port;
}

void EditService::run() {
    start();
    if (m_impl->listener.joinable()) m_impl->listener.join();
}

void EditService::stop() {
    if (!m_impl) return;
    auto& im = *m_impl;
    im.server.stop();
    {
        std::lock_guard lock(im.queue_mutex);
        im.stopping = true;
        im.queue.clear();
    }
    im.queue_cv.notify_all();
    if (im.listener.joinable() && im.listener.get_id() != std::this_thread::get_id()) im.listener.join();
    for (auto& w : im.workers)
        if (w.joinable()) w.join();
    im.workers.clear();
}

const JobStore& EditService::jobs() const { return m_impl->store; }

}  // namespace occmove
