#pragma once

// Colorization job service: request parsing against the annotation schema,
// a bounded job queue drained by sampler workers, and the HTTP routes.

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mtcolor/dataset.hpp"
#include "mtcolor/image.hpp"
#include "mtcolor/lexicon.hpp"
#include "mtcolor/multisample.hpp"
#include "mtcolor/trainer.hpp"

namespace mtcolor {

struct ServiceConfig {
    std::size_t queue_capacity = 8;
    int workers = 1;
    bool start_paused = false; // workers wait for resume(); lets tests fill the queue
    SamplerConfig defaults = [] {
        SamplerConfig s;
        s.luma_lock = true;
        s.clip_x0 = true;
        return s;
    }();
};

struct ParsedRequest {
    ColorizeRequest request;
    nlohmann::json echo; // normalized request without the image payload
};

namespace detail {

inline double number_in(const nlohmann::json& j, const std::string& key, double lo, double hi, double def) {
    auto it = j.find(key);
    if (it == j.end()) return def;
    if (!it->is_number()) throw SchemaError(key, "expected a number");
    const double v = it->get<double>();
    if (!(v >= lo && v <= hi))
        throw SchemaError(key, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + "," +
                                   std::to_string(hi) + "]");
    return v;
}

inline bool bool_or(const nlohmann::json& j, const std::string& key, bool def) {
    auto it = j.find(key);
    if (it == j.end()) return def;
    if (!it->is_boolean()) throw SchemaError(key, "expected true or false");
    return it->get<bool>();
}

} // namespace detail

// Throws SchemaError naming the offending field.
inline ParsedRequest parse_colorize_request(const nlohmann::json& j, int image_size, int timesteps,
                                            const SamplerConfig& defaults) {
    static const std::set<std::string> known{"gray_png_base64", "global_text", "instances", "alpha", "beta",
                                             "steps", "guidance", "seed", "luma_lock", "eta", "clip_x0"};
    if (!j.is_object()) throw SchemaError("", "request body must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw SchemaError(it.key(), "unknown field");

    ParsedRequest p;
    auto& r = p.request;
    const auto b64 = detail::require_string(j, "gray_png_base64", "");
    RgbImage img;
    try {
        img = decode_png(base64_decode(b64));
    } catch (const Error& e) {
        throw SchemaError("gray_png_base64", e.what());
    }
    if (img.width != image_size || img.height != image_size)
        throw SchemaError("gray_png_base64", "image is " + std::to_string(img.width) + "x" +
                                                 std::to_string(img.height) + ", model expects " +
                                                 std::to_string(image_size) + "x" + std::to_string(image_size));
    r.gray = gray_of(img);
    r.global_text = detail::optional_string(j, "global_text", "");

    r.masks = MaskSet(image_size, image_size);
    nlohmann::json inst_echo = nlohmann::json::array();
    if (auto it = j.find("instances"); it != j.end()) {
        if (!it->is_array()) throw SchemaError("instances", "expected an array");
        for (std::size_t k = 0; k < it->size(); ++k) {
            const std::string path = "instances[" + std::to_string(k) + "]";
            const auto& e = (*it)[k];
            if (!e.is_object()) throw SchemaError(path, "expected an object");
            auto text = detail::require_string(e, "text", path);
            auto mask = mask_from_json(detail::require(e, "mask", path), path + ".mask");
            if (mask.width() != image_size || mask.height() != image_size)
                throw SchemaError(path + ".mask", "mask is " + std::to_string(mask.width()) + "x" +
                                                      std::to_string(mask.height()) + ", image is " +
                                                      std::to_string(image_size) + "x" + std::to_string(image_size));
            if (!mask.any()) throw SchemaError(path + ".mask", "mask is empty");
            inst_echo.push_back({{"text", text}, {"mask", mask_to_json(mask)}});
            r.masks.push_back(std::move(mask));
            r.texts.push_back(std::move(text));
        }
    }

    auto& sc = r.sampler;
    sc = defaults;
    sc.alpha = detail::number_in(j, "alpha", 0, 1, defaults.alpha);
    sc.beta = detail::number_in(j, "beta", 0, 1, defaults.beta);
    sc.guidance = detail::number_in(j, "guidance", 0, 100, defaults.guidance);
    sc.eta = detail::number_in(j, "eta", 0, 10, defaults.eta);
    if (auto it = j.find("steps"); it != j.end()) {
        if (!it->is_number_integer() || it->get<long long>() < 1 || it->get<long long>() > timesteps)
            throw SchemaError("steps", "expected an integer in [1," + std::to_string(timesteps) + "]");
        sc.ddim_steps = it->get<int>();
    }
    if (auto it = j.find("seed"); it != j.end()) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0))
            throw SchemaError("seed", "expected a non-negative integer");
        sc.seed = it->get<std::uint64_t>();
    }
    sc.luma_lock = detail::bool_or(j, "luma_lock", defaults.luma_lock);
    sc.clip_x0 = detail::bool_or(j, "clip_x0", defaults.clip_x0);
    sc.threads = 1;

    p.echo = {{"global_text", r.global_text}, {"instances", std::move(inst_echo)},
              {"alpha", sc.alpha},             {"beta", sc.beta},
              {"steps", sc.ddim_steps},        {"guidance", sc.guidance},
              {"seed", sc.seed},               {"luma_lock", sc.luma_lock},
              {"eta", sc.eta},                 {"clip_x0", sc.clip_x0}};
    return p;
}

enum class JobState { queued, running, done, failed };

inline const char* to_string(JobState s) {
    switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
    }
    return "?";
}

struct Job {
    std::string id;
    JobState state = JobState::queued;
    nlohmann::json request;
    std::string result_png;
    nlohmann::json provenance;
    std::string error;
    std::int64_t created_ms = 0, started_ms = 0, finished_ms = 0;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"id", id}, {"state", to_string(state)}, {"request", request}, {"created_ms", created_ms}};
        if (started_ms) j["started_ms"] = started_ms;
        if (finished_ms) j["finished_ms"] = finished_ms;
        if (state == JobState::done) {
            j["result_png_base64"] = base64_encode(result_png);
            j["provenance"] = provenance;
        }
        if (state == JobState::failed) j["error"] = error;
        return j;
    }
};

class QueueFull : public Error {
public:
    QueueFull() : Error("job queue is full") {}
};

class ColorizeService {
public:
    ColorizeService(const Checkpoint& ckpt, ServiceConfig cfg = {})
        : cfg_(std::move(cfg)), model_(load_model(ckpt)), sched_(load_schedule(ckpt)),
          ckpt_hash_(checkpoint_hash(serialize_checkpoint(ckpt))),
          nonce_(static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count())) {
        if (cfg_.workers < 1) throw InvalidArgument("workers must be >= 1");
        if (cfg_.queue_capacity < 1) throw InvalidArgument("queue capacity must be >= 1");
        if (!cfg_.start_paused) resume();
    }
    ColorizeService(const ColorizeService&) = delete;
    ColorizeService& operator=(const ColorizeService&) = delete;

    ~ColorizeService() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void resume() {
        std::lock_guard lk(mu_);
        if (!workers_.empty()) return;
        for (int w = 0; w < cfg_.workers; ++w) workers_.emplace_back([this] { work(); });
    }

    const std::string& checkpoint_hash_hex() const { return ckpt_hash_; }
    int image_size() const { return model_.config().image_size; }

    // Validates and enqueues; returns the job id.
    std::string submit(const nlohmann::json& body) {
        auto parsed = parse_colorize_request(body, image_size(), sched_.T, cfg_.defaults);
        std::lock_guard lk(mu_);
        if (queue_.size() >= cfg_.queue_capacity) throw QueueFull();
        auto job = std::make_shared<Job>();
        job->id = "job-" + hex64(fnv1a64(std::to_string(next_id_++), nonce_));
        job->request = std::move(parsed.echo);
        job->created_ms = now_ms();
        jobs_[job->id] = job;
        queue_.push_back({job, std::move(parsed.request)});
        cv_.notify_one();
        return job->id;
    }

    std::optional<nlohmann::json> job_json(const std::string& id) const {
        std::lock_guard lk(mu_);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) return std::nullopt;
        return it->second->to_json();
    }

    // Blocks until the job leaves the queued/running states or the timeout passes.
    std::optional<nlohmann::json> wait(const std::string& id, std::chrono::milliseconds timeout) const {
        std::unique_lock lk(mu_);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) return std::nullopt;
        auto job = it->second;
        done_cv_.wait_for(lk, timeout,
                          [&] { return job->state == JobState::done || job->state == JobState::failed; });
        return job->to_json();
    }

    static nlohmann::json palette_json() {
        nlohmann::json colors = nlohmann::json::array();
        for (const auto& c : kPalette) {
            char hex[8];
            std::snprintf(hex, sizeof hex, "#%02x%02x%02x", c.rgb[0], c.rgb[1], c.rgb[2]);
            colors.push_back({{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}, {"hex", hex}});
        }
        nlohmann::json shapes = nlohmann::json::array();
        for (auto s : kShapes) shapes.push_back(s);
        return {{"colors", colors}, {"shapes", shapes}};
    }

    nlohmann::json health_json() const {
        return {{"status", "ok"}, {"checkpoint_hash", ckpt_hash_}, {"image_size", image_size()}};
    }

    void mount(httplib::Server& srv) {
        auto send = [](httplib::Response& res, int status, const nlohmann::json& j) {
            res.status = status;
            res.set_content(j.dump(), "application/json");
        };
        srv.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, 200, health_json());
        });
        srv.Get("/api/palette", [send](const httplib::Request&, httplib::Response& res) {
            send(res, 200, palette_json());
        });
        srv.Post("/api/colorize", [this, send](const httplib::Request& req, httplib::Response& res) {
            nlohmann::json body;
            try {
                body = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception& e) {
                send(res, 400, {{"error", std::string("body is not valid JSON: ") + e.what()}, {"field", ""}});
                return;
            }
            try {
                send(res, 202, {{"job_id", submit(body)}});
            } catch (const SchemaError& e) {
                send(res, 400, {{"error", e.what()}, {"field", e.field()}});
            } catch (const QueueFull& e) {
                send(res, 409, {{"error", e.what()}});
            }
        });
        srv.Get(R"(/api/jobs/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
            if (auto j = job_json(req.matches[1])) {
                send(res, 200, *j);
            } else {
                send(res, 404, {{"error", "no job '" + std::string(req.matches[1]) + "'"}});
            }
        });
    }

private:
    struct Pending {
        std::shared_ptr<Job> job;
        ColorizeRequest request;
    };

    static std::int64_t now_ms() {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    }

    void work() {
        for (;;) {
            Pending p;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
                if (stop_) return;
                p = std::move(queue_.front());
                queue_.pop_front();
                p.job->state = JobState::running;
                p.job->started_ms = now_ms();
            }
            std::string png, error;
            nlohmann::json prov;
            try {
                auto res = colorize(p.request, model_, sched_);
                png = encode_png(image_from_planar(res.rgb, image_size(), image_size()));
                prov = std::move(res.provenance);
                prov["checkpoint_hash"] = ckpt_hash_;
            } catch (const std::exception& e) {
                error = e.what();
            }
            {
                std::lock_guard lk(mu_);
                p.job->finished_ms = now_ms();
                if (error.empty()) {
                    p.job->result_png = std::move(png);
                    p.job->provenance = std::move(prov);
                    p.job->state = JobState::done;
                } else {
                    p.job->error = std::move(error);
                    p.job->state = JobState::failed;
                }
            }
            done_cv_.notify_all();
        }
    }

    ServiceConfig cfg_;
    Denoiser<float> model_;
    NoiseSchedule sched_;
    std::string ckpt_hash_;
    std::uint64_t nonce_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    mutable std::condition_variable done_cv_;
    std::deque<Pending> queue_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
    std::vector<std::thread> workers_;
    std::uint64_t next_id_ = 0;
    bool stop_ = false;
};

// MTCOLOR_ADDR wins over the flag value.
inline std::pair<std::string, int> resolve_address(const std::string& flag_addr) {
    std::string a = flag_addr;
    if (const char* env = std::getenv("MTCOLOR_ADDR"); env && *env) a = env;
    const auto colon = a.rfind(':');
    if (colon == std::string::npos || colon == 0) throw InvalidArgument("address must be HOST:PORT, got '" + a + "'");
    int port = 0;
    try {
        std::size_t used = 0;
        port = std::stoi(a.substr(colon + 1), &used);
        if (used != a.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw InvalidArgument("bad port in address '" + a + "'");
    }
    if (port < 0 || port > 65535) throw InvalidArgument("port out of range in '" + a + "'");
    return {a.substr(0, colon), port};
}

} // namespace mtcolor
