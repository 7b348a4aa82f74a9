#include "geodiff/service.hpp"

#include <httplib.h>

#include "geodiff/error.hpp"
#include "geodiff/io.hpp"

namespace geodiff::service {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Worker pool

WorkerPool::WorkerPool(std::size_t workers) {
  if (workers == 0) throw ValidationError("worker pool needs at least one thread");
  for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::submit(std::function<void()> task) {
  {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(task));
  }
  cv_.notify_one();
}

void WorkerPool::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && running_ == 0; });
}

void WorkerPool::loop() {
  for (;;) {
    std::function<void()> task;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      task = std::move(queue_.front());
      queue_.pop_front();
      ++running_;
    }
    task();
    {
      std::lock_guard lock(mutex_);
      --running_;
    }
    idle_cv_.notify_all();
  }
}

const char* to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::inverting: return "inverting";
    case JobState::editing: return "editing";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Sessions and jobs

struct Service::Session {
  std::string id;
  pipeline::EditInputs inputs;
  std::mutex mutex;
  std::string state = "inverting";  // inverting | ready | failed
  std::string error;
  std::map<std::pair<int, double>, std::shared_ptr<const pipeline::Inversion>> inversions;
  bool busy = false;  // an edit job is running
  std::deque<std::shared_ptr<Job>> pending;
};

struct Service::Job {
  std::string id;
  std::string session_id;
  pipeline::EditConfig config;
  std::mutex mutex;
  JobState state = JobState::queued;
  int step = 0;
  int total = 0;
  std::string error;
  std::vector<losses::LossRecord> curves;
  std::shared_ptr<const pipeline::EditResult> result;

  void advance(JobState next) {
    // States only move forward.
    if (static_cast<int>(next) > static_cast<int>(state)) state = next;
  }
};

namespace {

std::string b64_png(const Raster& r) { return io::base64_encode(io::encode_png(r)); }

const json& require(const json& body, const char* key) {
  if (!body.is_object() || !body.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
  if (!body[key].is_string()) throw ValidationError(std::string("field '") + key + "' must be a base64 string");
  return body[key];
}

json curves_json(const std::vector<losses::LossRecord>& curves) {
  json out = json::array();
  for (const auto& r : curves) out.push_back(r.to_json());
  return out;
}

}  // namespace

Service::Service(std::shared_ptr<const diffnet::Denoiser> model, Options options)
    : model_(std::move(model)), options_(options), pool_(options.workers) {
  if (!model_) throw ValidationError("service needs a model");
}

Service::~Service() { pool_.wait_idle(); }

std::shared_ptr<Service::Session> Service::session(const std::string& id) {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
  return it->second;
}

std::shared_ptr<Service::Job> Service::job(const std::string& id) {
  std::lock_guard lock(mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFound("unknown job '" + id + "'");
  return it->second;
}

std::shared_ptr<const pipeline::Inversion> Service::inversion_for(Session& s, int steps, double cfg_scale) {
  const auto key = std::make_pair(steps, cfg_scale);
  {
    std::lock_guard lock(s.mutex);
    const auto it = s.inversions.find(key);
    if (it != s.inversions.end()) return it->second;
  }
  auto inv = std::make_shared<const pipeline::Inversion>(pipeline::invert_image(*model_, s.inputs.image, steps, cfg_scale));
  ++inversions_;
  std::lock_guard lock(s.mutex);
  return s.inversions.emplace(key, std::move(inv)).first->second;
}

json Service::create_session(const json& body) {
  auto s = std::make_shared<Session>();
  s->inputs.image = io::decode_png(io::base64_decode(require(body, "image").get<std::string>()));
  s->inputs.mask = io::decode_mask_png(io::base64_decode(require(body, "mask").get<std::string>()));
  if (body.contains("depth") && !body["depth"].is_null()) {
    s->inputs.depth = io::decode_pfm(io::base64_decode(require(body, "depth").get<std::string>()));
  }
  if (!s->inputs.mask.same_grid(s->inputs.image)) throw ValidationError("mask size differs from the image");
  if (s->inputs.depth && !s->inputs.depth->same_grid(s->inputs.image)) {
    throw ValidationError("depth size differs from the image");
  }
  const int size = model_->config().latent_size;
  if (s->inputs.image.height() % size || s->inputs.image.width() % size) {
    throw ValidationError("image sides must be multiples of " + std::to_string(size));
  }
  int steps = options_.default_steps;
  if (body.contains("steps")) {
    if (!body["steps"].is_number_integer()) throw ValidationError("steps must be an integer");
    steps = body["steps"].get<int>();
    if (steps < 1 || steps > model_->schedule().train_steps) throw ValidationError("steps out of range");
  }
  s->id = "s" + std::to_string(next_id_++);
  {
    std::lock_guard lock(mutex_);
    sessions_[s->id] = s;
  }
  pool_.submit([this, s, steps] {
    try {
      inversion_for(*s, steps, 1.0);
      std::lock_guard lock(s->mutex);
      s->state = "ready";
    } catch (const std::exception& e) {
      std::lock_guard lock(s->mutex);
      s->state = "failed";
      s->error = e.what();
    }
  });
  return {{"session_id", s->id}, {"state", "inverting"}, {"steps", steps}};
}

json Service::session_status(const std::string& id) {
  auto s = session(id);
  std::lock_guard lock(s->mutex);
  json j = {{"session_id", s->id},
            {"state", s->state},
            {"height", s->inputs.image.height()},
            {"width", s->inputs.image.width()},
            {"has_depth", s->inputs.depth.has_value()}};
  if (!s->error.empty()) j["error"] = s->error;
  return j;
}

json Service::preview(const std::string& id, const json& body) {
  auto s = session(id);
  if (!body.is_object() || !body.contains("transform")) throw ValidationError("missing field 'transform'");
  const auto transform = io::transform_from_json(body["transform"]);
  std::optional<geometry::CameraIntrinsics> intrinsics;
  if (body.contains("intrinsics")) intrinsics = io::intrinsics_from_json(body["intrinsics"]);
  const auto p = pipeline::preview(s->inputs, transform, intrinsics);
  return {{"warp_overlay", b64_png(p.overlay)}, {"m_obj_t", b64_png(p.m_obj_t)}, {"m_disocc", b64_png(p.m_disocc)}};
}

json Service::submit_edit(const std::string& id, const json& body) {
  auto s = session(id);
  auto j = std::make_shared<Job>();
  j->config = pipeline::EditConfig::from_json(body);
  j->session_id = s->id;
  j->total = j->config.steps;
  {
    std::lock_guard lock(s->mutex);
    if (s->state == "inverting") throw Conflict("session '" + s->id + "' is still inverting");
    if (s->state == "failed") throw Conflict("session '" + s->id + "' failed to invert: " + s->error);
  }
  // Geometry problems surface now as validation errors rather than failed jobs.
  const Raster m_obj = mask::threshold(s->inputs.mask);
  if (j->config.transform.kind != geometry::TransformKind::identity && !mask::any(m_obj)) {
    throw ValidationError("object mask is empty");
  }
  const auto resolved = pipeline::resolve_transform(j->config.transform, m_obj, s->inputs.depth, j->config.intrinsics);
  pipeline::object_field(resolved, m_obj, s->inputs.depth, j->config.intrinsics);

  j->id = "j" + std::to_string(next_id_++);
  {
    std::lock_guard lock(mutex_);
    jobs_[j->id] = j;
  }
  bool run_now = false;
  {
    std::lock_guard lock(s->mutex);
    if (s->busy) {
      s->pending.push_back(j);
    } else {
      s->busy = true;
      run_now = true;
    }
  }
  if (run_now) start(s, j);
  return {{"job_id", j->id}, {"state", "queued"}};
}

void Service::start(const std::shared_ptr<Session>& s, const std::shared_ptr<Job>& j) {
  pool_.submit([this, s, j] {
    run_job(s, j);
    std::shared_ptr<Job> next;
    {
      std::lock_guard lock(s->mutex);
      if (s->pending.empty()) {
        s->busy = false;
      } else {
        next = s->pending.front();
        s->pending.pop_front();
      }
    }
    if (next) start(s, next);
  });
}

void Service::run_job(const std::shared_ptr<Session>& s, const std::shared_ptr<Job>& j) {
  try {
    {
      std::lock_guard lock(j->mutex);
      j->advance(JobState::inverting);
    }
    const auto inv = inversion_for(*s, j->config.steps, j->config.cfg_scale);
    {
      std::lock_guard lock(j->mutex);
      j->advance(JobState::editing);
    }
    auto progress = [&j](int step, int total, std::span<const losses::LossRecord> records) {
      std::lock_guard lock(j->mutex);
      j->step = step;
      j->total = total;
      j->curves.insert(j->curves.end(), records.begin(), records.end());
    };
    auto result = std::make_shared<const pipeline::EditResult>(
        pipeline::run_edit(*model_, s->inputs, j->config, inv.get(), progress));
    std::lock_guard lock(j->mutex);
    j->result = std::move(result);
    j->advance(JobState::done);
  } catch (const std::exception& e) {
    std::lock_guard lock(j->mutex);
    j->error = e.what();
    j->advance(JobState::failed);
  }
}

json Service::job_status(const std::string& id) {
  auto j = job(id);
  std::lock_guard lock(j->mutex);
  json out = {{"job_id", j->id},
              {"session_id", j->session_id},
              {"state", to_string(j->state)},
              {"progress",
               {{"step", j->step},
                {"total", j->total},
                {"fraction", j->total > 0 ? double(j->step) / j->total : 0.0}}},
              {"loss_curves", curves_json(j->curves)}};
  if (!j->error.empty()) out["error"] = j->error;
  return out;
}

json Service::job_result(const std::string& id) {
  auto j = job(id);
  std::shared_ptr<const pipeline::EditResult> r;
  {
    std::lock_guard lock(j->mutex);
    if (j->state == JobState::failed) throw Conflict("job '" + id + "' failed: " + j->error);
    if (j->state != JobState::done) throw Conflict("job '" + id + "' is " + to_string(j->state));
    r = j->result;
  }
  json attention = json::array();
  for (const auto& [key, dump] : r->attention) {
    attention.push_back({{"step", key.first},
                         {"block", key.second},
                         {"rows", dump.rows},
                         {"cols", dump.cols},
                         {"max", dump.max},
                         {"url", "/jobs/" + id + "/attention/" + std::to_string(key.first) + "/" +
                                     std::to_string(key.second)}});
  }
  json out = {{"job_id", id},
              {"edited", b64_png(r->edited)},
              {"baseline", b64_png(r->baseline)},
              {"warp_error", r->warp_error ? json(*r->warp_error) : json(nullptr)},
              {"loss_curves", curves_json(r->loss_curves)},
              {"diagnostics",
               {{"attention", attention}, {"seconds", r->seconds}, {"transform", io::transform_to_json(r->transform)}}}};
  return out;
}

std::vector<std::uint8_t> Service::attention_png(const std::string& job_id, int step, int block) {
  auto j = job(job_id);
  std::shared_ptr<const pipeline::EditResult> r;
  {
    std::lock_guard lock(j->mutex);
    if (j->state != JobState::done) throw Conflict("job '" + job_id + "' is " + to_string(j->state));
    r = j->result;
  }
  const auto it = r->attention.find({step, block});
  if (it == r->attention.end()) {
    throw NotFound("no attention dump for step " + std::to_string(step) + " block " + std::to_string(block));
  }
  return io::encode_png(it->second.heatmap());
}

// ---------------------------------------------------------------------------
// HTTP routes

void register_routes(httplib::Server& server, Service& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.set_payload_max_length(64u << 20);

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;
  auto guarded = [](Handler fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      auto fail = [&res](int status, const std::string& msg) {
        res.status = status;
        res.set_content(json{{"error", msg}}.dump(), "application/json");
      };
      try {
        fn(req, res);
      } catch (const NotFound& e) {
        fail(404, e.what());
      } catch (const Conflict& e) {
        fail(409, e.what());
      } catch (const ValidationError& e) {
        fail(422, e.what());
      } catch (const json::exception& e) {
        fail(422, std::string("malformed JSON: ") + e.what());
      } catch (const std::exception& e) {
        fail(500, e.what());
      }
    };
  };
  auto reply = [](httplib::Response& res, const json& body) { res.set_content(body.dump(), "application/json"); };
  auto parse = [](const httplib::Request& req) { return req.body.empty() ? json::object() : json::parse(req.body); };

  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Post("/sessions", guarded([&](const httplib::Request& req, httplib::Response& res) {
                reply(res, service.create_session(parse(req)));
              }));
  server.Get(R"(/sessions/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               reply(res, service.session_status(req.matches[1]));
             }));
  server.Post(R"(/sessions/([^/]+)/preview)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                reply(res, service.preview(req.matches[1], parse(req)));
              }));
  server.Post(R"(/sessions/([^/]+)/edits)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                reply(res, service.submit_edit(req.matches[1], parse(req)));
              }));
  server.Get(R"(/jobs/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               reply(res, service.job_status(req.matches[1]));
             }));
  server.Get(R"(/jobs/([^/]+)/result)", guarded([&](const httplib::Request& req, httplib::Response& res) {
               reply(res, service.job_result(req.matches[1]));
             }));
  server.Get(R"(/jobs/([^/]+)/attention/(-?\d+)/(-?\d+))",
             guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto png =
                   service.attention_png(req.matches[1], std::stoi(req.matches[2]), std::stoi(req.matches[3]));
               res.set_content(std::string(png.begin(), png.end()), "image/png");
             }));
}

}  // namespace geodiff::service
