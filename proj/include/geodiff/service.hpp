#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "geodiff/pipeline.hpp"

namespace httplib {
class Server;
}

namespace geodiff::service {

/// Unknown session or job id (HTTP 404).
class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Request conflicts with the current state (HTTP 409).
class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fixed-size pool of worker threads draining a FIFO.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void submit(std::function<void()> task);
  /// Blocks until the queue is empty and no task runs.
  void wait_idle();

 private:
  void loop();

  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<std::function<void()>> queue_;
  std::vector<std::thread> threads_;
  std::size_t running_ = 0;
  bool stopping_ = false;
};

enum class JobState { queued, inverting, editing, done, failed };
const char* to_string(JobState s);

/// Edit sessions and jobs behind the HTTP API. Every public method is
/// thread-safe and returns the JSON response body.
class Service {
 public:
  struct Options {
    std::size_t workers = 2;
    int default_steps = 50;
  };

  Service(std::shared_ptr<const diffnet::Denoiser> model, Options options);
  ~Service();

  /// {image, mask, depth?, steps?} -> {session_id, state}
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json session_status(const std::string& id);
  /// {transform, intrinsics?} -> {warp_overlay, m_obj_t, m_disocc} (base64 PNG)
  nlohmann::json preview(const std::string& id, const nlohmann::json& body);
  /// EditConfig -> {job_id, state}
  nlohmann::json submit_edit(const std::string& id, const nlohmann::json& body);
  nlohmann::json job_status(const std::string& id);
  nlohmann::json job_result(const std::string& id);
  /// PNG bytes of the quantized attention map.
  std::vector<std::uint8_t> attention_png(const std::string& job_id, int step, int block);

  /// Number of inversions run so far.
  int inversion_count() const { return inversions_.load(); }
  void wait_idle() { pool_.wait_idle(); }

 private:
  struct Job;
  struct Session;

  std::shared_ptr<Session> session(const std::string& id);
  std::shared_ptr<Job> job(const std::string& id);
  void start(const std::shared_ptr<Session>& s, const std::shared_ptr<Job>& j);
  void run_job(const std::shared_ptr<Session>& s, const std::shared_ptr<Job>& j);
  std::shared_ptr<const pipeline::Inversion> inversion_for(Session& s, int steps, double cfg_scale);

  std::shared_ptr<const diffnet::Denoiser> model_;
  Options options_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::atomic<int> inversions_{0};
  std::atomic<long> next_id_{1};
  WorkerPool pool_;
};

/// Registers the REST routes (with permissive CORS) on `server`.
void register_routes(httplib::Server& server, Service& service);

}  // namespace geodiff::service
