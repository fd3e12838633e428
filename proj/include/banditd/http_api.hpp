#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "banditd/experiment.hpp"

namespace httplib {
class Server;
}

namespace banditd {

// Longest request target accepted; bigger contexts must be POSTed.
inline constexpr std::size_t kMaxUrlLength = 16 * 1024;

struct ApiReply {
  int status = 200;
  Document body = Document::object();
};

// {"error": code, "message": message}
ApiReply api_error(int status, std::string_view code, std::string_view message);

// Request parameters as they arrive on the wire: raw, still URL-decoded JSON
// text.  Missing parameters are nullopt.
struct ApiParams {
  std::optional<std::string> key;
  std::optional<std::string> context;
  std::optional<std::string> action;
  std::optional<std::string> reward;
};

// The protocol independent of any socket: each handler maps one endpoint to
// a status and a JSON body.  HttpServer binds these to routes.
class DecisionApi {
 public:
  struct Options {
    std::string admin_token;
    // Base seed for per-request generators; 0 draws one at random.
    std::uint64_t seed = 0;
  };

  DecisionApi(ExperimentRegistry& registry, Options options);

  // GET /:id/getaction.json
  ApiReply get_action(ExperimentId id, const ApiParams& params);
  // GET /:id/setreward.json
  ApiReply set_reward(ExperimentId id, const ApiParams& params);
  // Read endpoints accept either the experiment key or the admin token.
  //
  // GET /:id/theta.json; empty filters match everything.
  ApiReply theta(ExperimentId id, const std::optional<std::string>& key,
                 const std::optional<std::string>& admin_token,
                 const std::optional<std::string>& name,
                 const std::optional<std::string>& key_field,
                 const std::optional<std::string>& value);
  // GET /:id/log.json
  ApiReply logs(ExperimentId id, const std::optional<std::string>& key,
                const std::optional<std::string>& admin_token,
                const std::optional<std::string>& limit, const std::optional<std::string>& offset);
  // GET /:id/logdata.json: a custom logbook entry carried in `context`.
  ApiReply log_data(ExperimentId id, const ApiParams& params);

  // /management/exp, guarded by the admin token.
  ApiReply create_experiment(const std::optional<std::string>& token, const std::string& body);
  ApiReply list_experiments(const std::optional<std::string>& token);
  ApiReply update_experiment(const std::optional<std::string>& token, ExperimentId id,
                             const std::string& body);
  ApiReply delete_experiment(const std::optional<std::string>& token, ExperimentId id);

  ExperimentRegistry& registry() { return registry_; }

 private:
  bool admin_ok(const std::optional<std::string>& token) const;
  std::optional<ApiReply> authenticate(ExperimentId id, const std::optional<std::string>& key);
  std::optional<ApiReply> authenticate_reader(ExperimentId id,
                                              const std::optional<std::string>& key,
                                              const std::optional<std::string>& admin_token);
  std::mutex& reward_mutex(ExperimentId id);

  ExperimentRegistry& registry_;
  Options options_;
  std::atomic<std::uint64_t> request_counter_{0};

  // Serialises summary + log append per experiment so the logbook order is
  // the order in which theta absorbed the rewards.
  std::mutex reward_mutexes_guard_;
  std::map<ExperimentId, std::unique_ptr<std::mutex>> reward_mutexes_;
};

// cpp-httplib front end for DecisionApi.
class HttpServer {
 public:
  struct Options {
    std::size_t threads = 32;
  };

  explicit HttpServer(DecisionApi& api);
  HttpServer(DecisionApi& api, Options options);
  ~HttpServer();

  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds; port 0 picks a free one.  Returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  // bind + listen on a background thread.
  int start(const std::string& host, int port);
  void stop();

 private:
  void install_routes();

  DecisionApi& api_;
  Options options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace banditd
