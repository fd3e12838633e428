#include "banditd/http_api.hpp"

#include <httplib.h>
#include <sys/random.h>

#include <charconv>

namespace banditd {

namespace {

constexpr const char* kJsonType = "application/json; charset=utf-8";
constexpr const char* kBadExperiment = "invalid_experiment_or_key";

std::optional<Document> parse_object(const std::optional<std::string>& text) {
  if (!text) return std::nullopt;
  Document doc = Document::parse(*text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return std::nullopt;
  return doc;
}

std::optional<std::uint64_t> parse_count(const std::optional<std::string>& text) {
  if (!text) return std::nullopt;
  std::uint64_t v = 0;
  const char* end = text->data() + text->size();
  auto [ptr, ec] = std::from_chars(text->data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

// Failures raised while running a policy or touching the registry.
ApiReply from_error(const Error& e) {
  switch (e.code()) {
    case Errc::unknown_experiment:
    case Errc::auth_failure:
      return api_error(401, kBadExperiment, "invalid experiment id or key");
    case Errc::context_invalid:
      return api_error(422, "context_schema", e.what());
    case Errc::schema_violation:
    case Errc::invalid_observation:
    case Errc::dimension_mismatch:
      return api_error(422, "schema_violation", e.what());
    case Errc::invalid_config:
    case Errc::unknown_kind:
      return api_error(400, "invalid_config", e.what());
    case Errc::cycle_detected:
      return api_error(400, "cycle_detected", e.what());
    case Errc::in_use:
      return api_error(409, "in_use", e.what());
    case Errc::invalid_key:
      return api_error(400, "invalid_parameter", e.what());
    case Errc::singular_model:
    case Errc::empty_list:
    case Errc::malformed_document:
    case Errc::io_error:
      break;
  }
  return api_error(500, to_string(e.code()), e.what());
}

std::uint64_t random_seed() {
  std::uint64_t seed = 0;
  if (getrandom(&seed, sizeof seed, 0) != static_cast<ssize_t>(sizeof seed)) {
    seed = static_cast<std::uint64_t>(now_micros());
  }
  return seed;
}

}  // namespace

ApiReply api_error(int status, std::string_view code, std::string_view message) {
  return {status, {{"error", code}, {"message", message}}};
}

DecisionApi::DecisionApi(ExperimentRegistry& registry, Options options)
    : registry_(registry), options_(std::move(options)) {
  if (options_.seed == 0) options_.seed = random_seed();
}

bool DecisionApi::admin_ok(const std::optional<std::string>& token) const {
  return !options_.admin_token.empty() && token &&
         constant_time_equal(*token, options_.admin_token);
}

std::optional<ApiReply> DecisionApi::authenticate(ExperimentId id,
                                                  const std::optional<std::string>& key) {
  try {
    registry_.authenticate(id, key.value_or(""));
    return std::nullopt;
  } catch (const Error&) {
    return api_error(401, kBadExperiment, "invalid experiment id or key");
  }
}

std::optional<ApiReply> DecisionApi::authenticate_reader(
    ExperimentId id, const std::optional<std::string>& key,
    const std::optional<std::string>& admin_token) {
  if (admin_token && admin_ok(admin_token)) {
    if (registry_.find(id)) return std::nullopt;
    return api_error(401, kBadExperiment, "invalid experiment id or key");
  }
  return authenticate(id, key);
}

std::mutex& DecisionApi::reward_mutex(ExperimentId id) {
  std::lock_guard lock(reward_mutexes_guard_);
  auto& slot = reward_mutexes_[id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

ApiReply DecisionApi::get_action(ExperimentId id, const ApiParams& params) {
  if (auto denied = authenticate(id, params.key)) return *denied;
  auto context = parse_object(params.context ? params.context : std::string("{}"));
  if (!context) return api_error(400, "malformed_context", "context must be a JSON object");

  try {
    auto policy = registry_.policy_of(id);
    if (!policy) return api_error(401, kBadExperiment, "invalid experiment id or key");
    Rng rng(mix_seed(options_.seed, request_counter_.fetch_add(1)));
    DecisionOutcome outcome =
        policy->decide(PolicyScope{id, &registry_.store(), &registry_, 0}, *context, rng);
    registry_.append_log(id, RecordKind::decision, *context, outcome.action, std::nullopt,
                         outcome.log_hint);
    return {200, {{"action", std::move(outcome.action)}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::set_reward(ExperimentId id, const ApiParams& params) {
  if (auto denied = authenticate(id, params.key)) return *denied;
  auto context = parse_object(params.context);
  if (!context) return api_error(400, "malformed_context", "context must be a JSON object");
  auto action = parse_object(params.action);
  if (!action) return api_error(400, "malformed_action", "action must be a JSON object");
  auto reward = parse_object(params.reward);
  if (!reward) return api_error(400, "malformed_reward", "reward must be a JSON object");

  try {
    auto policy = registry_.policy_of(id);
    if (!policy) return api_error(401, kBadExperiment, "invalid experiment id or key");
    std::lock_guard lock(reward_mutex(id));
    policy->summarize(PolicyScope{id, &registry_.store(), &registry_, 0}, *context, *action,
                      *reward);
    registry_.append_log(id, RecordKind::reward, *context, *action, *reward);
    return {200, {{"status", "ok"}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::theta(ExperimentId id, const std::optional<std::string>& key,
                            const std::optional<std::string>& admin_token,
                            const std::optional<std::string>& name,
                            const std::optional<std::string>& key_field,
                            const std::optional<std::string>& value) {
  if (auto denied = authenticate_reader(id, key, admin_token)) return *denied;
  auto matches = [](const std::optional<std::string>& filter, const std::string& v) {
    return !filter || filter->empty() || *filter == v;
  };
  try {
    Document out = Document::array();
    for (const auto& record : registry_.store().records(id)) {
      if (matches(name, record.key.name) && matches(key_field, record.key.key) &&
          matches(value, record.key.value.value_or(""))) {
        out.push_back(to_document(record));
      }
    }
    return {200, {{"theta", std::move(out)}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::logs(ExperimentId id, const std::optional<std::string>& key,
                           const std::optional<std::string>& admin_token,
                           const std::optional<std::string>& limit,
                           const std::optional<std::string>& offset) {
  if (auto denied = authenticate_reader(id, key, admin_token)) return *denied;
  const auto lim = limit ? parse_count(limit) : std::optional<std::uint64_t>(100);
  const auto off = offset ? parse_count(offset) : std::optional<std::uint64_t>(0);
  if (!lim || *lim > ExperimentRegistry::kMaxLogPage) {
    return api_error(400, "malformed_limit",
                     "limit must be an integer no larger than " +
                         std::to_string(ExperimentRegistry::kMaxLogPage));
  }
  if (!off) return api_error(400, "malformed_offset", "offset must be a nonnegative integer");
  try {
    Document out = Document::array();
    for (const auto& r : registry_.get_logs(id, *lim, *off)) out.push_back(to_document(r));
    return {200, {{"logs", std::move(out)}, {"total", registry_.log_size(id)}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::log_data(ExperimentId id, const ApiParams& params) {
  if (auto denied = authenticate(id, params.key)) return *denied;
  auto payload = parse_object(params.context);
  if (!payload) return api_error(400, "malformed_context", "context must be a JSON object");
  try {
    auto record = registry_.append_log(id, RecordKind::custom, *payload, std::nullopt,
                                       std::nullopt);
    return {200, {{"status", "ok"}, {"t", record.t}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::create_experiment(const std::optional<std::string>& token,
                                        const std::string& body) {
  if (!admin_ok(token)) return api_error(401, "admin_token", "missing or wrong admin token");
  Document doc = Document::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    return api_error(400, "malformed_body", "body must be a JSON object");
  }
  auto name = doc.find("name");
  if (name == doc.end() || !name->is_string()) {
    return api_error(400, "malformed_body", "body needs a string 'name'");
  }
  auto config = doc.find("config");
  if (config == doc.end()) return api_error(400, "malformed_body", "body needs 'config'");
  try {
    Experiment e = registry_.create(name->get<std::string>(), policy_config_from_document(*config));
    return {200, {{"id", e.id}, {"key", e.key}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

ApiReply DecisionApi::list_experiments(const std::optional<std::string>& token) {
  if (!admin_ok(token)) return api_error(401, "admin_token", "missing or wrong admin token");
  Document out = Document::array();
  for (const auto& e : registry_.list()) out.push_back(to_document(e, false));
  return {200, {{"experiments", std::move(out)}}};
}

ApiReply DecisionApi::update_experiment(const std::optional<std::string>& token, ExperimentId id,
                                        const std::string& body) {
  if (!admin_ok(token)) return api_error(401, "admin_token", "missing or wrong admin token");
  Document doc = Document::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("config")) {
    return api_error(400, "malformed_body", "body must be an object with 'config'");
  }
  try {
    Experiment e = registry_.update(id, policy_config_from_document(doc["config"]));
    return {200, to_document(e, false)};
  } catch (const Error& e) {
    if (e.code() == Errc::unknown_experiment) return api_error(404, "not_found", e.what());
    return from_error(e);
  }
}

ApiReply DecisionApi::delete_experiment(const std::optional<std::string>& token,
                                        ExperimentId id) {
  if (!admin_ok(token)) return api_error(401, "admin_token", "missing or wrong admin token");
  try {
    registry_.remove(id);
    {
      std::lock_guard lock(reward_mutexes_guard_);
      reward_mutexes_.erase(id);
    }
    return {200, {{"status", "ok"}}};
  } catch (const Error& e) {
    if (e.code() == Errc::unknown_experiment) return api_error(404, "not_found", e.what());
    return from_error(e);
  }
}

// ---- HttpServer ------------------------------------------------------------

namespace {

std::optional<std::string> param(const httplib::Request& req, const char* name) {
  if (req.has_param(name)) return req.get_param_value(name);
  return std::nullopt;
}

// Query/form parameters, overlaid by a JSON body whose members may be either
// documents or strings holding documents.
ApiParams wire_params(const httplib::Request& req) {
  ApiParams p{param(req, "key"), param(req, "context"), param(req, "action"),
              param(req, "reward")};
  if (req.method == "POST" && !req.body.empty() &&
      req.get_header_value("Content-Type").find("application/json") != std::string::npos) {
    Document body = Document::parse(req.body, nullptr, false);
    if (body.is_object()) {
      auto take = [&](const char* name, std::optional<std::string>& slot) {
        auto it = body.find(name);
        if (it == body.end()) return;
        slot = it->is_string() ? it->get<std::string>() : it->dump();
      };
      take("key", p.key);
      take("context", p.context);
      take("action", p.action);
      take("reward", p.reward);
    }
  }
  return p;
}

std::optional<ExperimentId> path_id(const httplib::Request& req) {
  const std::string& text = req.matches[1].str();
  ExperimentId id = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), id);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return id;
}

void send(httplib::Response& res, const ApiReply& reply) {
  res.status = reply.status;
  res.set_content(reply.body.dump(), kJsonType);
}

std::optional<std::string> admin_header(const httplib::Request& req) {
  if (!req.has_header("X-Admin-Token")) return std::nullopt;
  return req.get_header_value("X-Admin-Token");
}

}  // namespace

HttpServer::HttpServer(DecisionApi& api) : HttpServer(api, Options{}) {}

HttpServer::HttpServer(DecisionApi& api, Options options)
    : api_(api), options_(options), server_(std::make_unique<httplib::Server>()) {
  const std::size_t threads = std::max<std::size_t>(options_.threads, 1);
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  server_->set_keep_alive_max_count(1'000'000);
  server_->set_keep_alive_timeout(2);
  server_->set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  install_routes();
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::install_routes() {
  auto with_id = [this](auto handler) {
    return [this, handler](const httplib::Request& req, httplib::Response& res) {
      auto id = path_id(req);
      if (!id) {
        send(res, api_error(401, kBadExperiment, "invalid experiment id or key"));
        return;
      }
      send(res, handler(*id, req));
    };
  };

  auto getaction = with_id([this](ExperimentId id, const httplib::Request& req) {
    return api_.get_action(id, wire_params(req));
  });
  auto setreward = with_id([this](ExperimentId id, const httplib::Request& req) {
    return api_.set_reward(id, wire_params(req));
  });
  auto logdata = with_id([this](ExperimentId id, const httplib::Request& req) {
    return api_.log_data(id, wire_params(req));
  });
  server_->Get(R"(/(\d+)/get[aA]ction\.json)", getaction);
  server_->Post(R"(/(\d+)/get[aA]ction\.json)", getaction);
  server_->Get(R"(/(\d+)/set[rR]eward\.json)", setreward);
  server_->Post(R"(/(\d+)/set[rR]eward\.json)", setreward);
  server_->Get(R"(/(\d+)/logdata\.json)", logdata);
  server_->Post(R"(/(\d+)/logdata\.json)", logdata);

  server_->Get(R"(/(\d+)/theta\.json)",
               with_id([this](ExperimentId id, const httplib::Request& req) {
                 return api_.theta(id, param(req, "key"), admin_header(req), param(req, "name"),
                                   param(req, "key_field"), param(req, "value"));
               }));
  server_->Get(R"(/(\d+)/log\.json)",
               with_id([this](ExperimentId id, const httplib::Request& req) {
                 return api_.logs(id, param(req, "key"), admin_header(req), param(req, "limit"),
                                  param(req, "offset"));
               }));

  server_->Post("/management/exp", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, api_.create_experiment(admin_header(req), req.body));
  });
  server_->Get("/management/exp", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, api_.list_experiments(admin_header(req)));
  });
  auto manage_one = [this](auto handler) {
    return [this, handler](const httplib::Request& req, httplib::Response& res) {
      auto id = path_id(req);
      if (!id) {
        send(res, api_error(404, "not_found", "no such experiment"));
        return;
      }
      send(res, handler(*id, req));
    };
  };
  server_->Put(R"(/management/exp/(\d+))",
               manage_one([this](ExperimentId id, const httplib::Request& req) {
                 return api_.update_experiment(admin_header(req), id, req.body);
               }));
  server_->Delete(R"(/management/exp/(\d+))",
                  manage_one([this](ExperimentId id, const httplib::Request& req) {
                    return api_.delete_experiment(admin_header(req), id);
                  }));

  server_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* code = res.status == 404   ? "not_found"
                       : res.status == 414 ? "uri_too_long"
                                           : "bad_request";
    res.set_content(api_error(res.status, code, httplib::status_message(res.status)).body.dump(),
                    kJsonType);
  });
  server_->set_exception_handler(
      [](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string message = "internal error";
        try {
          std::rethrow_exception(ep);
        } catch (const std::exception& e) {
          message = e.what();
        } catch (...) {
        }
        send(res, api_error(500, "internal", message));
      });
}

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  if (!server_->bind_to_port(host, port)) return -1;
  return port;
}

void HttpServer::listen() { server_->listen_after_bind(); }

int HttpServer::start(const std::string& host, int port) {
  const int bound = bind(host, port);
  if (bound < 0) throw Error(Errc::io_error, "cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { listen(); });
  server_->wait_until_ready();
  return bound;
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace banditd
