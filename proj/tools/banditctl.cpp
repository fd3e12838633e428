// banditctl: run the decision server and administer it over HTTP.

#include <httplib.h>
#include <signal.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "banditd/experiment.hpp"
#include "banditd/http_api.hpp"
#include "banditd/simulator.hpp"
#include "banditd/theta_store.hpp"

namespace {

using banditd::Document;

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : std::move(fallback);
}

Document read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open " + path);
  Document doc = Document::parse(in, nullptr, false);
  if (doc.is_discarded()) throw CliError(path + " is not valid JSON");
  return doc;
}

// Thin HTTP client for the management and read endpoints.
class AdminClient {
 public:
  AdminClient(const std::string& server, std::string token)
      : client_(server), token_(std::move(token)) {
    client_.set_connection_timeout(5);
    client_.set_read_timeout(60);
  }

  Document get(const std::string& path) { return check(client_.Get(path, headers())); }
  Document post(const std::string& path, const Document& body) {
    return check(client_.Post(path, headers(), body.dump(), "application/json"));
  }
  Document del(const std::string& path) { return check(client_.Delete(path, headers())); }

 private:
  httplib::Headers headers() const { return {{"X-Admin-Token", token_}}; }

  static Document check(const httplib::Result& res) {
    if (!res) throw CliError("request failed: " + httplib::to_string(res.error()));
    Document body = Document::parse(res->body, nullptr, false);
    if (res->status != 200) {
      std::string message = body.is_object() ? body.value("message", res->body) : res->body;
      std::string code = body.is_object() ? body.value("error", "") : "";
      throw CliError("HTTP " + std::to_string(res->status) + (code.empty() ? "" : " " + code) +
                     ": " + message);
    }
    if (body.is_discarded()) throw CliError("server sent invalid JSON");
    return body;
  }

  httplib::Client client_;
  std::string token_;
};

int serve(const std::string& host, int port, const std::string& data_dir,
          const std::string& admin_token, std::size_t threads, std::uint64_t seed,
          std::size_t compact_every) {
  if (admin_token.empty()) throw CliError("an admin token is required (--admin-token)");

  // Block termination signals in every thread; one thread waits for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  banditd::ThetaStore store({data_dir, compact_every});
  banditd::ExperimentRegistry registry(store, {data_dir});
  banditd::DecisionApi api(registry, {admin_token, seed});
  banditd::HttpServer server(api, {threads});

  const int bound = server.bind(host, port);
  if (bound < 0) throw CliError("cannot bind " + host + ":" + std::to_string(port));
  std::cout << "listening on " << host << ":" << bound << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.listen();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  store.compact();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual bandit decision server and admin tool"};
  app.require_subcommand(1);
  // Global options are accepted after the subcommand too.
  app.fallthrough();

  std::string server_url = env_or("BANDITD_SERVER", "http://127.0.0.1:8080");
  std::string admin_token = env_or("BANDITD_ADMIN_TOKEN", "");
  app.add_option("--server", server_url, "Server base URL (env BANDITD_SERVER)");
  app.add_option("--admin-token", admin_token, "Admin token (env BANDITD_ADMIN_TOKEN)");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the decision server");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "data";
  std::size_t threads = 32;
  std::uint64_t serve_seed = 0;
  std::size_t compact_every = 10'000;
  serve_cmd->add_option("--host", host, "Listen address");
  serve_cmd->add_option("--port", port, "Listen port (0 picks a free one)");
  serve_cmd->add_option("--data-dir", data_dir, "Directory for theta, experiments and logs");
  serve_cmd->add_option("--threads", threads, "Worker threads");
  serve_cmd->add_option("--seed", serve_seed, "Base seed for decisions (0 = random)");
  serve_cmd->add_option("--compact-every", compact_every, "Writes between snapshots");

  // exp
  auto* exp_cmd = app.add_subcommand("exp", "Manage experiments");
  exp_cmd->require_subcommand(1);
  auto* exp_create = exp_cmd->add_subcommand("create", "Create an experiment");
  std::string exp_name;
  std::string policy_file;
  exp_create->add_option("--name", exp_name, "Experiment name")->required();
  exp_create->add_option("--policy-file", policy_file, "Policy config JSON")->required();
  auto* exp_list = exp_cmd->add_subcommand("list", "List experiments");
  auto* exp_delete = exp_cmd->add_subcommand("delete", "Delete an experiment");
  std::uint64_t exp_id = 0;
  exp_delete->add_option("--id", exp_id, "Experiment id")->required();

  // theta
  auto* theta_cmd = app.add_subcommand("theta", "Inspect summary state");
  theta_cmd->require_subcommand(1);
  auto* theta_dump = theta_cmd->add_subcommand("dump", "Print theta records, one per line");
  std::string theta_name, theta_key, theta_value;
  theta_dump->add_option("--id", exp_id, "Experiment id")->required();
  theta_dump->add_option("--name", theta_name, "Filter by name");
  theta_dump->add_option("--key", theta_key, "Filter by key");
  theta_dump->add_option("--value", theta_value, "Filter by value");

  // log
  auto* log_cmd = app.add_subcommand("log", "Interaction logs");
  log_cmd->require_subcommand(1);
  auto* log_export = log_cmd->add_subcommand("export", "Write the full log as NDJSON");
  std::string log_out;
  log_export->add_option("--id", exp_id, "Experiment id")->required();
  log_export->add_option("--out", log_out, "Output file (- for stdout)")->required();

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Run policies against a synthetic environment");
  std::string env_text;
  std::string sim_policy_file;
  std::uint64_t horizon = 1000;
  std::uint64_t sim_seed = 1;
  std::size_t replications = 1;
  std::string report_out = "-";
  sim_cmd->add_option("--env", env_text,
                      "Environment, e.g. bernoulli:0.5,0.6 or goal:alpha=5,beta1=2,beta2=-1")
      ->required();
  sim_cmd->add_option("--policy-file", sim_policy_file, "Policy config JSON")->required();
  sim_cmd->add_option("--horizon", horizon, "Steps per replication");
  sim_cmd->add_option("--seed", sim_seed, "Base seed");
  sim_cmd->add_option("--replications", replications, "Number of replications");
  sim_cmd->add_option("--out", report_out, "Report file (- for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve_cmd->parsed()) {
      return serve(host, port, data_dir, admin_token, threads, serve_seed, compact_every);
    }

    if (sim_cmd->parsed()) {
      banditd::SimulationOptions options;
      options.horizon = horizon;
      options.seed = sim_seed;
      options.replications = replications;
      const auto config =
          banditd::policy_config_from_document(read_json_file(sim_policy_file));
      const auto report = banditd::run_simulation(banditd::parse_environment_spec(env_text),
                                                  config, options);
      const std::string text = banditd::to_document(report).dump(2) + "\n";
      if (report_out == "-") {
        std::cout << text;
      } else {
        std::ofstream out(report_out, std::ios::binary);
        out << text;
        if (!out) throw CliError("cannot write " + report_out);
      }
      return 0;
    }

    AdminClient client(server_url, admin_token);

    if (exp_create->parsed()) {
      const Document config = read_json_file(policy_file);
      const Document reply = client.post("/management/exp", {{"name", exp_name}, {"config", config}});
      std::cout << reply.dump() << std::endl;
    } else if (exp_list->parsed()) {
      const Document reply = client.get("/management/exp");
      for (const auto& e : reply.at("experiments")) std::cout << e.dump() << '\n';
    } else if (exp_delete->parsed()) {
      client.del("/management/exp/" + std::to_string(exp_id));
    } else if (theta_dump->parsed()) {
      httplib::Params query{{"name", theta_name}, {"key_field", theta_key}, {"value", theta_value}};
      const std::string path = httplib::append_query_params(
          "/" + std::to_string(exp_id) + "/theta.json", query);
      const Document reply = client.get(path);
      for (const auto& r : reply.at("theta")) std::cout << r.dump() << '\n';
    } else if (log_export->parsed()) {
      // Pages arrive newest first; the export is oldest first.
      std::vector<Document> records;
      const std::size_t page = banditd::ExperimentRegistry::kMaxLogPage;
      for (std::size_t offset = 0;; offset += page) {
        const Document reply = client.get("/" + std::to_string(exp_id) + "/log.json?limit=" +
                                          std::to_string(page) + "&offset=" +
                                          std::to_string(offset));
        for (const auto& r : reply.at("logs")) records.push_back(r);
        if (reply.at("logs").size() < page) break;
      }
      std::ofstream file;
      if (log_out != "-") {
        file.open(log_out, std::ios::binary);
        if (!file) throw CliError("cannot write " + log_out);
      }
      std::ostream& out = log_out == "-" ? std::cout : file;
      for (auto it = records.rbegin(); it != records.rend(); ++it) out << it->dump() << '\n';
      out.flush();
      if (!out) throw CliError("write failed");
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "banditctl: " << e.what() << std::endl;
    return 1;
  }
}
