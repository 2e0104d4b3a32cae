#include "certilax/records.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "certilax/io.hpp"

namespace certilax {

using nlohmann::json;

json json_number(double v) {
  if (std::isfinite(v)) return json(v);
  if (std::isnan(v)) return json("nan");
  return json(v > 0 ? "inf" : "-inf");
}

namespace {

const char* norm_name(Norm n) { return n == Norm::L2 ? "l2" : "linf"; }

json config_echo(const StaircaseConfig& cfg) {
  return json{
      {"r_init", cfg.r_init},
      {"r_max", cfg.r_max},
      {"eps_feas_tol", cfg.eps_feas_tol},
      {"escape_eps", cfg.escape_eps},
      {"variant", cfg.full_variant ? "full" : "plain"},
      {"backward_linear_bounds", cfg.backward_linear_bounds},
      {"strict_alg1", cfg.strict_alg1},
      {"solver",
       {{"kkt_tol", cfg.solver.kkt_tol},
        {"feas_tol", cfg.solver.feas_tol},
        {"max_outer", cfg.solver.max_outer},
        {"max_inner", cfg.solver.max_inner},
        {"penalty_init", cfg.solver.penalty_init},
        {"penalty_growth", cfg.solver.penalty_growth}}},
      {"pgd",
       {{"step_size", cfg.pgd.step_size},
        {"iterations", cfg.pgd.iterations},
        {"restarts", cfg.pgd.restarts}}},
  };
}

json kkt_echo(const KktReport& k) {
  return json{{"stationarity", json_number(k.stationarity)},
              {"primal_feas", json_number(k.primal_feas)},
              {"complementarity", json_number(k.complementarity)},
              {"inside_trace", k.inside_trace},
              {"converged", k.converged}};
}

json class_echo(const ClassCertificate& c) {
  json out{{"target_class", c.target_class},
           {"phi_lb", json_number(c.phi_lb)},
           {"phi_ub", json_number(c.phi_ub)},
           {"phi_lb_baseline", json_number(c.phi_lb_baseline)},
           {"r_final", c.r_final},
           {"eps_feas", json_number(c.eps_feas)},
           {"z0", json_number(c.z0)},
           {"R2", json_number(c.R2)},
           {"lb_computed", c.lb_computed},
           {"certified", c.certified},
           {"kkt", kkt_echo(c.kkt)},
           {"npcq", json{{"ok", c.npcq.ok},
                         {"worst_preact", json_number(c.npcq.worst_preact)},
                         {"worst_vw", json_number(c.npcq.worst_vw)}}}};
  json rounds = json::array();
  for (const auto& r : c.rounds)
    rounds.push_back(json{{"r", r.r},
                          {"f", json_number(r.f)},
                          {"z0", json_number(r.z0)},
                          {"eps_feas", json_number(r.eps_feas)},
                          {"phi_lb", json_number(r.phi_lb)},
                          {"converged", r.kkt.converged}});
  out["rounds"] = std::move(rounds);
  return out;
}

std::string now_iso8601() {
  using clock = std::chrono::system_clock;
  std::time_t t = clock::to_time_t(clock::now());
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace

json build_certify_record(const std::string& command,
                          const std::string& model_path,
                          const std::string& model_digest,
                          const std::string& input_digest, const Vector& x_hat,
                          int true_class, int target_class, double radius,
                          Norm norm, const StaircaseConfig& cfg,
                          const CertificateResult& result,
                          double wall_time_s) {
  json rec;
  rec["command"] = command;
  rec["model"] = {{"path", model_path}, {"digest", model_digest}};
  json spec{{"input_digest", input_digest},
            {"input_dim", static_cast<int>(x_hat.size())},
            {"true_class", true_class},
            {"radius", radius},
            {"norm", norm_name(norm)},
            {"variant", cfg.full_variant ? "full" : "plain"}};
  if (target_class >= 0)
    spec["target_class"] = target_class;
  else
    spec["target_class"] = "all";
  rec["spec"] = std::move(spec);
  rec["config"] = config_echo(cfg);
  rec["seed"] = cfg.seed;

  json out{{"status", to_string(result.status)},
           {"misclassified", result.misclassified},
           {"phi_star_lb", json_number(result.phi_star_lb)},
           {"phi_star_ub", json_number(result.phi_star_ub)}};
  json classes = json::array();
  for (const auto& c : result.classes) classes.push_back(class_echo(c));
  out["classes"] = std::move(classes);
  rec["outputs"] = std::move(out);

  // The run id covers everything that determines the outputs, so identical
  // commands produce identical ids and the timing fields stay out of it.
  rec["run_id"] = digest_bytes(rec.dump());
  rec["timestamp"] = now_iso8601();
  rec["wall_time_s"] = wall_time_s;
  return rec;
}

void append_record(const std::string& path, const json& record) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot open for appending: " + path);
  out << record.dump() << "\n";
  if (!out) throw std::runtime_error("append failed: " + path);
}

bool records_equal_modulo_timing(json a, json b) {
  a.erase("timestamp");
  a.erase("wall_time_s");
  b.erase("timestamp");
  b.erase("wall_time_s");
  return a == b;
}

}  // namespace certilax
