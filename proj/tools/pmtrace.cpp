#include <cmath>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pmtrace/crash_enum.hpp"
#include "pmtrace/explorer.hpp"
#include "pmtrace/levelhash.hpp"
#include "pmtrace/oracles.hpp"
#include "pmtrace/trace.hpp"

namespace {

using nlohmann::ordered_json;

ordered_json report_json(const pmtrace::BugReport& r) {
  ordered_json j;
  j["class"] = pmtrace::to_string(r.bug_class);
  j["site"] = r.site;
  j["occurrences"] = r.occurrences;
  j["first_event"] = r.first_event;
  j["last_event"] = r.last_event;
  j["evidence"] = r.evidence;
  j["lines"] = std::vector<std::uint64_t>(r.lines.begin(), r.lines.end());
  return j;
}

ordered_json summary_json(const std::map<pmtrace::BugClass, pmtrace::ClassStats>& totals) {
  ordered_json j;
  for (pmtrace::BugClass c : pmtrace::kBugClassOrder) {
    const pmtrace::ClassStats& s = totals.at(c);
    j[pmtrace::to_string(c)] = {{"unique", s.unique}, {"occurrences", s.occurrences}};
  }
  return j;
}

void print_summary_table(std::ostream& out,
                         const std::map<pmtrace::BugClass, pmtrace::ClassStats>& totals,
                         bool with_bars) {
  out << "class  unique  occurrences";
  if (with_bars) out << "  occurrences (log scale)";
  out << '\n';
  for (pmtrace::BugClass c : pmtrace::kBugClassOrder) {
    const pmtrace::ClassStats& s = totals.at(c);
    char line[64];
    std::snprintf(line, sizeof line, "%-5s  %6zu  %11zu", pmtrace::to_string(c), s.unique,
                  s.occurrences);
    out << line;
    if (with_bars) {
      int len = s.occurrences
                    ? static_cast<int>(std::lround(10.0 * std::log10(
                          static_cast<double>(s.occurrences) + 1.0)))
                    : 0;
      out << "  " << std::string(static_cast<std::size_t>(std::min(len, 60)), '#');
    }
    out << '\n';
  }
}

int run_check(const std::string& path, const std::string& format) {
  pmtrace::ParsedTrace trace = pmtrace::parse_trace_file(path);
  pmtrace::CheckResult result = pmtrace::check_trace(trace.events, trace.regions);

  if (format == "json") {
    ordered_json j;
    j["trace"] = path;
    j["total_unique"] = result.total_unique();
    j["reports"] = ordered_json::array();
    for (const pmtrace::BugReport& r : result.reports) j["reports"].push_back(report_json(r));
    j["summary"] = summary_json(result.totals);
    std::cout << j.dump(2) << '\n';
  } else if (format == "csv") {
    std::cout << "class,site,occurrences,first_event,last_event\n";
    for (const pmtrace::BugReport& r : result.reports) {
      std::cout << pmtrace::to_string(r.bug_class) << ',' << r.site << ',' << r.occurrences
                << ',' << r.first_event << ',' << r.last_event << '\n';
    }
  } else {
    for (const pmtrace::BugReport& r : result.reports) {
      std::cout << pmtrace::to_string(r.bug_class) << " at " << r.site << "  x" << r.occurrences
                << "  events [" << r.first_event << ", " << r.last_event << "]\n";
    }
    print_summary_table(std::cout, result.totals, false);
    std::cout << "total unique: " << result.total_unique() << '\n';
  }
  return result.reports.empty() ? 0 : 1;
}

int run_report(const std::string& path) {
  pmtrace::ParsedTrace trace = pmtrace::parse_trace_file(path);
  pmtrace::CheckResult result = pmtrace::check_trace(trace.events, trace.regions);
  print_summary_table(std::cout, result.totals, true);
  std::cout << "total unique: " << result.total_unique() << '\n';
  return 0;
}

int run_crash_sim(const std::string& path, std::int64_t at, std::size_t cap,
                  const std::string& checker_name) {
  pmtrace::ParsedTrace trace = pmtrace::parse_trace_file(path);
  std::size_t crash_event;
  if (at >= 0) {
    crash_event = static_cast<std::size_t>(at);
    if (crash_event > trace.events.size())
      throw std::runtime_error("--at index is beyond the end of the trace");
  } else {
    auto markers = pmtrace::crash_marker_indices(trace.events);
    if (markers.empty())
      throw std::runtime_error("trace has no crash marker; pass --at to pick a crash point");
    crash_event = markers.front();
  }

  std::vector<pmtrace::CrashImage> images =
      pmtrace::enumerate_crash_images(trace.events, crash_event, cap);
  // The last image (all-ones mask) includes every pending line.
  const std::size_t pending_k = images.empty() ? 0 : images.back().included_pending.size();

  pmtrace::RecoveryChecker checker;
  if (checker_name == "levelhash") {
    std::uint64_t header = 0;
    for (const pmtrace::RegionRange& r : trace.regions.ranges)
      if (r.persistent) {
        header = r.base;
        break;
      }
    checker = pmtrace::make_levelhash_checker(trace.events, crash_event, header);
  } else {
    checker = [](const pmtrace::CrashImage&) { return pmtrace::Verdict::ok(); };
  }

  pmtrace::ImageCheckResult checked = pmtrace::check_images(std::move(images), checker);

  ordered_json j;
  j["crash_event"] = crash_event;
  j["pending_k"] = pending_k;
  j["images"] = ordered_json::array();
  for (const auto& [img, verdict] : checked.verdicts) {
    ordered_json ij;
    ij["included_pending"] = img.included_pending;
    ij["verdict"] = verdict.consistent ? "Consistent" : verdict.kind;
    j["images"].push_back(std::move(ij));
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_levelhash(std::size_t ops, std::uint64_t seed, const std::string& knob_name,
                  int knob_count, const std::string& fixture, const std::string& out_path) {
  std::vector<pmtrace::TraceEvent> events;
  if (!fixture.empty()) {
    if (fixture != "table1") throw std::runtime_error("unknown fixture: " + fixture);
    events = pmtrace::generate_table1_fixture();
  } else {
    auto kind = pmtrace::knob_from_name(knob_name);
    if (!kind) throw std::runtime_error("unknown knob: " + knob_name);
    events = pmtrace::generate_workload(ops, seed, {*kind, knob_count});
  }
  pmtrace::write_trace_file(out_path, events);
  std::cerr << "wrote " << events.size() << " events to " << out_path << '\n';
  return 0;
}

int run_explore(const std::string& graph_path, const std::string& policy_name,
                std::size_t budget, const pmtrace::QConfig& config) {
  auto policy = pmtrace::policy_from_name(policy_name);
  if (!policy) throw std::runtime_error("unknown policy: " + policy_name);
  pmtrace::GraphSpec spec = pmtrace::GraphSpec::from_json_file(graph_path);
  pmtrace::ExplorationResult result = pmtrace::run_exploration(spec, *policy, budget, config);

  ordered_json j;
  j["policy"] = pmtrace::to_string(result.policy);
  j["seed"] = result.seed;
  j["budget"] = result.budget;
  j["expansions_used"] = result.expansions_used;
  j["bug_sites_found"] = result.bug_sites.size();
  j["bug_sites"] = result.bug_sites;
  j["pm_sites_covered"] = result.pm_sites_covered;
  j["discovery_curve"] = ordered_json::array();
  for (const auto& [expansion, sites] : result.discovery_curve)
    j["discovery_curve"].push_back({expansion, sites});
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmtrace - trace-based persistent-memory crash-consistency toolkit"};
  app.set_version_flag("--version", "pmtrace 0.1.0");
  app.require_subcommand(1);

  std::string trace_path, format = "text";
  CLI::App* check = app.add_subcommand("check", "detect PM bugs in a trace");
  check->add_option("trace", trace_path, "trace file (JSON lines)")->required();
  check->add_option("--format", format, "output format")
      ->check(CLI::IsMember({"json", "csv", "text"}));

  std::string report_path;
  CLI::App* report = app.add_subcommand("report", "per-class summary with occurrence bar chart");
  report->add_option("trace", report_path, "trace file (JSON lines)")->required();

  std::string sim_path, checker_name = "levelhash";
  std::int64_t sim_at = -1;
  std::size_t sim_cap = pmtrace::kDefaultPendingCap;
  CLI::App* sim = app.add_subcommand("crash-sim", "enumerate and check crash images");
  sim->add_option("trace", sim_path, "trace file (JSON lines)")->required();
  sim->add_option("--at", sim_at, "crash point event index (default: first crash marker)");
  sim->add_option("--cap", sim_cap, "max pending lines to enumerate");
  sim->add_option("--checker", checker_name, "recovery checker")
      ->check(CLI::IsMember({"levelhash", "none"}));

  std::size_t lh_ops = 100;
  std::uint64_t lh_seed = 1;
  std::string lh_knob = "none", lh_fixture, lh_out;
  int lh_knob_count = 0;
  CLI::App* lh = app.add_subcommand("levelhash", "generate a level hashing workload trace");
  lh->add_option("--ops", lh_ops, "operation count");
  lh->add_option("--seed", lh_seed, "workload seed");
  lh->add_option("--knob", lh_knob, "seeded bug knob name");
  lh->add_option("--knob-count", lh_knob_count, "knob-specific count parameter");
  lh->add_option("--fixture", lh_fixture, "named fixture recipe (table1)");
  lh->add_option("--out", lh_out, "output trace path")->required();

  std::string ex_graph, ex_policy;
  std::size_t ex_budget = 0;
  pmtrace::QConfig ex_config;
  CLI::App* ex = app.add_subcommand("explore", "policy-driven workload-tree exploration");
  ex->add_option("--graph", ex_graph, "graph spec JSON file")->required();
  ex->add_option("--policy", ex_policy, "random | pm-aware | qlearn")->required();
  ex->add_option("--budget", ex_budget, "expansion budget")->required();
  ex->add_option("--seed", ex_config.seed, "policy seed");
  ex->add_option("--alpha", ex_config.alpha, "Q decay rate");
  ex->add_option("--gamma", ex_config.gamma, "Q discount factor");
  ex->add_option("--epsilon", ex_config.epsilon, "exploration rate");
  ex->add_option("--replay-capacity", ex_config.replay_capacity, "replay buffer capacity");
  ex->add_option("--batch", ex_config.batch_size, "replay sample batch size");
  ex->add_option("--bug-reward", ex_config.bug_site_reward, "reward per new bug site");
  ex->add_option("--site-reward", ex_config.pm_site_reward, "reward per new PM site");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n' << app.help() << '\n';
    return 2;
  }

  try {
    if (check->parsed()) return run_check(trace_path, format);
    if (report->parsed()) return run_report(report_path);
    if (sim->parsed()) return run_crash_sim(sim_path, sim_at, sim_cap, checker_name);
    if (lh->parsed())
      return run_levelhash(lh_ops, lh_seed, lh_knob, lh_knob_count, lh_fixture, lh_out);
    if (ex->parsed()) return run_explore(ex_graph, ex_policy, ex_budget, ex_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
