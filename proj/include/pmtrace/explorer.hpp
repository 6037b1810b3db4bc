#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pmtrace/levelhash.hpp"
#include "pmtrace/trace.hpp"

namespace pmtrace {

enum class Policy { Random, PmAware, QLearn };

const char* to_string(Policy policy);
std::optional<Policy> policy_from_name(const std::string& name);

inline constexpr int kActionCount = 4;  // frontier buckets by pm_pending quartile

struct QConfig {
  double alpha = 0.5;    // decay rate, (0, 1]
  double gamma = 0.9;    // discount factor, [0, 1)
  double epsilon = 0.1;  // exploration rate, [0, 1]
  std::size_t replay_capacity = 256;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double bug_site_reward = 10.0;  // reward shaping knobs
  double pm_site_reward = 1.0;

  void validate() const;  // throws std::invalid_argument
};

/// Tabular Q keyed by (hashed state feature, action); missing entries read 0.
class QTable {
 public:
  double get(std::uint64_t state_key, int action) const;
  void set(std::uint64_t state_key, int action, double q);
  double max_over_actions(std::uint64_t state_key) const;
  std::size_t entry_count() const { return entries_.size() * kActionCount; }
  const std::unordered_map<std::uint64_t, std::array<double, kActionCount>>& raw() const {
    return entries_;
  }

 private:
  std::unordered_map<std::uint64_t, std::array<double, kActionCount>> entries_;
};

/// Bellman update: q(s,a) := (1-alpha)*q(s,a) + alpha*(r + gamma*max_a' q(s',a')).
/// Returns the new q(s,a).
double q_update(QTable& table, std::uint64_t state_key, int action, double reward,
                std::uint64_t next_state_key, const QConfig& config);

/// Frontier node in the exploration tree.
struct ExplorationState {
  std::size_t id = 0;
  std::optional<std::size_t> parent;
  int depth = 0;
  std::vector<TraceEvent> emitted_events;  // trace segment on the incoming edge
  int pm_pending = 0;   // DIRTY + FLUSH_PENDING persistent lines at this state
  int new_sites = 0;    // unseen PM instruction sites on the incoming edge
  bool terminal = false;
};

std::uint64_t state_feature_key(const ExplorationState& state);

struct FrontierItem {
  std::size_t id;
  int pm_pending;
};

/// Quartile bucket of pm_pending within the current frontier (the QLearn
/// action space).
int action_bucket(int pm_pending, const std::vector<FrontierItem>& frontier);

/// Returns the position within `frontier` of the chosen state.
///   Random  - uniform.
///   PmAware - argmax pm_pending, ties by smallest id.
///   QLearn  - epsilon-uniform, else argmax q(context, bucket(state)),
///             ties by smallest id.
std::size_t select_state(const std::vector<FrontierItem>& frontier, Policy policy,
                         const QTable& q, std::uint64_t context_key, double epsilon,
                         std::mt19937_64& rng);

/// Branching workload-tree spec. Every edge replays a deterministic level
/// hashing op segment; bug edges append one stateless seeded bug at a
/// path-derived site. See docs/schemas/graph_spec.schema.json.
struct GraphSpec {
  std::uint64_t seed = 1;
  int depth = 3;
  int branch = 4;
  int ops_per_edge = 3;
  int initial_exponent = 3;
  struct BugEdge {
    std::vector<int> path;  // child indices from the root
    KnobKind knob;          // FlushWholeHeader or ExtraFenceLoop
  };
  std::vector<BugEdge> bug_edges;

  void validate() const;
  std::size_t tree_size() const;  // number of states including the root
  static GraphSpec from_json_text(const std::string& text);
  static GraphSpec from_json_file(const std::string& path);
  std::string to_json_text() const;
};

struct ExplorationResult {
  Policy policy = Policy::Random;
  std::uint64_t seed = 0;
  std::size_t budget = 0;
  std::size_t expansions_used = 0;
  std::vector<std::string> bug_sites;  // sorted unique
  std::size_t pm_sites_covered = 0;
  // (expansion ordinal, cumulative unique bug sites)
  std::vector<std::pair<std::size_t, std::size_t>> discovery_curve;
};

ExplorationResult run_exploration(const GraphSpec& spec, Policy policy, std::size_t budget,
                                  const QConfig& config);

}  // namespace pmtrace
