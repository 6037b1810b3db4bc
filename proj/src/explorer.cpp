#include "pmtrace/explorer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "pmtrace/oracles.hpp"
#include "pmtrace/pm_state.hpp"

namespace pmtrace {

const char* to_string(Policy policy) {
  switch (policy) {
    case Policy::Random: return "random";
    case Policy::PmAware: return "pm-aware";
    case Policy::QLearn: return "qlearn";
  }
  return "?";
}

std::optional<Policy> policy_from_name(const std::string& name) {
  for (Policy p : {Policy::Random, Policy::PmAware, Policy::QLearn})
    if (name == to_string(p)) return p;
  return std::nullopt;
}

void QConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must be in (0, 1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in [0, 1)");
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("epsilon must be in [0, 1]");
  if (replay_capacity < batch_size)
    throw std::invalid_argument("replay_capacity must be >= batch_size");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
}

double QTable::get(std::uint64_t state_key, int action) const {
  auto it = entries_.find(state_key);
  if (it == entries_.end()) return 0.0;
  return it->second[static_cast<std::size_t>(action)];
}

void QTable::set(std::uint64_t state_key, int action, double q) {
  auto [it, fresh] = entries_.try_emplace(state_key);
  if (fresh) it->second.fill(0.0);
  it->second[static_cast<std::size_t>(action)] = q;
}

double QTable::max_over_actions(std::uint64_t state_key) const {
  auto it = entries_.find(state_key);
  if (it == entries_.end()) return 0.0;
  return *std::max_element(it->second.begin(), it->second.end());
}

double q_update(QTable& table, std::uint64_t state_key, int action, double reward,
                std::uint64_t next_state_key, const QConfig& config) {
  const double old_q = table.get(state_key, action);
  const double target = reward + config.gamma * table.max_over_actions(next_state_key);
  const double new_q = (1.0 - config.alpha) * old_q + config.alpha * target;
  table.set(state_key, action, new_q);
  return new_q;
}

namespace {

int bucket4(int v) {
  if (v <= 0) return 0;
  if (v <= 2) return 1;
  if (v <= 5) return 2;
  return 3;
}

// Deterministic canonical [0,1) double from the engine (uniform_real_distribution
// is implementation-defined, so roll our own).
double canonical(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace

std::uint64_t state_feature_key(const ExplorationState& state) {
  std::uint64_t packed = static_cast<std::uint64_t>(bucket4(state.pm_pending)) |
                         static_cast<std::uint64_t>(std::min(state.depth, 7)) << 2 |
                         static_cast<std::uint64_t>(bucket4(state.new_sites)) << 5;
  return mix64(packed + 0x51ed0bada110c8edull);
}

int action_bucket(int pm_pending, const std::vector<FrontierItem>& frontier) {
  std::vector<int> vals;
  vals.reserve(frontier.size());
  for (const FrontierItem& f : frontier) vals.push_back(f.pm_pending);
  std::sort(vals.begin(), vals.end());
  const std::size_t n = vals.size();
  const int q1 = vals[(n - 1) / 4];
  const int q2 = vals[(n - 1) / 2];
  const int q3 = vals[3 * (n - 1) / 4];
  if (pm_pending <= q1) return 0;
  if (pm_pending <= q2) return 1;
  if (pm_pending <= q3) return 2;
  return 3;
}

std::size_t select_state(const std::vector<FrontierItem>& frontier, Policy policy,
                         const QTable& q, std::uint64_t context_key, double epsilon,
                         std::mt19937_64& rng) {
  if (frontier.empty()) throw std::invalid_argument("select_state on an empty frontier");
  switch (policy) {
    case Policy::Random:
      return static_cast<std::size_t>(rng() % frontier.size());
    case Policy::PmAware: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < frontier.size(); ++i) {
        if (frontier[i].pm_pending > frontier[best].pm_pending ||
            (frontier[i].pm_pending == frontier[best].pm_pending &&
             frontier[i].id < frontier[best].id))
          best = i;
      }
      return best;
    }
    case Policy::QLearn: {
      if (canonical(rng) < epsilon) return static_cast<std::size_t>(rng() % frontier.size());
      std::size_t best = 0;
      double best_q = q.get(context_key, action_bucket(frontier[0].pm_pending, frontier));
      for (std::size_t i = 1; i < frontier.size(); ++i) {
        double qi = q.get(context_key, action_bucket(frontier[i].pm_pending, frontier));
        if (qi > best_q || (qi == best_q && frontier[i].id < frontier[best].id)) {
          best = i;
          best_q = qi;
        }
      }
      return best;
    }
  }
  throw std::invalid_argument("unknown policy");
}

void GraphSpec::validate() const {
  if (depth < 0 || depth > 8) throw std::invalid_argument("graph depth must be in [0, 8]");
  if (branch < 1 || branch > 4) throw std::invalid_argument("graph branch must be in [1, 4]");
  if (ops_per_edge < 1 || ops_per_edge > 100)
    throw std::invalid_argument("ops_per_edge must be in [1, 100]");
  if (initial_exponent < 1 || initial_exponent > 8)
    throw std::invalid_argument("initial_exponent must be in [1, 8]");
  for (const BugEdge& be : bug_edges) {
    if (be.path.size() > static_cast<std::size_t>(depth))
      throw std::invalid_argument("bug edge path deeper than the tree");
    for (int c : be.path)
      if (c < 0 || c >= branch) throw std::invalid_argument("bug edge path index out of range");
    if (be.knob != KnobKind::FlushWholeHeader && be.knob != KnobKind::ExtraFenceLoop)
      throw std::invalid_argument("bug edge knob must be flush-whole-header or extra-fence-loop");
  }
}

std::size_t GraphSpec::tree_size() const {
  std::size_t total = 0, level = 1;
  for (int d = 0; d <= depth; ++d) {
    total += level;
    level *= static_cast<std::size_t>(branch);
  }
  return total;
}

GraphSpec GraphSpec::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw std::invalid_argument("graph spec is not valid JSON");
  }
  GraphSpec spec;
  spec.seed = j.value("seed", std::uint64_t{1});
  spec.depth = j.value("depth", 3);
  spec.branch = j.value("branch", 4);
  spec.ops_per_edge = j.value("ops_per_edge", 3);
  spec.initial_exponent = j.value("initial_exponent", 3);
  if (j.contains("bug_edges")) {
    for (const auto& bj : j.at("bug_edges")) {
      BugEdge be;
      be.path = bj.at("path").get<std::vector<int>>();
      auto knob = knob_from_name(bj.at("knob").get<std::string>());
      if (!knob) throw std::invalid_argument("unknown knob name in graph spec");
      be.knob = *knob;
      spec.bug_edges.push_back(std::move(be));
    }
  }
  spec.validate();
  return spec;
}

GraphSpec GraphSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph spec: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string GraphSpec::to_json_text() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["depth"] = depth;
  j["branch"] = branch;
  j["ops_per_edge"] = ops_per_edge;
  j["initial_exponent"] = initial_exponent;
  j["bug_edges"] = nlohmann::ordered_json::array();
  for (const BugEdge& be : bug_edges) {
    nlohmann::ordered_json bj;
    bj["path"] = be.path;
    bj["knob"] = to_string(be.knob);
    j["bug_edges"].push_back(std::move(bj));
  }
  return j.dump(2);
}

namespace {

struct Transition {
  std::uint64_t state_key;
  int action;
  double reward;
  std::uint64_t next_key;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}

  void push(const Transition& t) {
    if (buffer_.size() < capacity_) {
      buffer_.push_back(t);
    } else {
      buffer_[write_] = t;
      write_ = (write_ + 1) % capacity_;
    }
  }

  std::vector<Transition> sample(std::size_t batch, std::mt19937_64& rng) const {
    std::vector<Transition> out;
    if (buffer_.empty()) return out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(buffer_[rng() % buffer_.size()]);
    return out;
  }

 private:
  std::vector<Transition> buffer_;
  std::size_t capacity_;
  std::size_t write_ = 0;
};

struct Node {
  ExplorationState meta;
  std::vector<int> path;
  std::optional<LevelTable> table;
  MachineState machine;
  std::vector<std::uint64_t> live;
  std::vector<std::string> edge_bug_sites;
  std::vector<std::string> edge_pm_sites;
};

}  // namespace

ExplorationResult run_exploration(const GraphSpec& spec, Policy policy, std::size_t budget,
                                  const QConfig& config) {
  spec.validate();
  config.validate();
  if (budget == 0) throw std::invalid_argument("budget must be >= 1");

  std::mt19937_64 rng(config.seed);
  RegionTable regions;
  regions.ranges = {{kHeapBase, kHeapArena, true}};

  std::vector<Node> nodes;
  std::set<std::string> global_bugs, global_pm;

  auto edge_seed = [&](const std::vector<int>& path) {
    std::uint64_t h = mix64(spec.seed ^ 0x9e3779b97f4a7c15ull);
    for (int c : path) h = mix64(h ^ (static_cast<std::uint64_t>(c) + 0x2545f4914f6cdd1dull));
    return h;
  };
  auto bug_edge_at = [&](const std::vector<int>& path) -> const GraphSpec::BugEdge* {
    for (const auto& be : spec.bug_edges)
      if (be.path == path) return &be;
    return nullptr;
  };

  auto build_node = [&](std::optional<std::size_t> parent_id, int child_index) {
    Node node;
    const std::size_t id = nodes.size();
    std::size_t index_base = 0;
    if (parent_id) {
      const Node& parent = nodes[*parent_id];
      node.path = parent.path;
      node.path.push_back(child_index);
      node.table = parent.table;
      node.live = parent.live;
      node.machine = parent.machine;
      node.meta.parent = *parent_id;
      node.meta.depth = parent.meta.depth + 1;
      index_base = *parent.machine.last_event_index + 1;
    }
    TraceEmitter out(index_base);
    if (!parent_id) {
      out.region(kHeapBase, kHeapArena, true);
      node.table = LevelTable::create(SimHeap{}, out, spec.initial_exponent);
    }
    LevelTable& table = *node.table;
    std::mt19937_64 edge_rng(edge_seed(node.path));
    for (int i = 0; i < spec.ops_per_edge; ++i) {
      std::uint64_t roll = edge_rng() % 100;
      if (roll < 60) {
        std::uint64_t k;
        do {
          k = edge_rng();
        } while (table.lookup(k));
        if (table.insert(k, edge_rng(), out) == InsertStatus::Ok) node.live.push_back(k);
      } else if (roll < 90) {
        if (!node.live.empty() && edge_rng() % 5 != 0)
          (void)table.lookup(node.live[edge_rng() % node.live.size()]);
        else
          (void)table.lookup(edge_rng());
      } else if (!node.live.empty()) {
        std::size_t idx = edge_rng() % node.live.size();
        table.erase(node.live[idx], out);
        node.live[idx] = node.live.back();
        node.live.pop_back();
      }
    }
    if (const GraphSpec::BugEdge* be = bug_edge_at(node.path)) {
      std::string site = "edge";
      for (int c : node.path) site += "_" + std::to_string(c);
      if (be->knob == KnobKind::FlushWholeHeader)
        out.flush(table.padding_line(0), site + ".c:7");
      else
        out.fence(site + ".c:9");
    }
    node.meta.emitted_events = out.take();

    std::set<std::string> bug_sites, pm_sites;
    for (const TraceEvent& e : node.meta.emitted_events) {
      if (e.kind == EventKind::Store && regions.persistent_overlap(e.addr, e.size))
        pm_sites.insert(e.site);
      else if (e.kind == EventKind::Flush &&
               regions.persistent_overlap(line_of(e.addr), kCacheLineSize))
        pm_sites.insert(e.site);
      else if (e.kind == EventKind::Fence)
        pm_sites.insert(e.site);
      for (const OracleSignal& sig : apply_event(node.machine, e)) {
        if (sig.kind == SignalKind::EmptyFence ||
            regions.persistent_overlap(sig.line, kCacheLineSize))
          bug_sites.insert(sig.site);
      }
    }
    node.edge_bug_sites.assign(bug_sites.begin(), bug_sites.end());
    node.edge_pm_sites.assign(pm_sites.begin(), pm_sites.end());

    int pending = 0;
    for (const auto& [lb, ls] : node.machine.lines)
      if (ls.status != LineStatus::Clean && regions.persistent_overlap(lb, kCacheLineSize))
        ++pending;
    node.meta.pm_pending = pending;
    int fresh = 0;
    for (const std::string& s : node.edge_pm_sites)
      if (!global_pm.count(s)) ++fresh;
    node.meta.new_sites = fresh;
    node.meta.id = id;
    node.meta.terminal = node.meta.depth >= spec.depth;
    nodes.push_back(std::move(node));
    return id;
  };

  std::vector<std::size_t> frontier;
  frontier.push_back(build_node(std::nullopt, 0));

  QTable q;
  ReplayBuffer replay(config.replay_capacity);
  std::uint64_t context_key = 0;

  ExplorationResult result;
  result.policy = policy;
  result.seed = config.seed;
  result.budget = budget;

  while (result.expansions_used < budget && !frontier.empty()) {
    std::vector<FrontierItem> view;
    view.reserve(frontier.size());
    for (std::size_t id : frontier) view.push_back({id, nodes[id].meta.pm_pending});
    const std::size_t pos = select_state(view, policy, q, context_key, config.epsilon, rng);
    const int action = action_bucket(view[pos].pm_pending, view);
    const std::size_t chosen = frontier[pos];
    frontier.erase(frontier.begin() + static_cast<std::ptrdiff_t>(pos));

    std::size_t new_bugs = 0, new_pm = 0;
    for (const std::string& s : nodes[chosen].edge_bug_sites)
      if (global_bugs.insert(s).second) ++new_bugs;
    for (const std::string& s : nodes[chosen].edge_pm_sites)
      if (global_pm.insert(s).second) ++new_pm;
    ++result.expansions_used;
    result.discovery_curve.emplace_back(result.expansions_used, global_bugs.size());

    if (policy == Policy::QLearn) {
      const double reward = config.bug_site_reward * static_cast<double>(new_bugs) +
                            config.pm_site_reward * static_cast<double>(new_pm);
      const std::uint64_t next_key = state_feature_key(nodes[chosen].meta);
      replay.push({context_key, action, reward, next_key});
      for (const Transition& t : replay.sample(config.batch_size, rng))
        q_update(q, t.state_key, t.action, t.reward, t.next_key, config);
      context_key = next_key;
    }

    const bool terminal = nodes[chosen].meta.terminal;
    if (!terminal)
      for (int c = 0; c < spec.branch; ++c) frontier.push_back(build_node(chosen, c));
  }

  result.bug_sites.assign(global_bugs.begin(), global_bugs.end());
  result.pm_sites_covered = global_pm.size();
  return result;
}

}  // namespace pmtrace
