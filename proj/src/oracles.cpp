#include "pmtrace/oracles.hpp"

#include <algorithm>
#include <tuple>

namespace pmtrace {

const char* to_string(BugClass c) {
  switch (c) {
    case BugClass::UC: return "U-C";
    case BugClass::UP: return "U-P";
    case BugClass::EP: return "EP";
    case BugClass::FlP: return "Fl-P";
    case BugClass::FeP: return "Fe-P";
  }
  return "?";
}

namespace {

struct UnpersistedStore {
  std::size_t event_index;
  std::string site;
  std::uint64_t addr;
  std::uint64_t size;
};

struct Accumulator {
  std::map<std::pair<int, std::string>, BugReport> folded;

  void add(BugClass c, const std::string& site, std::size_t event, std::uint64_t line) {
    auto key = std::make_pair(static_cast<int>(c), site);
    auto it = folded.find(key);
    if (it == folded.end()) {
      BugReport r;
      r.bug_class = c;
      r.site = site;
      r.occurrences = 1;
      r.first_event = r.last_event = event;
      r.evidence.push_back(event);
      if (line) r.lines.insert(line);
      folded.emplace(std::move(key), std::move(r));
    } else {
      BugReport& r = it->second;
      ++r.occurrences;
      r.first_event = std::min(r.first_event, event);
      r.last_event = std::max(r.last_event, event);
      if (r.evidence.size() < 8) r.evidence.push_back(event);
      if (line) r.lines.insert(line);
    }
  }
};

}  // namespace

CheckResult check_trace(std::span<const TraceEvent> events, const RegionTable& regions) {
  MachineState state;
  Accumulator acc;
  // Stores not yet covered by flush+fence, per line; cleared when the line persists.
  std::map<std::uint64_t, std::vector<UnpersistedStore>> exposed;

  for (const TraceEvent& e : events) {
    // Snapshot of the pending set before the event: a fence drains exactly these.
    std::set<std::uint64_t> drained;
    if (e.kind == EventKind::Fence) drained = state.pending;

    std::vector<OracleSignal> signals = apply_event(state, e);

    if (e.kind == EventKind::Store && regions.persistent_overlap(e.addr, e.size)) {
      exposed[line_of(e.addr)].push_back({e.index, e.site, e.addr, e.size});
    } else if (e.kind == EventKind::Fence && !drained.empty()) {
      for (std::uint64_t base : drained) exposed.erase(base);
    }

    for (const OracleSignal& s : signals) {
      switch (s.kind) {
        case SignalKind::DuplicateFlush:
          if (regions.persistent_overlap(s.line, kCacheLineSize))
            acc.add(BugClass::EP, s.site, s.event_index, s.line);
          break;
        case SignalKind::FlushUntouched:
          if (regions.persistent_overlap(s.line, kCacheLineSize))
            acc.add(BugClass::FlP, s.site, s.event_index, s.line);
          break;
        case SignalKind::EmptyFence:
          acc.add(BugClass::FeP, s.site, s.event_index, 0);
          break;
      }
    }
  }

  // End-of-trace sweep: every store never covered by flush+fence.
  for (const auto& [base, stores] : exposed) {
    for (const UnpersistedStore& s : stores) {
      BugClass c = regions.volatile_hinted(s.addr, s.size) ? BugClass::UP : BugClass::UC;
      acc.add(c, s.site, s.event_index, base);
    }
  }

  CheckResult result;
  result.reports.reserve(acc.folded.size());
  for (auto& [key, report] : acc.folded) result.reports.push_back(std::move(report));
  std::sort(result.reports.begin(), result.reports.end(),
            [](const BugReport& a, const BugReport& b) {
              return std::tie(a.first_event, a.site) < std::tie(b.first_event, b.site);
            });
  result.totals = summarize(result.reports);
  return result;
}

std::map<BugClass, ClassStats> summarize(const std::vector<BugReport>& reports) {
  std::map<BugClass, ClassStats> totals;
  for (BugClass c : kBugClassOrder) totals[c] = {};
  for (const BugReport& r : reports) {
    ClassStats& s = totals[r.bug_class];
    ++s.unique;
    s.occurrences += r.occurrences;
  }
  return totals;
}

}  // namespace pmtrace
