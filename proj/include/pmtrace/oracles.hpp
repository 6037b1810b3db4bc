#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pmtrace/pm_state.hpp"
#include "pmtrace/trace.hpp"

namespace pmtrace {

/// The five bug classes, in Table-style column order.
enum class BugClass { UC, UP, EP, FlP, FeP };

inline constexpr BugClass kBugClassOrder[] = {BugClass::UC, BugClass::UP, BugClass::EP,
                                              BugClass::FlP, BugClass::FeP};

const char* to_string(BugClass c);  // "U-C", "U-P", "EP", "Fl-P", "Fe-P"

struct BugReport {
  BugClass bug_class;
  std::string site;
  std::size_t occurrences = 0;
  std::size_t first_event = 0;
  std::size_t last_event = 0;
  std::vector<std::size_t> evidence;  // up to 8 sample event indices
  std::set<std::uint64_t> lines;
};

struct ClassStats {
  std::size_t unique = 0;
  std::size_t occurrences = 0;
};

struct CheckResult {
  std::vector<BugReport> reports;  // deduplicated, sorted (first_event, site)
  std::map<BugClass, ClassStats> totals;

  std::size_t total_unique() const { return reports.size(); }
};

/// Replays the trace and classifies:
///   unpersisted store at end of trace -> U-C (U-P when volatile-hinted),
///   DuplicateFlush -> EP, FlushUntouched -> Fl-P, EmptyFence -> Fe-P.
/// Store/flush events outside persistent regions produce no reports.
/// Dedup key is (class, site); occurrences count every folded signal.
CheckResult check_trace(std::span<const TraceEvent> events, const RegionTable& regions);

std::map<BugClass, ClassStats> summarize(const std::vector<BugReport>& reports);

}  // namespace pmtrace
