#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "pmtrace/trace.hpp"

namespace pmtrace {

enum class LineStatus { Clean, Dirty, FlushPending };

using LineBytes = std::array<std::uint8_t, kCacheLineSize>;

/// Per-cache-line persistence state. Initial memory content is all zero.
struct LineState {
  std::uint64_t line_base = 0;
  LineStatus status = LineStatus::Clean;
  std::bitset<kCacheLineSize> dirty_bytes;
  LineBytes cache_content{};
  LineBytes persisted_content{};
  std::optional<std::size_t> last_mod_event;
  std::optional<std::size_t> last_flush_event;
  std::optional<std::size_t> last_persist_event;

  bool ever_stored() const { return last_mod_event.has_value(); }
};

enum class SignalKind { DuplicateFlush, FlushUntouched, EmptyFence };

const char* to_string(SignalKind kind);

/// Raw state-machine observation; the oracles module classifies these into
/// bug reports after region filtering.
struct OracleSignal {
  SignalKind kind;
  std::size_t event_index;
  std::string site;
  std::uint64_t line = 0;  // 0 for fence signals
};

struct MachineState {
  std::map<std::uint64_t, LineState> lines;
  std::set<std::uint64_t> pending;  // exactly the FLUSH_PENDING line bases
  std::size_t store_count = 0;
  std::size_t flush_count = 0;
  std::size_t fence_count = 0;
  std::optional<std::size_t> last_event_index;
};

/// Applies one event. Event indices must be strictly increasing
/// (std::invalid_argument otherwise). Transition rules:
///   Store: bytes into cache_content, line becomes DIRTY; a FLUSH_PENDING
///          line is demoted (the earlier flush no longer covers it).
///   Flush: DIRTY -> FLUSH_PENDING. Re-flush of a FLUSH_PENDING line, or of a
///          CLEAN line that has been stored to before, signals DuplicateFlush;
///          flush of a never-stored line signals FlushUntouched.
///   Fence: drains the pending set (persisted_content := cache_content);
///          signals EmptyFence when nothing was pending.
std::vector<OracleSignal> apply_event(MachineState& state, const TraceEvent& event);

MachineState replay(std::span<const TraceEvent> events);
// Replays events [0, end_index).
MachineState replay_prefix(std::span<const TraceEvent> events, std::size_t end_index);

/// Durable view: persisted_content for every line ever touched. Pending or
/// dirty bytes are not included (crash_enum owns pending-subset semantics).
std::map<std::uint64_t, LineBytes> persisted_view(const MachineState& state);

}  // namespace pmtrace
