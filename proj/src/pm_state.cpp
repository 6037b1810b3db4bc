#include "pmtrace/pm_state.hpp"

#include <cassert>
#include <stdexcept>

namespace pmtrace {

const char* to_string(SignalKind kind) {
  switch (kind) {
    case SignalKind::DuplicateFlush: return "duplicate_flush";
    case SignalKind::FlushUntouched: return "flush_untouched";
    case SignalKind::EmptyFence: return "empty_fence";
  }
  return "?";
}

namespace {

LineState& line_at(MachineState& state, std::uint64_t base) {
  auto [it, inserted] = state.lines.try_emplace(base);
  if (inserted) it->second.line_base = base;
  return it->second;
}

}  // namespace

std::vector<OracleSignal> apply_event(MachineState& state, const TraceEvent& event) {
  if (state.last_event_index && event.index <= *state.last_event_index)
    throw std::invalid_argument("event indices must be strictly increasing");
  state.last_event_index = event.index;

  std::vector<OracleSignal> signals;
  switch (event.kind) {
    case EventKind::Store: {
      assert(line_of(event.addr) == line_of(event.addr + event.size - 1));
      LineState& ls = line_at(state, line_of(event.addr));
      std::uint64_t offset = event.addr - ls.line_base;
      for (std::size_t i = 0; i < event.value.size(); ++i) {
        ls.cache_content[offset + i] = event.value[i];
        ls.dirty_bytes.set(offset + i);
      }
      if (ls.status == LineStatus::FlushPending) state.pending.erase(ls.line_base);
      ls.status = LineStatus::Dirty;
      ls.last_mod_event = event.index;
      ++state.store_count;
      break;
    }
    case EventKind::Flush: {
      LineState& ls = line_at(state, line_of(event.addr));
      if (ls.status == LineStatus::Dirty) {
        ls.status = LineStatus::FlushPending;
        ls.last_flush_event = event.index;
        state.pending.insert(ls.line_base);
      } else if (ls.status == LineStatus::FlushPending) {
        signals.push_back({SignalKind::DuplicateFlush, event.index, event.site, ls.line_base});
      } else {
        // CLEAN: re-flush of already-persisted content is a duplicate flush;
        // a line nothing ever stored to is a flush of untouched memory.
        SignalKind kind =
            ls.ever_stored() ? SignalKind::DuplicateFlush : SignalKind::FlushUntouched;
        signals.push_back({kind, event.index, event.site, ls.line_base});
      }
      ++state.flush_count;
      break;
    }
    case EventKind::Fence: {
      if (state.pending.empty()) {
        signals.push_back({SignalKind::EmptyFence, event.index, event.site, 0});
      } else {
        for (std::uint64_t base : state.pending) {
          LineState& ls = state.lines.at(base);
          ls.persisted_content = ls.cache_content;
          ls.dirty_bytes.reset();
          ls.status = LineStatus::Clean;
          ls.last_persist_event = event.index;
        }
        state.pending.clear();
      }
      ++state.fence_count;
      break;
    }
    case EventKind::Region:
    case EventKind::VolatileHint:
    case EventKind::Crash:
      break;
  }
  return signals;
}

MachineState replay(std::span<const TraceEvent> events) {
  return replay_prefix(events, events.size());
}

MachineState replay_prefix(std::span<const TraceEvent> events, std::size_t end_index) {
  MachineState state;
  for (std::size_t i = 0; i < end_index && i < events.size(); ++i) apply_event(state, events[i]);
  return state;
}

std::map<std::uint64_t, LineBytes> persisted_view(const MachineState& state) {
  std::map<std::uint64_t, LineBytes> view;
  for (const auto& [base, ls] : state.lines) view.emplace(base, ls.persisted_content);
  return view;
}

}  // namespace pmtrace
