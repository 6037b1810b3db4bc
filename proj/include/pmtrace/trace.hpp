#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmtrace {

inline constexpr std::uint64_t kCacheLineSize = 64;

inline constexpr std::uint64_t line_of(std::uint64_t addr) {
  return addr & ~(kCacheLineSize - 1);
}

enum class EventKind { Store, Flush, Fence, Region, VolatileHint, Crash };

enum class FlushKind { Clwb, Clflushopt, Clflush };

const char* to_string(EventKind kind);
const char* to_string(FlushKind kind);

/// One PM-relevant program action. After normalization every Store lies
/// within a single cache line and event indices are dense 0..n-1.
struct TraceEvent {
  std::size_t index = 0;
  EventKind kind = EventKind::Fence;
  std::uint64_t addr = 0;           // Store / Flush / Region / VolatileHint
  std::uint64_t size = 0;           // Store / Region / VolatileHint
  std::vector<std::uint8_t> value;  // Store only
  FlushKind flush_kind = FlushKind::Clwb;
  bool persistent = false;  // Region only
  std::string site;         // Store / Flush / Fence
  int tid = 0;

  bool operator==(const TraceEvent&) const = default;
};

struct RegionRange {
  std::uint64_t base = 0;
  std::uint64_t size = 0;
  bool persistent = false;

  bool contains(std::uint64_t addr) const { return addr >= base && addr < base + size; }
  bool overlaps(std::uint64_t lo, std::uint64_t len) const {
    return lo < base + size && base < lo + len;
  }
  bool operator==(const RegionRange&) const = default;
};

/// Declared address-space map: non-overlapping region ranges plus
/// intentionally-volatile hint ranges (used for the U-C / U-P split).
struct RegionTable {
  std::vector<RegionRange> ranges;  // sorted by base
  std::vector<std::pair<std::uint64_t, std::uint64_t>> volatile_hints;

  const RegionRange* find(std::uint64_t addr) const;
  // True when any byte of [addr, addr+len) lies in a persistent region.
  bool persistent_overlap(std::uint64_t addr, std::uint64_t len) const;
  // True when [addr, addr+len) intersects any volatile hint range.
  bool volatile_hinted(std::uint64_t addr, std::uint64_t len) const;

  bool operator==(const RegionTable&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct ParsedTrace {
  std::vector<TraceEvent> events;
  RegionTable regions;
};

/// Splits multi-line stores at cache-line boundaries, assigns dense indices,
/// validates region declarations (non-overlap, declared before first touch)
/// and builds the region table. Source line numbers, when provided, are used
/// for error messages; they must parallel `events`.
ParsedTrace normalize_trace(std::vector<TraceEvent> events,
                            const std::vector<std::size_t>* source_lines = nullptr);

ParsedTrace parse_trace(std::istream& in);
ParsedTrace parse_trace_file(const std::string& path);

void write_trace(std::ostream& out, const std::vector<TraceEvent>& events);
void write_trace_file(const std::string& path, const std::vector<TraceEvent>& events);

std::string hex_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> hex_decode(const std::string& text);  // throws std::invalid_argument

}  // namespace pmtrace
