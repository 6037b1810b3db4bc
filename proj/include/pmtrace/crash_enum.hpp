#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pmtrace/pm_state.hpp"

namespace pmtrace {

/// One possible durable memory image at a crash point: everything fenced
/// before the crash plus one subset of the flush-pending lines.
struct CrashImage {
  std::map<std::uint64_t, LineBytes> image;
  std::vector<std::uint64_t> included_pending;  // sorted line bases
  std::size_t crash_event = 0;

  std::uint8_t read_byte(std::uint64_t addr) const;
  std::uint64_t read_u64(std::uint64_t addr) const;  // little-endian
};

struct Verdict {
  bool consistent = true;
  std::string kind;  // violation kind when !consistent

  static Verdict ok() { return {true, ""}; }
  static Verdict violation(std::string k) { return {false, std::move(k)}; }
  bool operator==(const Verdict&) const = default;
};

using RecoveryChecker = std::function<Verdict(const CrashImage&)>;

class PendingCapExceeded : public std::runtime_error {
 public:
  PendingCapExceeded(std::size_t pending, std::size_t cap)
      : std::runtime_error("crash point has " + std::to_string(pending) +
                           " flush-pending lines, exceeding the enumeration cap of " +
                           std::to_string(cap)),
        pending_(pending),
        cap_(cap) {}
  std::size_t pending() const { return pending_; }
  std::size_t cap() const { return cap_; }

 private:
  std::size_t pending_, cap_;
};

inline constexpr std::size_t kDefaultPendingCap = 20;

/// Replays events [0, crash_event) and returns the 2^k images for the k
/// pending lines, subsets in binary counting order of sorted line_base
/// (bit i of the subset mask selects the i-th smallest pending line).
std::vector<CrashImage> enumerate_crash_images(std::span<const TraceEvent> events,
                                               std::size_t crash_event,
                                               std::size_t cap = kDefaultPendingCap);

struct ImageCheckResult {
  std::vector<std::pair<CrashImage, Verdict>> verdicts;
  std::map<std::string, std::size_t> violation_counts;  // by kind
  std::size_t consistent_count = 0;
};

ImageCheckResult check_images(std::vector<CrashImage> images, const RecoveryChecker& checker);

}  // namespace pmtrace
