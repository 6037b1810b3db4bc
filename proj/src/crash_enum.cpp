#include "pmtrace/crash_enum.hpp"

#include <algorithm>

namespace pmtrace {

std::uint8_t CrashImage::read_byte(std::uint64_t addr) const {
  auto it = image.find(line_of(addr));
  if (it == image.end()) return 0;  // untouched memory reads as zero
  return it->second[addr - line_of(addr)];
}

std::uint64_t CrashImage::read_u64(std::uint64_t addr) const {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | read_byte(addr + static_cast<std::uint64_t>(i));
  return v;
}

std::vector<CrashImage> enumerate_crash_images(std::span<const TraceEvent> events,
                                               std::size_t crash_event, std::size_t cap) {
  MachineState state = replay_prefix(events, crash_event);
  std::vector<std::uint64_t> pending(state.pending.begin(), state.pending.end());
  if (pending.size() > cap) throw PendingCapExceeded(pending.size(), cap);

  const std::map<std::uint64_t, LineBytes> base_view = persisted_view(state);
  const std::size_t k = pending.size();
  std::vector<CrashImage> images;
  images.reserve(std::size_t{1} << k);
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << k); ++mask) {
    CrashImage img;
    img.crash_event = crash_event;
    img.image = base_view;
    for (std::size_t bit = 0; bit < k; ++bit) {
      if (mask & (std::uint64_t{1} << bit)) {
        std::uint64_t base = pending[bit];
        img.image[base] = state.lines.at(base).cache_content;
        img.included_pending.push_back(base);
      }
    }
    images.push_back(std::move(img));
  }
  return images;
}

ImageCheckResult check_images(std::vector<CrashImage> images, const RecoveryChecker& checker) {
  ImageCheckResult result;
  result.verdicts.reserve(images.size());
  for (CrashImage& img : images) {
    Verdict v = checker(img);
    if (v.consistent)
      ++result.consistent_count;
    else
      ++result.violation_counts[v.kind];
    result.verdicts.emplace_back(std::move(img), std::move(v));
  }
  return result;
}

}  // namespace pmtrace
