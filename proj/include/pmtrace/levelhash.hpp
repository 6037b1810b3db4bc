#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pmtrace/crash_enum.hpp"
#include "pmtrace/trace.hpp"

namespace pmtrace {

inline constexpr std::uint64_t kHeapBase = 0x100000;
inline constexpr std::uint64_t kHeapArena = 8ull << 20;

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

/// Simulated persistent heap: sparse line map (untouched memory reads zero)
/// with a line-aligned bump allocator. Holds the cache-level view of memory;
/// durability is judged by replaying the emitted trace, never here.
class SimHeap {
 public:
  explicit SimHeap(std::uint64_t base = kHeapBase, std::uint64_t capacity = kHeapArena)
      : base_(base), capacity_(capacity), brk_(base) {}

  std::uint64_t base() const { return base_; }
  std::uint64_t capacity() const { return capacity_; }

  std::uint64_t alloc(std::uint64_t bytes);

  std::uint8_t read_byte(std::uint64_t addr) const;
  std::uint64_t read_u64(std::uint64_t addr) const;
  void write(std::uint64_t addr, std::span<const std::uint8_t> bytes);

 private:
  std::map<std::uint64_t, LineBytes> lines_;
  std::uint64_t base_, capacity_, brk_;
};

/// Appends trace events with dense indices; applies stores to the heap.
class TraceEmitter {
 public:
  explicit TraceEmitter(std::size_t index_base = 0) : index_base_(index_base) {}

  std::size_t next_index() const { return index_base_ + events_.size(); }

  void region(std::uint64_t base, std::uint64_t size, bool persistent);
  void volatile_hint(std::uint64_t base, std::uint64_t size);
  void store(SimHeap& heap, std::uint64_t addr, std::span<const std::uint8_t> bytes,
             std::string site);
  void store_u64(SimHeap& heap, std::uint64_t addr, std::uint64_t value, std::string site);
  void store_u8(SimHeap& heap, std::uint64_t addr, std::uint8_t value, std::string site);
  void flush(std::uint64_t addr, std::string site, FlushKind kind = FlushKind::Clwb);
  void fence(std::string site);
  void crash_marker();

  const std::vector<TraceEvent>& events() const { return events_; }
  std::vector<TraceEvent> take() { return std::move(events_); }

 private:
  TraceEvent& push(EventKind kind);
  std::vector<TraceEvent> events_;
  std::size_t index_base_;
};

enum class KnobKind {
  None,
  MissingFlushToken,
  MissingFenceTokenValue,
  FlushWholeHeader,
  ClwbArbitraryRange,
  NonAtomicInit,
  ExtraFenceLoop,
  DuplicateOnMove,
};

const char* to_string(KnobKind kind);
std::optional<KnobKind> knob_from_name(const std::string& name);

/// One seeded bug pattern; count scales the pattern where that makes sense
/// (0 picks the knob's default). See docs/layout.md for the per-knob effect
/// and the bug class each one advertises.
struct BugKnob {
  KnobKind kind = KnobKind::None;
  int count = 0;
};

enum class InsertStatus { Ok, Duplicate, Full };

/// Two-level 4-slot-bucket hash table over a simulated persistent heap.
/// Slots arrays are one cache line per bucket (4 x 16-byte KV slots); token
/// bytes (one per bucket, low 4 bits) live in separate packed arrays so slot
/// and token persistence are independently observable. Byte layout is
/// documented in docs/layout.md and frozen by a golden-image test.
class LevelTable {
 public:
  static constexpr std::uint64_t kMagic = 0x3148534c564c; // "LVLSH1" little-endian
  static constexpr int kSlotsPerBucket = 4;
  static constexpr std::uint64_t kBucketBytes = 64;
  static constexpr std::uint64_t kSlotBytes = 16;
  static constexpr int kPaddingLines = 8;

  static LevelTable create(SimHeap heap, TraceEmitter& out, int level_exponent,
                           BugKnob knob = {});

  InsertStatus insert(std::uint64_t key, std::uint64_t value, TraceEmitter& out);
  std::optional<std::uint64_t> lookup(std::uint64_t key) const;
  bool erase(std::uint64_t key, TraceEmitter& out);  // false when absent (no-op)
  bool one_step_movement(int level, std::uint64_t bucket, TraceEmitter& out);
  void resize(TraceEmitter& out);

  struct CandidateRef {
    int level;  // 0 = top, 1 = bottom
    std::uint64_t bucket;
    bool operator==(const CandidateRef&) const = default;
  };
  std::array<CandidateRef, 4> candidates(std::uint64_t key) const;
  bool bucket_full(const CandidateRef& ref) const;
  // Where try_place would put this key (first free slot in candidate order).
  std::optional<std::pair<CandidateRef, int>> place_target(std::uint64_t key) const;
  std::uint64_t slot_address(const CandidateRef& ref, int slot) const;
  std::uint64_t token_address(const CandidateRef& ref) const;

  std::uint64_t top_bucket_count() const { return 1ull << exponent_; }
  std::uint64_t bottom_bucket_count() const { return top_bucket_count() / 2; }
  std::size_t item_count() const { return item_count_; }
  std::size_t resize_count() const { return resize_count_; }
  std::size_t movement_count() const { return movement_count_; }
  std::uint64_t header_addr() const { return header_; }
  std::uint64_t padding_line(int i) const;

  SimHeap& heap() { return heap_; }
  const SimHeap& heap() const { return heap_; }

  void set_knob(BugKnob knob) { knob_ = knob; }
  BugKnob knob() const { return knob_; }

  bool movement_enabled = true;
  // Scenario hook: emit a crash marker between a resize's rehash and its
  // header-commit fence (used by the seeded mid-rehash crash scenario).
  bool mark_crash_in_resize = false;

 private:
  LevelTable(SimHeap heap, BugKnob knob) : heap_(std::move(heap)), knob_(knob) {}

  struct SlotSites {
    const char* slot_store;
    const char* slot_flush;
    const char* slot_fence;
    const char* token_store;
    const char* token_flush;
    const char* token_fence;
  };

  std::uint64_t slots_base(int level) const { return level == 0 ? top_slots_ : bottom_slots_; }
  std::uint64_t tokens_base(int level) const { return level == 0 ? top_tokens_ : bottom_tokens_; }
  std::uint64_t bucket_count(int level) const {
    return level == 0 ? top_bucket_count() : bottom_bucket_count();
  }
  std::uint64_t slot_addr(int level, std::uint64_t bucket, int slot) const;
  std::uint64_t token_addr(int level, std::uint64_t bucket) const;
  std::uint8_t token_byte(int level, std::uint64_t bucket) const;
  int find_free_slot(const CandidateRef& ref) const;
  std::optional<std::pair<CandidateRef, int>> locate(std::uint64_t key) const;

  bool try_place(std::uint64_t key, std::uint64_t value, TraceEmitter& out);
  void write_slot_protocol(std::uint64_t slots, std::uint64_t tokens, std::uint64_t bucket,
                           int slot, std::uint64_t key, std::uint64_t value,
                           const SlotSites& sites, TraceEmitter& out);
  void token_update(int level, std::uint64_t bucket, int slot, bool set, const char* store_site,
                    const char* flush_site, const char* fence_site, TraceEmitter& out);
  void commit_header(TraceEmitter& out);

  SimHeap heap_;
  BugKnob knob_;
  std::uint64_t header_ = 0;
  int exponent_ = 0;
  std::uint64_t top_slots_ = 0, top_tokens_ = 0, bottom_slots_ = 0, bottom_tokens_ = 0;
  std::uint64_t padding_ = 0;
  std::uint64_t seed1_ = 0, seed2_ = 0;
  std::size_t item_count_ = 0, resize_count_ = 0, movement_count_ = 0;
};

/// Deterministic insert/lookup/delete workload (60/30/10) with one knob's
/// seeded bug pattern applied; returns the emitted events (region included).
std::vector<TraceEvent> generate_workload(std::size_t op_count, std::uint64_t seed,
                                          BugKnob knob = {});

/// Composable variant used for fixture construction.
std::vector<TraceEvent> generate_workload_composed(std::size_t op_count, std::uint64_t seed,
                                                   const std::vector<BugKnob>& knobs);

/// The bundled fixture recipe: NonAtomicInit x60 + FlushWholeHeader x2 +
/// ExtraFenceLoop x3 composed over a 50-op clean workload (seed below).
inline constexpr std::uint64_t kTable1FixtureSeed = 20260807;
std::vector<TraceEvent> generate_table1_fixture();

/// Seeded mid-rehash crash scenario: a small table is filled until resize,
/// with rehash persists dropped and a crash marker before the header-commit
/// fence. Some crash image then loses a committed key.
std::vector<TraceEvent> generate_resize_crash_scenario();

std::vector<std::size_t> crash_marker_indices(std::span<const TraceEvent> events);

/// Trace-derived recovery oracle: keys whose latest durable token operation
/// is a set and that have no issued-but-unfenced clear at the crash point.
struct ExpectedKeys {
  std::set<std::uint64_t> must_present;
};

ExpectedKeys derive_expected_keys(std::span<const TraceEvent> events, std::size_t crash_event,
                                  std::uint64_t header_addr);

/// Decodes the image as a LevelTable and checks:
///   (a) every token-set slot holds a key hashing to its bucket (GarbageSlot),
///   (b) no key occupies two slots (DuplicateKV),
///   (c) every must-present key is found (LostKV).
/// An undecodable header is CorruptLayout; an all-zero image is an empty
/// table and therefore consistent.
Verdict check_recovery(const CrashImage& image, std::uint64_t header_addr,
                       const ExpectedKeys& expected);

RecoveryChecker make_levelhash_checker(std::span<const TraceEvent> events,
                                       std::size_t crash_event, std::uint64_t header_addr);

}  // namespace pmtrace
