#include "pmtrace/levelhash.hpp"

#include <algorithm>
#include <cassert>
#include <stdexcept>

namespace pmtrace {

namespace {

// Site tags mimic source locations of the traced program; they are the
// dedup keys the oracles fold on, so every protocol step gets its own.
constexpr const char* kSiteInitHeaderStore = "level_hashing.c:58";
constexpr const char* kSiteInitHeaderFlush = "level_hashing.c:59";
constexpr const char* kSiteInitHeaderFence = "level_hashing.c:60";
constexpr const char* kSiteClwbPrepStore = "level_hashing.c:96";
constexpr const char* kSiteClwbPrepFlush = "level_hashing.c:97";
constexpr const char* kSiteClwbPrepFence = "level_hashing.c:98";
constexpr const char* kSiteClwbLoop = "level_hashing.c:104";
constexpr const char* kSiteDeleteStore = "level_hashing.c:310";
constexpr const char* kSiteDeleteFlush = "level_hashing.c:311";
constexpr const char* kSiteDeleteFence = "level_hashing.c:312";
constexpr const char* kSiteMoveClearStore = "level_hashing.c:252";
constexpr const char* kSiteMoveClearFlush = "level_hashing.c:253";
constexpr const char* kSiteMoveClearFence = "level_hashing.c:254";
constexpr const char* kSiteMoveClearUnpersisted = "level_hashing.c:275";
constexpr const char* kSiteHeaderCommitStore = "level_hashing.c:436";
constexpr const char* kSiteHeaderCommitFlush = "level_hashing.c:437";
constexpr const char* kSiteHeaderCommitFence = "level_hashing.c:438";

void put_u64(std::span<std::uint8_t> out, std::size_t off, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

std::uint64_t SimHeap::alloc(std::uint64_t bytes) {
  if (bytes == 0) throw std::invalid_argument("alloc of zero bytes");
  std::uint64_t addr = brk_;
  std::uint64_t rounded = (bytes + kCacheLineSize - 1) & ~(kCacheLineSize - 1);
  if (brk_ + rounded > base_ + capacity_) throw std::runtime_error("simulated heap exhausted");
  brk_ += rounded;
  return addr;
}

std::uint8_t SimHeap::read_byte(std::uint64_t addr) const {
  auto it = lines_.find(line_of(addr));
  if (it == lines_.end()) return 0;
  return it->second[addr - line_of(addr)];
}

std::uint64_t SimHeap::read_u64(std::uint64_t addr) const {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | read_byte(addr + static_cast<std::uint64_t>(i));
  return v;
}

void SimHeap::write(std::uint64_t addr, std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    std::uint64_t a = addr + i;
    auto [it, fresh] = lines_.try_emplace(line_of(a));
    (void)fresh;
    it->second[a - line_of(a)] = bytes[i];
  }
}

TraceEvent& TraceEmitter::push(EventKind kind) {
  TraceEvent e;
  e.index = next_index();
  e.kind = kind;
  events_.push_back(std::move(e));
  return events_.back();
}

void TraceEmitter::region(std::uint64_t base, std::uint64_t size, bool persistent) {
  TraceEvent& e = push(EventKind::Region);
  e.addr = base;
  e.size = size;
  e.persistent = persistent;
}

void TraceEmitter::volatile_hint(std::uint64_t base, std::uint64_t size) {
  TraceEvent& e = push(EventKind::VolatileHint);
  e.addr = base;
  e.size = size;
}

void TraceEmitter::store(SimHeap& heap, std::uint64_t addr, std::span<const std::uint8_t> bytes,
                         std::string site) {
  assert(!bytes.empty() && line_of(addr) == line_of(addr + bytes.size() - 1));
  heap.write(addr, bytes);
  TraceEvent& e = push(EventKind::Store);
  e.addr = addr;
  e.size = bytes.size();
  e.value.assign(bytes.begin(), bytes.end());
  e.site = std::move(site);
}

void TraceEmitter::store_u64(SimHeap& heap, std::uint64_t addr, std::uint64_t value,
                             std::string site) {
  std::array<std::uint8_t, 8> bytes;
  put_u64(bytes, 0, value);
  store(heap, addr, bytes, std::move(site));
}

void TraceEmitter::store_u8(SimHeap& heap, std::uint64_t addr, std::uint8_t value,
                            std::string site) {
  std::array<std::uint8_t, 1> bytes{value};
  store(heap, addr, bytes, std::move(site));
}

void TraceEmitter::flush(std::uint64_t addr, std::string site, FlushKind kind) {
  TraceEvent& e = push(EventKind::Flush);
  e.addr = addr;
  e.flush_kind = kind;
  e.site = std::move(site);
}

void TraceEmitter::fence(std::string site) { push(EventKind::Fence).site = std::move(site); }

void TraceEmitter::crash_marker() { push(EventKind::Crash); }

const char* to_string(KnobKind kind) {
  switch (kind) {
    case KnobKind::None: return "none";
    case KnobKind::MissingFlushToken: return "missing-flush-token";
    case KnobKind::MissingFenceTokenValue: return "missing-fence-token-value";
    case KnobKind::FlushWholeHeader: return "flush-whole-header";
    case KnobKind::ClwbArbitraryRange: return "clwb-arbitrary-range";
    case KnobKind::NonAtomicInit: return "non-atomic-init";
    case KnobKind::ExtraFenceLoop: return "extra-fence-loop";
    case KnobKind::DuplicateOnMove: return "duplicate-on-move";
  }
  return "?";
}

std::optional<KnobKind> knob_from_name(const std::string& name) {
  for (KnobKind k :
       {KnobKind::None, KnobKind::MissingFlushToken, KnobKind::MissingFenceTokenValue,
        KnobKind::FlushWholeHeader, KnobKind::ClwbArbitraryRange, KnobKind::NonAtomicInit,
        KnobKind::ExtraFenceLoop, KnobKind::DuplicateOnMove}) {
    if (name == to_string(k)) return k;
  }
  return std::nullopt;
}

LevelTable LevelTable::create(SimHeap heap, TraceEmitter& out, int level_exponent, BugKnob knob) {
  if (level_exponent < 1 || level_exponent > 24)
    throw std::invalid_argument("level exponent out of range");
  LevelTable t(std::move(heap), knob);
  t.exponent_ = level_exponent;
  t.seed1_ = 0x9e3779b97f4a7c15ull;
  t.seed2_ = 0xc2b2ae3d27d4eb4full;
  const std::uint64_t topn = std::uint64_t{1} << level_exponent;
  const std::uint64_t botn = topn / 2;
  t.header_ = t.heap_.alloc(kCacheLineSize);
  t.top_slots_ = t.heap_.alloc(topn * kBucketBytes);
  t.top_tokens_ = t.heap_.alloc(topn);
  t.bottom_slots_ = t.heap_.alloc(botn * kBucketBytes);
  t.bottom_tokens_ = t.heap_.alloc(botn);
  t.padding_ = t.heap_.alloc(kPaddingLines * kCacheLineSize);

  std::array<std::uint8_t, kCacheLineSize> hdr{};
  put_u64(hdr, 0, kMagic);
  put_u64(hdr, 8, static_cast<std::uint64_t>(t.exponent_));
  put_u64(hdr, 16, t.top_slots_);
  put_u64(hdr, 24, t.top_tokens_);
  put_u64(hdr, 32, t.bottom_slots_);
  put_u64(hdr, 40, t.bottom_tokens_);
  put_u64(hdr, 48, t.seed1_);
  put_u64(hdr, 56, t.seed2_);
  out.store(t.heap_, t.header_, hdr, kSiteInitHeaderStore);
  out.flush(t.header_, kSiteInitHeaderFlush);
  out.fence(kSiteInitHeaderFence);

  if (knob.kind == KnobKind::NonAtomicInit) {
    int fields = knob.count > 0 ? knob.count : 4;
    std::uint64_t block = t.heap_.alloc(static_cast<std::uint64_t>(fields) * 8);
    for (int i = 0; i < fields; ++i) {
      out.store_u64(t.heap_, block + 8 * static_cast<std::uint64_t>(i),
                    0xA110C8ED00000000ull + static_cast<std::uint64_t>(i),
                    "level_init.c:" + std::to_string(101 + i));
    }
  }
  return t;
}

std::uint64_t LevelTable::padding_line(int i) const {
  assert(i >= 0 && i < kPaddingLines);
  return padding_ + static_cast<std::uint64_t>(i) * kCacheLineSize;
}

std::uint64_t LevelTable::slot_addr(int level, std::uint64_t bucket, int slot) const {
  return slots_base(level) + bucket * kBucketBytes + static_cast<std::uint64_t>(slot) * kSlotBytes;
}

std::uint64_t LevelTable::token_addr(int level, std::uint64_t bucket) const {
  return tokens_base(level) + bucket;
}

std::uint8_t LevelTable::token_byte(int level, std::uint64_t bucket) const {
  return heap_.read_byte(token_addr(level, bucket));
}

std::array<LevelTable::CandidateRef, 4> LevelTable::candidates(std::uint64_t key) const {
  const std::uint64_t h1 = mix64(key ^ seed1_);
  const std::uint64_t h2 = mix64(key ^ seed2_);
  return {CandidateRef{0, h1 % top_bucket_count()}, CandidateRef{0, h2 % top_bucket_count()},
          CandidateRef{1, h1 % bottom_bucket_count()},
          CandidateRef{1, h2 % bottom_bucket_count()}};
}

bool LevelTable::bucket_full(const CandidateRef& ref) const {
  return (token_byte(ref.level, ref.bucket) & 0xf) == 0xf;
}

int LevelTable::find_free_slot(const CandidateRef& ref) const {
  std::uint8_t tok = token_byte(ref.level, ref.bucket);
  for (int s = 0; s < kSlotsPerBucket; ++s)
    if (!(tok >> s & 1)) return s;
  return -1;
}

std::optional<std::pair<LevelTable::CandidateRef, int>> LevelTable::place_target(
    std::uint64_t key) const {
  for (const CandidateRef& ref : candidates(key)) {
    int s = find_free_slot(ref);
    if (s >= 0) return std::make_pair(ref, s);
  }
  return std::nullopt;
}

std::uint64_t LevelTable::slot_address(const CandidateRef& ref, int slot) const {
  return slot_addr(ref.level, ref.bucket, slot);
}

std::uint64_t LevelTable::token_address(const CandidateRef& ref) const {
  return token_addr(ref.level, ref.bucket);
}

std::optional<std::pair<LevelTable::CandidateRef, int>> LevelTable::locate(
    std::uint64_t key) const {
  for (const CandidateRef& ref : candidates(key)) {
    std::uint8_t tok = token_byte(ref.level, ref.bucket);
    for (int s = 0; s < kSlotsPerBucket; ++s) {
      if ((tok >> s & 1) && heap_.read_u64(slot_addr(ref.level, ref.bucket, s)) == key)
        return std::make_pair(ref, s);
    }
  }
  return std::nullopt;
}

std::optional<std::uint64_t> LevelTable::lookup(std::uint64_t key) const {
  if (auto loc = locate(key))
    return heap_.read_u64(slot_addr(loc->first.level, loc->first.bucket, loc->second) + 8);
  return std::nullopt;
}

void LevelTable::write_slot_protocol(std::uint64_t slots, std::uint64_t tokens,
                                     std::uint64_t bucket, int slot, std::uint64_t key,
                                     std::uint64_t value, const SlotSites& sites,
                                     TraceEmitter& out) {
  const std::uint64_t sa = slots + bucket * kBucketBytes + static_cast<std::uint64_t>(slot) * kSlotBytes;
  const std::uint64_t ta = tokens + bucket;
  std::array<std::uint8_t, kSlotBytes> kv;
  put_u64(kv, 0, key);
  put_u64(kv, 8, value);
  const std::uint8_t newtok =
      static_cast<std::uint8_t>(heap_.read_byte(ta) | (1u << static_cast<unsigned>(slot)));

  switch (knob_.kind) {
    case KnobKind::MissingFlushToken:
      out.store(heap_, sa, kv, sites.slot_store);
      out.flush(sa, sites.slot_flush);
      out.fence(sites.slot_fence);
      out.store_u8(heap_, ta, newtok, sites.token_store);
      break;
    case KnobKind::MissingFenceTokenValue:
      out.store(heap_, sa, kv, sites.slot_store);
      out.flush(sa, sites.slot_flush);
      out.store_u8(heap_, ta, newtok, sites.token_store);
      out.flush(ta, sites.token_flush);
      break;
    default:
      out.store(heap_, sa, kv, sites.slot_store);
      out.flush(sa, sites.slot_flush);
      out.fence(sites.slot_fence);
      out.store_u8(heap_, ta, newtok, sites.token_store);
      out.flush(ta, sites.token_flush);
      out.fence(sites.token_fence);
      break;
  }
}

void LevelTable::token_update(int level, std::uint64_t bucket, int slot, bool set,
                              const char* store_site, const char* flush_site,
                              const char* fence_site, TraceEmitter& out) {
  const std::uint64_t ta = token_addr(level, bucket);
  std::uint8_t tok = heap_.read_byte(ta);
  tok = set ? static_cast<std::uint8_t>(tok | (1u << static_cast<unsigned>(slot)))
            : static_cast<std::uint8_t>(tok & ~(1u << static_cast<unsigned>(slot)));
  out.store_u8(heap_, ta, tok, store_site);
  out.flush(ta, flush_site);
  out.fence(fence_site);
}

bool LevelTable::try_place(std::uint64_t key, std::uint64_t value, TraceEmitter& out) {
  static constexpr SlotSites kInsertSites = {"level_hashing.c:210", "level_hashing.c:211",
                                             "level_hashing.c:212", "level_hashing.c:221",
                                             "level_hashing.c:222", "level_hashing.c:223"};
  for (const CandidateRef& ref : candidates(key)) {
    int s = find_free_slot(ref);
    if (s < 0) continue;
    write_slot_protocol(slots_base(ref.level), tokens_base(ref.level), ref.bucket, s, key, value,
                        kInsertSites, out);
    return true;
  }
  return false;
}

InsertStatus LevelTable::insert(std::uint64_t key, std::uint64_t value, TraceEmitter& out) {
  if (lookup(key)) return InsertStatus::Duplicate;
  if (try_place(key, value, out)) {
    ++item_count_;
    return InsertStatus::Ok;
  }
  if (movement_enabled) {
    for (const CandidateRef& ref : candidates(key)) {
      if (!one_step_movement(ref.level, ref.bucket, out)) continue;
      if (try_place(key, value, out)) {
        ++item_count_;
        return InsertStatus::Ok;
      }
      break;
    }
  }
  resize(out);
  if (try_place(key, value, out)) {
    ++item_count_;
    return InsertStatus::Ok;
  }
  return InsertStatus::Full;
}

bool LevelTable::one_step_movement(int level, std::uint64_t bucket, TraceEmitter& out) {
  static constexpr SlotSites kMoveCopySites = {"level_hashing.c:262", "level_hashing.c:263",
                                               "level_hashing.c:264", "level_hashing.c:268",
                                               "level_hashing.c:269", "level_hashing.c:270"};
  // Victim order: slot 0 -> 3, first occupant with a free alternate wins.
  for (int s = 0; s < kSlotsPerBucket; ++s) {
    if (!(token_byte(level, bucket) >> s & 1)) continue;
    const std::uint64_t key = heap_.read_u64(slot_addr(level, bucket, s));
    const std::uint64_t value = heap_.read_u64(slot_addr(level, bucket, s) + 8);
    for (const CandidateRef& alt : candidates(key)) {
      if (alt.level == level && alt.bucket == bucket) continue;
      int t = find_free_slot(alt);
      if (t < 0) continue;
      ++movement_count_;
      if (knob_.kind == KnobKind::DuplicateOnMove) {
        // Buggy order: copy first, then a source clear that never persists.
        write_slot_protocol(slots_base(alt.level), tokens_base(alt.level), alt.bucket, t, key,
                            value, kMoveCopySites, out);
        out.crash_marker();
        std::uint8_t cleared = static_cast<std::uint8_t>(
            token_byte(level, bucket) & ~(1u << static_cast<unsigned>(s)));
        out.store_u8(heap_, token_addr(level, bucket), cleared, kSiteMoveClearUnpersisted);
      } else {
        // Clear the source before the copy becomes visible; a crash inside
        // the window loses the in-flight key but never duplicates it.
        token_update(level, bucket, s, false, kSiteMoveClearStore, kSiteMoveClearFlush,
                     kSiteMoveClearFence, out);
        write_slot_protocol(slots_base(alt.level), tokens_base(alt.level), alt.bucket, t, key,
                            value, kMoveCopySites, out);
      }
      return true;
    }
  }
  return false;
}

bool LevelTable::erase(std::uint64_t key, TraceEmitter& out) {
  auto loc = locate(key);
  if (!loc) return false;
  token_update(loc->first.level, loc->first.bucket, loc->second, false, kSiteDeleteStore,
               kSiteDeleteFlush, kSiteDeleteFence, out);
  --item_count_;
  return true;
}

void LevelTable::resize(TraceEmitter& out) {
  static constexpr SlotSites kRehashSites = {"level_hashing.c:412", "level_hashing.c:413",
                                             "level_hashing.c:414", "level_hashing.c:418",
                                             "level_hashing.c:419", "level_hashing.c:420"};
  const std::uint64_t old_botn = bottom_bucket_count();
  const std::uint64_t new_topn = top_bucket_count() * 2;
  const std::uint64_t ns = heap_.alloc(new_topn * kBucketBytes);
  const std::uint64_t nt = heap_.alloc(new_topn);

  // Rehash the bottom level into the new top level. The old top keeps its
  // item positions and becomes the new bottom when the header commits.
  for (std::uint64_t b = 0; b < old_botn; ++b) {
    const std::uint8_t tok = token_byte(1, b);
    for (int s = 0; s < kSlotsPerBucket; ++s) {
      if (!(tok >> s & 1)) continue;
      const std::uint64_t key = heap_.read_u64(slot_addr(1, b, s));
      const std::uint64_t value = heap_.read_u64(slot_addr(1, b, s) + 8);
      int slot = -1;
      std::uint64_t dest = 0;
      for (std::uint64_t cb : {mix64(key ^ seed1_) % new_topn, mix64(key ^ seed2_) % new_topn}) {
        std::uint8_t dtok = heap_.read_byte(nt + cb);
        for (int t = 0; t < kSlotsPerBucket && slot < 0; ++t) {
          if (!(dtok >> t & 1)) {
            dest = cb;
            slot = t;
          }
        }
        if (slot >= 0) break;
      }
      if (slot < 0) throw std::runtime_error("level hash resize overflow");
      write_slot_protocol(ns, nt, dest, slot, key, value, kRehashSites, out);
    }
  }

  exponent_ += 1;
  bottom_slots_ = top_slots_;
  bottom_tokens_ = top_tokens_;
  top_slots_ = ns;
  top_tokens_ = nt;
  ++resize_count_;
  commit_header(out);
}

void LevelTable::commit_header(TraceEmitter& out) {
  std::array<std::uint8_t, 40> bytes;
  put_u64(bytes, 0, static_cast<std::uint64_t>(exponent_));
  put_u64(bytes, 8, top_slots_);
  put_u64(bytes, 16, top_tokens_);
  put_u64(bytes, 24, bottom_slots_);
  put_u64(bytes, 32, bottom_tokens_);
  out.store(heap_, header_ + 8, bytes, kSiteHeaderCommitStore);
  out.flush(header_, kSiteHeaderCommitFlush);
  if (mark_crash_in_resize) out.crash_marker();
  out.fence(kSiteHeaderCommitFence);
}

namespace {

// Doomed key for the missing-fence scenario: lands in a never-used slot of a
// bucket that is not one of key 0's candidate buckets, so a crash image that
// persists the token line but not the slot line fails the hash check.
std::uint64_t find_doomed_key(const LevelTable& table, std::mt19937_64& rng) {
  auto zero_cands = table.candidates(0);
  for (int tries = 0; tries < 200000; ++tries) {
    std::uint64_t k = rng();
    if (k == 0 || table.lookup(k)) continue;
    auto target = table.place_target(k);
    if (!target) continue;
    if (std::any_of(zero_cands.begin(), zero_cands.end(),
                    [&](const auto& c) { return c == target->first; }))
      continue;
    bool slot_zero = true;
    std::uint64_t sa = table.slot_address(target->first, target->second);
    for (std::uint64_t off = 0; off < LevelTable::kSlotBytes; ++off)
      slot_zero = slot_zero && table.heap().read_byte(sa + off) == 0;
    if (!slot_zero) continue;
    return k;
  }
  throw std::runtime_error("could not find a doomed key for the scenario");
}

std::uint64_t prepare_full_top_bucket(LevelTable& table, TraceEmitter& out,
                                      std::mt19937_64& rng) {
  std::uint64_t seed_key;
  do {
    seed_key = rng();
  } while (table.lookup(seed_key));
  const LevelTable::CandidateRef target = table.candidates(seed_key)[0];
  int guard = 0;
  while (!table.bucket_full(target)) {
    if (++guard > 2000000) throw std::runtime_error("could not fill the target bucket");
    std::uint64_t k = rng();
    if (table.lookup(k)) continue;
    if (!(table.candidates(k)[0] == target)) continue;
    if (table.insert(k, rng(), out) != InsertStatus::Ok)
      throw std::runtime_error("bucket fill insert failed");
  }
  return target.bucket;
}

void emit_knob_epilogue(LevelTable& table, TraceEmitter& out, const BugKnob& knob,
                        std::mt19937_64& rng) {
  switch (knob.kind) {
    case KnobKind::FlushWholeHeader: {
      int n = std::clamp(knob.count > 0 ? knob.count : 1, 1, 4);
      for (int i = 0; i < n; ++i)
        out.flush(table.padding_line(i), "set.c:" + std::to_string(2236 + 15 * i));
      break;
    }
    case KnobKind::ClwbArbitraryRange: {
      int n = std::clamp(knob.count > 0 ? knob.count : 4, 1, 4);
      const std::uint64_t scratch = table.padding_line(4);
      out.store_u64(table.heap(), scratch, 0x5caff01d, kSiteClwbPrepStore);
      out.flush(scratch, kSiteClwbPrepFlush);
      out.fence(kSiteClwbPrepFence);
      for (int i = 0; i < n; ++i)
        out.flush(scratch + static_cast<std::uint64_t>(i) * kCacheLineSize, kSiteClwbLoop);
      break;
    }
    case KnobKind::ExtraFenceLoop: {
      int n = std::max(knob.count, 1);
      for (int i = 0; i < n; ++i) out.fence("obj.c:" + std::to_string(1205 + 15 * i));
      break;
    }
    case KnobKind::MissingFenceTokenValue: {
      table.set_knob(knob);
      std::uint64_t k = find_doomed_key(table, rng);
      table.insert(k, rng(), out);
      out.crash_marker();
      break;
    }
    case KnobKind::DuplicateOnMove: {
      const std::uint64_t bucket = prepare_full_top_bucket(table, out, rng);
      table.set_knob(knob);
      if (!table.one_step_movement(0, bucket, out))
        throw std::runtime_error("duplicate-on-move scenario: no relocatable occupant");
      break;
    }
    case KnobKind::MissingFlushToken: {
      // One final affected insert so at least one token store is still
      // unpersisted at end of trace (a later delete's flush could otherwise
      // persist the shared token line).
      std::uint64_t k;
      do {
        k = rng();
      } while (table.lookup(k));
      table.insert(k, rng(), out);
      break;
    }
    case KnobKind::NonAtomicInit:
    case KnobKind::None:
      break;
  }
}

}  // namespace

std::vector<TraceEvent> generate_workload_composed(std::size_t op_count, std::uint64_t seed,
                                                   const std::vector<BugKnob>& knobs) {
  BugKnob create_knob{};
  BugKnob protocol_knob{};
  std::vector<BugKnob> epilogue;
  for (const BugKnob& k : knobs) {
    switch (k.kind) {
      case KnobKind::None:
        break;
      case KnobKind::NonAtomicInit:
        create_knob = k;
        break;
      case KnobKind::MissingFlushToken:
        protocol_knob = k;
        epilogue.push_back(k);
        break;
      default:
        epilogue.push_back(k);
        break;
    }
  }

  SimHeap heap;
  TraceEmitter out;
  out.region(heap.base(), heap.capacity(), true);
  LevelTable table = LevelTable::create(std::move(heap), out, 4, create_knob);
  table.set_knob(protocol_knob);

  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> live;
  for (std::size_t i = 0; i < op_count; ++i) {
    std::uint64_t roll = rng() % 100;
    if (roll < 60) {
      std::uint64_t k;
      do {
        k = rng();
      } while (table.lookup(k));
      if (table.insert(k, rng(), out) == InsertStatus::Ok) live.push_back(k);
    } else if (roll < 90) {
      if (!live.empty() && rng() % 5 != 0)
        (void)table.lookup(live[rng() % live.size()]);
      else
        (void)table.lookup(rng());
    } else {
      if (!live.empty()) {
        std::size_t idx = rng() % live.size();
        table.erase(live[idx], out);
        live[idx] = live.back();
        live.pop_back();
      } else {
        table.erase(rng(), out);
      }
    }
  }
  for (const BugKnob& k : epilogue) emit_knob_epilogue(table, out, k, rng);
  return out.take();
}

std::vector<TraceEvent> generate_workload(std::size_t op_count, std::uint64_t seed, BugKnob knob) {
  return generate_workload_composed(op_count, seed, {knob});
}

std::vector<TraceEvent> generate_table1_fixture() {
  return generate_workload_composed(50, kTable1FixtureSeed,
                                    {{KnobKind::NonAtomicInit, 60},
                                     {KnobKind::FlushWholeHeader, 2},
                                     {KnobKind::ExtraFenceLoop, 3}});
}

std::vector<TraceEvent> generate_resize_crash_scenario() {
  SimHeap heap;
  TraceEmitter out;
  out.region(heap.base(), heap.capacity(), true);
  LevelTable table = LevelTable::create(std::move(heap), out, 2, {});
  table.movement_enabled = false;
  std::mt19937_64 rng(11);
  for (int guard = 0; guard < 100000; ++guard) {
    std::uint64_t k;
    do {
      k = rng();
    } while (table.lookup(k));
    bool all_full = true;
    for (const auto& ref : table.candidates(k)) all_full = all_full && table.bucket_full(ref);
    if (all_full) {
      // This insert triggers the resize; rehash persists are dropped and a
      // crash marker lands between the header flush and its fence.
      table.set_knob({KnobKind::MissingFenceTokenValue, 0});
      table.mark_crash_in_resize = true;
      table.insert(k, rng(), out);
      return out.take();
    }
    if (table.insert(k, rng(), out) != InsertStatus::Ok)
      throw std::runtime_error("scenario insert failed");
  }
  throw std::runtime_error("resize trigger never reached");
}

std::vector<std::size_t> crash_marker_indices(std::span<const TraceEvent> events) {
  std::vector<std::size_t> out;
  for (const TraceEvent& e : events)
    if (e.kind == EventKind::Crash) out.push_back(e.index);
  return out;
}

namespace {

struct ShadowHeap {
  std::map<std::uint64_t, LineBytes> lines;

  std::uint8_t read_byte(std::uint64_t addr) const {
    auto it = lines.find(line_of(addr));
    return it == lines.end() ? 0 : it->second[addr - line_of(addr)];
  }
  std::uint64_t read_u64(std::uint64_t addr) const {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = v << 8 | read_byte(addr + static_cast<std::uint64_t>(i));
    return v;
  }
  void write(std::uint64_t addr, std::span<const std::uint8_t> bytes) {
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      std::uint64_t a = addr + i;
      auto [it, fresh] = lines.try_emplace(line_of(a));
      (void)fresh;
      it->second[a - line_of(a)] = bytes[i];
    }
  }
};

struct HeaderMirror {
  bool valid = false;
  std::uint64_t topn = 0, botn = 0;
  std::uint64_t top_slots = 0, top_tokens = 0, bottom_slots = 0, bottom_tokens = 0;

  void refresh(const ShadowHeap& shadow, std::uint64_t header_addr) {
    valid = false;
    if (shadow.read_u64(header_addr) != LevelTable::kMagic) return;
    std::uint64_t exponent = shadow.read_u64(header_addr + 8);
    if (exponent < 1 || exponent > 32) return;
    topn = std::uint64_t{1} << exponent;
    botn = topn / 2;
    top_slots = shadow.read_u64(header_addr + 16);
    top_tokens = shadow.read_u64(header_addr + 24);
    bottom_slots = shadow.read_u64(header_addr + 32);
    bottom_tokens = shadow.read_u64(header_addr + 40);
    valid = top_slots && top_tokens && bottom_slots && bottom_tokens;
  }

  // (level, bucket) when addr is a live token byte
  std::optional<std::pair<int, std::uint64_t>> token_at(std::uint64_t addr) const {
    if (!valid) return std::nullopt;
    if (addr >= top_tokens && addr < top_tokens + topn) return std::make_pair(0, addr - top_tokens);
    if (addr >= bottom_tokens && addr < bottom_tokens + botn)
      return std::make_pair(1, addr - bottom_tokens);
    return std::nullopt;
  }

  std::uint64_t slot_key(const ShadowHeap& shadow, int level, std::uint64_t bucket,
                         int slot) const {
    std::uint64_t base = level == 0 ? top_slots : bottom_slots;
    return shadow.read_u64(base + bucket * LevelTable::kBucketBytes +
                           static_cast<std::uint64_t>(slot) * LevelTable::kSlotBytes);
  }
};

}  // namespace

ExpectedKeys derive_expected_keys(std::span<const TraceEvent> events, std::size_t crash_event,
                                  std::uint64_t header_addr) {
  ShadowHeap shadow;
  MachineState pm;
  HeaderMirror hdr;
  std::map<std::uint64_t, std::uint8_t> durable_tok;
  struct KeyOps {
    int last_issued = 0;   // 1 = set, 2 = clear
    int last_durable = 0;  // 1 = set, 2 = clear
  };
  std::map<std::uint64_t, KeyOps> keys;

  for (std::size_t i = 0; i < crash_event && i < events.size(); ++i) {
    const TraceEvent& e = events[i];
    if (e.kind == EventKind::Store) {
      for (std::size_t off = 0; off < e.value.size(); ++off) {
        std::uint64_t a = e.addr + off;
        auto ti = hdr.token_at(a);
        if (!ti) continue;
        std::uint8_t oldb = shadow.read_byte(a);
        std::uint8_t newb = e.value[off];
        for (int s = 0; s < 4; ++s) {
          bool was = oldb >> s & 1, now = newb >> s & 1;
          if (was == now) continue;
          keys[hdr.slot_key(shadow, ti->first, ti->second, s)].last_issued = now ? 1 : 2;
        }
      }
      shadow.write(e.addr, e.value);
      if (line_of(e.addr) == line_of(header_addr)) hdr.refresh(shadow, header_addr);
      apply_event(pm, e);
    } else if (e.kind == EventKind::Fence) {
      std::set<std::uint64_t> drained = pm.pending;
      apply_event(pm, e);
      for (std::uint64_t lb : drained) {
        const LineBytes& persisted = pm.lines.at(lb).persisted_content;
        for (std::uint64_t a = lb; a < lb + kCacheLineSize; ++a) {
          auto ti = hdr.token_at(a);
          if (!ti) continue;
          auto it = durable_tok.find(a);
          std::uint8_t oldb = it == durable_tok.end() ? 0 : it->second;
          std::uint8_t newb = persisted[a - lb];
          if (oldb == newb) continue;
          for (int s = 0; s < 4; ++s) {
            bool was = oldb >> s & 1, now = newb >> s & 1;
            if (was == now) continue;
            keys[hdr.slot_key(shadow, ti->first, ti->second, s)].last_durable = now ? 1 : 2;
          }
          durable_tok[a] = newb;
        }
      }
    } else {
      apply_event(pm, e);
    }
  }

  ExpectedKeys out;
  for (const auto& [key, ops] : keys)
    if (ops.last_durable == 1 && ops.last_issued == 1) out.must_present.insert(key);
  return out;
}

Verdict check_recovery(const CrashImage& image, std::uint64_t header_addr,
                       const ExpectedKeys& expected) {
  const std::uint64_t magic = image.read_u64(header_addr);
  const std::uint64_t exponent = image.read_u64(header_addr + 8);
  const std::uint64_t ts = image.read_u64(header_addr + 16);
  const std::uint64_t tt = image.read_u64(header_addr + 24);
  const std::uint64_t bs = image.read_u64(header_addr + 32);
  const std::uint64_t bt = image.read_u64(header_addr + 40);
  const std::uint64_t seed1 = image.read_u64(header_addr + 48);
  const std::uint64_t seed2 = image.read_u64(header_addr + 56);

  if (magic == 0 && exponent == 0 && ts == 0 && tt == 0 && bs == 0 && bt == 0) {
    // Pre-initialization image: an empty table.
    return expected.must_present.empty() ? Verdict::ok() : Verdict::violation("LostKV");
  }
  if (magic != LevelTable::kMagic) return Verdict::violation("CorruptLayout");
  if (exponent < 1 || exponent > 32) return Verdict::violation("CorruptLayout");
  if (!ts || !tt || !bs || !bt) return Verdict::violation("CorruptLayout");

  const std::uint64_t topn = std::uint64_t{1} << exponent;
  std::map<std::uint64_t, int> found;
  for (int level = 0; level < 2; ++level) {
    const std::uint64_t n = level == 0 ? topn : topn / 2;
    const std::uint64_t slots = level == 0 ? ts : bs;
    const std::uint64_t tokens = level == 0 ? tt : bt;
    for (std::uint64_t b = 0; b < n; ++b) {
      const std::uint8_t tok = image.read_byte(tokens + b);
      for (int s = 0; s < 4; ++s) {
        if (!(tok >> s & 1)) continue;
        const std::uint64_t key = image.read_u64(slots + b * LevelTable::kBucketBytes +
                                                 static_cast<std::uint64_t>(s) *
                                                     LevelTable::kSlotBytes);
        if (mix64(key ^ seed1) % n != b && mix64(key ^ seed2) % n != b)
          return Verdict::violation("GarbageSlot");
        if (++found[key] > 1) return Verdict::violation("DuplicateKV");
      }
    }
  }
  for (std::uint64_t key : expected.must_present)
    if (!found.count(key)) return Verdict::violation("LostKV");
  return Verdict::ok();
}

RecoveryChecker make_levelhash_checker(std::span<const TraceEvent> events,
                                       std::size_t crash_event, std::uint64_t header_addr) {
  auto expected = derive_expected_keys(events, crash_event, header_addr);
  return [expected = std::move(expected), header_addr](const CrashImage& image) {
    return check_recovery(image, header_addr, expected);
  };
}

}  // namespace pmtrace
