#include "pmtrace/trace.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace pmtrace {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr const char* kKindNames[] = {"store", "flush",         "fence",
                                      "region", "volatile_hint", "crash"};
constexpr const char* kFlushNames[] = {"clwb", "clflushopt", "clflush"};

int hex_nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

const char* to_string(EventKind kind) { return kKindNames[static_cast<int>(kind)]; }
const char* to_string(FlushKind kind) { return kFlushNames[static_cast<int>(kind)]; }

std::string hex_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

std::vector<std::uint8_t> hex_decode(const std::string& text) {
  if (text.size() % 2 != 0) throw std::invalid_argument("odd-length hex string");
  std::vector<std::uint8_t> out(text.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = hex_nibble(text[2 * i]);
    int lo = hex_nibble(text[2 * i + 1]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("non-hex character in value");
    out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return out;
}

const RegionRange* RegionTable::find(std::uint64_t addr) const {
  auto it = std::upper_bound(ranges.begin(), ranges.end(), addr,
                             [](std::uint64_t a, const RegionRange& r) { return a < r.base; });
  if (it == ranges.begin()) return nullptr;
  --it;
  return it->contains(addr) ? &*it : nullptr;
}

bool RegionTable::persistent_overlap(std::uint64_t addr, std::uint64_t len) const {
  for (const auto& r : ranges) {
    if (r.persistent && r.overlaps(addr, len)) return true;
  }
  return false;
}

bool RegionTable::volatile_hinted(std::uint64_t addr, std::uint64_t len) const {
  for (const auto& [base, size] : volatile_hints) {
    if (addr < base + size && base < addr + len) return true;
  }
  return false;
}

namespace {

struct TouchedRange {
  std::uint64_t lo, len;
};

void require_keys(const json& j, std::initializer_list<const char*> required,
                  std::initializer_list<const char*> optional, std::size_t line) {
  for (const char* k : required) {
    if (!j.contains(k))
      throw ParseError(line, std::string("missing key '") + k + "' for kind '" +
                                 j.value("kind", "?") + "'");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    auto in = [&](std::initializer_list<const char*> set) {
      return std::any_of(set.begin(), set.end(), [&](const char* s) { return k == s; });
    };
    if (!in(required) && !in(optional)) throw ParseError(line, "unknown key '" + k + "'");
  }
}

std::uint64_t get_u64(const json& j, const char* key, std::size_t line) {
  const auto& v = j.at(key);
  if (!v.is_number_unsigned())
    throw ParseError(line, std::string("key '") + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

TraceEvent parse_record(const json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "record is not a JSON object");
  if (!j.contains("kind") || !j.at("kind").is_string())
    throw ParseError(line, "missing string key 'kind'");
  const std::string kind = j.at("kind").get<std::string>();

  TraceEvent e;
  if (kind == "store") {
    require_keys(j, {"kind", "addr", "size", "value", "site"}, {"tid"}, line);
    e.kind = EventKind::Store;
    e.addr = get_u64(j, "addr", line);
    e.size = get_u64(j, "size", line);
    if (e.size == 0) throw ParseError(line, "store size must be positive");
    if (e.size <= 8) {
      if (e.size != 1 && e.size != 2 && e.size != 4 && e.size != 8)
        throw ParseError(line, "store size <= 8 must be 1, 2, 4 or 8");
      if (line_of(e.addr) != line_of(e.addr + e.size - 1))
        throw ParseError(line, "store of size <= 8 must not straddle a cache line");
    }
    const auto& v = j.at("value");
    if (!v.is_string()) throw ParseError(line, "store value must be a hex string");
    try {
      e.value = hex_decode(v.get<std::string>());
    } catch (const std::invalid_argument& ex) {
      throw ParseError(line, ex.what());
    }
    if (e.value.size() != e.size)
      throw ParseError(line, "value must be exactly 2*size hex characters");
    e.site = j.at("site").get<std::string>();
    if (j.contains("tid")) e.tid = j.at("tid").get<int>();
  } else if (kind == "flush") {
    require_keys(j, {"kind", "addr", "flush_kind", "site"}, {}, line);
    e.kind = EventKind::Flush;
    e.addr = get_u64(j, "addr", line);
    const std::string fk = j.at("flush_kind").get<std::string>();
    if (fk == "clwb")
      e.flush_kind = FlushKind::Clwb;
    else if (fk == "clflushopt")
      e.flush_kind = FlushKind::Clflushopt;
    else if (fk == "clflush")
      e.flush_kind = FlushKind::Clflush;
    else
      throw ParseError(line, "unknown flush_kind '" + fk + "'");
    e.site = j.at("site").get<std::string>();
  } else if (kind == "fence") {
    require_keys(j, {"kind", "site"}, {}, line);
    e.kind = EventKind::Fence;
    e.site = j.at("site").get<std::string>();
  } else if (kind == "region") {
    require_keys(j, {"kind", "addr", "size", "persistent"}, {}, line);
    e.kind = EventKind::Region;
    e.addr = get_u64(j, "addr", line);
    e.size = get_u64(j, "size", line);
    if (e.size == 0) throw ParseError(line, "region size must be positive");
    if (!j.at("persistent").is_boolean())
      throw ParseError(line, "key 'persistent' must be a boolean");
    e.persistent = j.at("persistent").get<bool>();
  } else if (kind == "volatile_hint") {
    require_keys(j, {"kind", "addr", "size"}, {}, line);
    e.kind = EventKind::VolatileHint;
    e.addr = get_u64(j, "addr", line);
    e.size = get_u64(j, "size", line);
    if (e.size == 0) throw ParseError(line, "volatile_hint size must be positive");
  } else if (kind == "crash") {
    require_keys(j, {"kind"}, {}, line);
    e.kind = EventKind::Crash;
  } else {
    throw ParseError(line, "unknown kind '" + kind + "'");
  }
  return e;
}

}  // namespace

ParsedTrace normalize_trace(std::vector<TraceEvent> raw,
                            const std::vector<std::size_t>* source_lines) {
  ParsedTrace out;
  std::vector<TouchedRange> touched;
  auto src_line = [&](std::size_t i) {
    return source_lines && i < source_lines->size() ? (*source_lines)[i] : i + 1;
  };

  for (std::size_t i = 0; i < raw.size(); ++i) {
    TraceEvent& e = raw[i];
    switch (e.kind) {
      case EventKind::Region: {
        for (const auto& r : out.regions.ranges) {
          if (r.overlaps(e.addr, e.size))
            throw ParseError(src_line(i), "region overlaps an earlier region declaration");
        }
        for (const auto& t : touched) {
          if (e.addr < t.lo + t.len && t.lo < e.addr + e.size)
            throw ParseError(src_line(i),
                             "region declared after a store/flush already touched its range");
        }
        out.regions.ranges.push_back({e.addr, e.size, e.persistent});
        break;
      }
      case EventKind::VolatileHint:
        out.regions.volatile_hints.emplace_back(e.addr, e.size);
        break;
      case EventKind::Store:
        touched.push_back({e.addr, e.size});
        break;
      case EventKind::Flush:
        touched.push_back({line_of(e.addr), kCacheLineSize});
        break;
      default:
        break;
    }

    if (e.kind == EventKind::Store && line_of(e.addr) != line_of(e.addr + e.size - 1)) {
      // Split a multi-line store into line-aligned sub-stores sharing the site.
      std::uint64_t offset = 0;
      while (offset < e.size) {
        std::uint64_t addr = e.addr + offset;
        std::uint64_t chunk = std::min(e.size - offset, line_of(addr) + kCacheLineSize - addr);
        TraceEvent part = e;
        part.addr = addr;
        part.size = chunk;
        part.value.assign(e.value.begin() + static_cast<std::ptrdiff_t>(offset),
                          e.value.begin() + static_cast<std::ptrdiff_t>(offset + chunk));
        part.index = out.events.size();
        out.events.push_back(std::move(part));
        offset += chunk;
      }
    } else {
      e.index = out.events.size();
      out.events.push_back(std::move(e));
    }
  }

  std::sort(out.regions.ranges.begin(), out.regions.ranges.end(),
            [](const RegionRange& a, const RegionRange& b) { return a.base < b.base; });
  return out;
}

ParsedTrace parse_trace(std::istream& in) {
  std::vector<TraceEvent> events;
  std::vector<std::size_t> lines;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw ParseError(lineno, "malformed JSON record");
    }
    events.push_back(parse_record(j, lineno));
    lines.push_back(lineno);
  }
  return normalize_trace(std::move(events), &lines);
}

ParsedTrace parse_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  return parse_trace(in);
}

void write_trace(std::ostream& out, const std::vector<TraceEvent>& events) {
  for (const TraceEvent& e : events) {
    ordered_json j;
    j["kind"] = to_string(e.kind);
    switch (e.kind) {
      case EventKind::Store:
        j["addr"] = e.addr;
        j["size"] = e.size;
        j["value"] = hex_encode(e.value);
        j["site"] = e.site;
        if (e.tid != 0) j["tid"] = e.tid;
        break;
      case EventKind::Flush:
        j["addr"] = e.addr;
        j["flush_kind"] = to_string(e.flush_kind);
        j["site"] = e.site;
        break;
      case EventKind::Fence:
        j["site"] = e.site;
        break;
      case EventKind::Region:
        j["addr"] = e.addr;
        j["size"] = e.size;
        j["persistent"] = e.persistent;
        break;
      case EventKind::VolatileHint:
        j["addr"] = e.addr;
        j["size"] = e.size;
        break;
      case EventKind::Crash:
        break;
    }
    out << j.dump() << '\n';
  }
}

void write_trace_file(const std::string& path, const std::vector<TraceEvent>& events) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  write_trace(out, events);
}

}  // namespace pmtrace
