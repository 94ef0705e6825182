#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "replaytune/errors.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

enum class PositionStrategyKind { all, random, last_token, bucket };

inline std::string strategy_name(PositionStrategyKind k) {
  switch (k) {
    case PositionStrategyKind::all: return "all";
    case PositionStrategyKind::random: return "random";
    case PositionStrategyKind::last_token: return "last_token";
    case PositionStrategyKind::bucket: return "bucket";
  }
  throw ConfigError("bad strategy kind");
}

inline PositionStrategyKind strategy_from_name(const std::string& s) {
  if (s == "all") return PositionStrategyKind::all;
  if (s == "random") return PositionStrategyKind::random;
  if (s == "last_token" || s == "last") return PositionStrategyKind::last_token;
  if (s == "bucket") return PositionStrategyKind::bucket;
  throw ConfigError("unknown position strategy: " + s);
}

// One Stage-0 supervision unit: where in the corpus, which token was gold,
// and which candidate ids survive into the restricted loss. Stored logits
// are float32 and diagnostic-only; Stage 1 always recomputes logits from the
// live model.
struct ReplayRecord {
  uint64_t seq_id = 0;
  uint32_t pos = 0;
  TokenId gold_id = 0;
  std::vector<TokenId> candidates;  // selection order
  std::optional<std::vector<float>> logits;

  void validate(int vocab_size = -1) const {
    bool has_gold = false;
    std::vector<char> seen;
    if (vocab_size > 0) seen.assign(static_cast<size_t>(vocab_size), 0);
    for (TokenId id : candidates) {
      if (id < 0 || (vocab_size > 0 && id >= vocab_size))
        throw ValidationError("candidate id out of range");
      if (vocab_size > 0) {
        if (seen[static_cast<size_t>(id)]) throw ValidationError("duplicate candidate id");
        seen[static_cast<size_t>(id)] = 1;
      }
      has_gold = has_gold || id == gold_id;
    }
    if (vocab_size <= 0) {
      auto sorted = candidates;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ValidationError("duplicate candidate id");
    }
    if (!has_gold) throw ValidationError("gold token missing from candidates");
    if (logits && logits->size() != candidates.size())
      throw ValidationError("logits length does not match candidates");
  }
};

struct ReplayFileHeader {
  int format_version = 1;
  int vocab_size = 2;
  double tau = 0.98;
  int k_max = 200;
  PositionStrategyKind position_strategy = PositionStrategyKind::all;
  uint64_t model_fingerprint = 0;

  void validate() const {
    if (format_version != 1) throw ValidationError("unsupported replay format version");
    if (vocab_size < 2) throw ValidationError("replay header: vocab_size must be >= 2");
  }
};

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline void append_float(std::string& out, float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

// The wire format fixes key order, so records are serialized by hand rather
// than through a JSON object (which would re-order keys).
inline std::string record_line(const ReplayRecord& r) {
  std::string s = "{\"s\":";
  s += std::to_string(r.seq_id);
  s += ",\"t\":";
  s += std::to_string(r.pos);
  s += ",\"g\":";
  s += std::to_string(r.gold_id);
  s += ",\"c\":[";
  for (size_t i = 0; i < r.candidates.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(r.candidates[i]);
  }
  s += ']';
  if (r.logits) {
    s += ",\"z\":[";
    for (size_t i = 0; i < r.logits->size(); ++i) {
      if (i) s += ',';
      append_float(s, (*r.logits)[i]);
    }
    s += ']';
  }
  s += '}';
  return s;
}

inline std::string header_line(const ReplayFileHeader& h) {
  std::string s = "{\"format_version\":";
  s += std::to_string(h.format_version);
  s += ",\"vocab_size\":";
  s += std::to_string(h.vocab_size);
  s += ",\"tau\":";
  append_double(s, h.tau);
  s += ",\"k_max\":";
  s += std::to_string(h.k_max);
  s += ",\"position_strategy\":\"";
  s += strategy_name(h.position_strategy);
  s += "\",\"model_fingerprint\":";
  s += std::to_string(h.model_fingerprint);
  s += '}';
  return s;
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional, size_t line_no) {
  for (const char* k : required) {
    if (!j.contains(k))
      throw ParseError("line " + std::to_string(line_no) + ": missing key '" + k + "'");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : required) known = known || it.key() == k;
    for (const char* k : optional) known = known || it.key() == k;
    if (!known)
      throw ParseError("line " + std::to_string(line_no) + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

// Writes header + records as UTF-8 JSON lines. Single atomic write: the data
// lands in a temp file first and is renamed into place, so readers never see
// a partial file and appends are structurally impossible.
inline uint64_t write_records(const std::string& path, const ReplayFileHeader& header,
                              const std::vector<ReplayRecord>& records) {
  header.validate();
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write replay file: " + tmp);
    out << detail::header_line(header) << "\n";
    for (size_t i = 0; i < records.size(); ++i) {
      try {
        records[i].validate(header.vocab_size);
      } catch (const ValidationError& e) {
        throw ValidationError("record " + std::to_string(i) + ": " + e.what());
      }
      out << detail::record_line(records[i]) << "\n";
    }
    if (!out) throw IoError("short write on replay file: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move replay file into place: " + ec.message());
  return records.size();
}

// Streaming reader; validates every record as it is produced.
class ReplayReader {
 public:
  explicit ReplayReader(const std::string& path) : in_(path), path_(path) {
    if (!in_) throw IoError("cannot open replay file: " + path);
    std::string line;
    if (!std::getline(in_, line)) throw ParseError(path + ": empty replay file");
    ++line_no_;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + " line 1: " + e.what());
    }
    detail::check_keys(j,
                       {"format_version", "vocab_size", "tau", "k_max",
                        "position_strategy", "model_fingerprint"},
                       {}, 1);
    header_.format_version = j.at("format_version").get<int>();
    header_.vocab_size = j.at("vocab_size").get<int>();
    header_.tau = j.at("tau").get<double>();
    header_.k_max = j.at("k_max").get<int>();
    header_.position_strategy = strategy_from_name(j.at("position_strategy").get<std::string>());
    header_.model_fingerprint = j.at("model_fingerprint").get<uint64_t>();
    header_.validate();
  }

  const ReplayFileHeader& header() const { return header_; }

  std::optional<ReplayRecord> next() {
    std::string line;
    if (!std::getline(in_, line)) return std::nullopt;
    ++line_no_;
    if (line.empty()) throw ParseError(path_ + " line " + std::to_string(line_no_) + ": empty line");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path_ + " line " + std::to_string(line_no_) + ": " + e.what());
    }
    detail::check_keys(j, {"s", "t", "g", "c"}, {"z"}, line_no_);
    ReplayRecord r;
    try {
      r.seq_id = j.at("s").get<uint64_t>();
      r.pos = j.at("t").get<uint32_t>();
      r.gold_id = j.at("g").get<TokenId>();
      r.candidates = j.at("c").get<std::vector<TokenId>>();
      if (j.contains("z")) r.logits = j.at("z").get<std::vector<float>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path_ + " line " + std::to_string(line_no_) + ": " + e.what());
    }
    try {
      r.validate(header_.vocab_size);
    } catch (const ValidationError& e) {
      throw ValidationError(path_ + " line " + std::to_string(line_no_) + ": " + e.what());
    }
    return r;
  }

 private:
  std::ifstream in_;
  std::string path_;
  size_t line_no_ = 0;
  ReplayFileHeader header_;
};

inline std::pair<ReplayFileHeader, std::vector<ReplayRecord>> read_records(
    const std::string& path) {
  ReplayReader reader(path);
  std::vector<ReplayRecord> records;
  while (auto r = reader.next()) records.push_back(std::move(*r));
  return {reader.header(), std::move(records)};
}

// Aggregate statistics over a replay stream. mean_rho and gold_appended_rate
// are only known exactly at collection time (the file stores neither the
// outside mass nor the appended flag), so summarize() leaves them empty and
// the Stage-0 collector fills them in.
struct ReplayStats {
  uint64_t record_count = 0;
  std::map<int, uint64_t> set_size_histogram;
  double median_set_size = 0.0;
  double mean_set_size = 0.0;
  std::optional<double> mean_rho;
  std::optional<double> gold_appended_rate;
};

inline ReplayStats summarize(const std::string& path) {
  ReplayReader reader(path);
  ReplayStats stats;
  std::vector<int> sizes;
  uint64_t size_total = 0;
  while (auto r = reader.next()) {
    int sz = static_cast<int>(r->candidates.size());
    ++stats.record_count;
    ++stats.set_size_histogram[sz];
    sizes.push_back(sz);
    size_total += static_cast<uint64_t>(sz);
  }
  if (!sizes.empty()) {
    std::sort(sizes.begin(), sizes.end());
    size_t n = sizes.size();
    stats.median_set_size = (n % 2 == 1)
                                ? sizes[n / 2]
                                : 0.5 * (sizes[n / 2 - 1] + sizes[n / 2]);
    stats.mean_set_size = static_cast<double>(size_total) / static_cast<double>(n);
  }
  return stats;
}

}  // namespace replaytune
