#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "replaytune/replay.hpp"
#include "replaytune/rng.hpp"

using namespace replaytune;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

ReplayFileHeader test_header(int vocab = 16) {
  ReplayFileHeader h;
  h.vocab_size = vocab;
  h.tau = 0.9;
  h.k_max = 8;
  h.position_strategy = PositionStrategyKind::all;
  h.model_fingerprint = 0xDEADBEEFCAFEF00DULL;
  return h;
}

}  // namespace

TEST_CASE("empty replay file round-trips header only") {
  auto path = temp_path("rt_replay_empty.jsonl");
  CHECK(write_records(path, test_header(), {}) == 0);
  auto [header, records] = read_records(path);
  CHECK(records.empty());
  CHECK(header.vocab_size == 16);
  CHECK(header.model_fingerprint == 0xDEADBEEFCAFEF00DULL);
  auto stats = summarize(path);
  CHECK(stats.record_count == 0);
  CHECK(stats.set_size_histogram.empty());
  std::remove(path.c_str());
}

TEST_CASE("single record round-trips identically") {
  auto path = temp_path("rt_replay_one.jsonl");
  ReplayRecord r;
  r.seq_id = 0;
  r.pos = 3;
  r.gold_id = 7;
  r.candidates = {7, 2, 9};
  write_records(path, test_header(), {r});
  auto [header, records] = read_records(path);
  REQUIRE(records.size() == 1);
  CHECK(records[0].seq_id == 0);
  CHECK(records[0].pos == 3);
  CHECK(records[0].gold_id == 7);
  CHECK(records[0].candidates == std::vector<TokenId>{7, 2, 9});
  CHECK(!records[0].logits.has_value());
  std::remove(path.c_str());
}

TEST_CASE("wire format is byte-exact") {
  auto path = temp_path("rt_replay_wire.jsonl");
  ReplayRecord r;
  r.seq_id = 5;
  r.pos = 11;
  r.gold_id = 3;
  r.candidates = {3, 1};
  r.logits = std::vector<float>{1.5f, -0.25f};
  write_records(path, test_header(), {r});

  std::ifstream in(path, std::ios::binary);
  std::string line1, line2;
  std::getline(in, line1);
  std::getline(in, line2);
  CHECK(line1 ==
        "{\"format_version\":1,\"vocab_size\":16,\"tau\":0.9,\"k_max\":8,"
        "\"position_strategy\":\"all\",\"model_fingerprint\":16045690984503111693}");
  CHECK(line2 == "{\"s\":5,\"t\":11,\"g\":3,\"c\":[3,1],\"z\":[1.5,-0.25]}");
  std::remove(path.c_str());
}

TEST_CASE("write -> read is the identity on a large random stream") {
  auto path = temp_path("rt_replay_many.jsonl");
  Rng rng(404);
  std::vector<ReplayRecord> records;
  for (int i = 0; i < 10000; ++i) {
    ReplayRecord r;
    r.seq_id = rng.next_below(500);
    r.pos = static_cast<uint32_t>(rng.next_below(64));
    size_t k = 1 + rng.next_below(12);
    std::vector<TokenId> pool(16);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    r.candidates.assign(pool.begin(), pool.begin() + static_cast<long>(k));
    r.gold_id = r.candidates[rng.next_below(k)];
    if (rng.next_below(2) == 0) {
      std::vector<float> z;
      for (size_t j = 0; j < k; ++j) z.push_back(static_cast<float>(rng.normal()));
      r.logits = std::move(z);
    }
    records.push_back(std::move(r));
  }
  CHECK(write_records(path, test_header(), records) == records.size());
  auto [header, back] = read_records(path);
  REQUIRE(back.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].seq_id == records[i].seq_id);
    CHECK(back[i].pos == records[i].pos);
    CHECK(back[i].gold_id == records[i].gold_id);
    CHECK(back[i].candidates == records[i].candidates);
    CHECK(back[i].logits == records[i].logits);  // float32 exact round-trip
  }
  std::remove(path.c_str());
}

TEST_CASE("write rejects invalid records and names the index") {
  auto path = temp_path("rt_replay_invalid.jsonl");
  ReplayRecord good;
  good.gold_id = 1;
  good.candidates = {1, 2};
  ReplayRecord bad;
  bad.gold_id = 5;
  bad.candidates = {1, 2};  // gold missing
  try {
    write_records(path, test_header(), {good, bad});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("record 1") != std::string::npos);
  }

  ReplayRecord dup;
  dup.gold_id = 1;
  dup.candidates = {1, 1};
  CHECK_THROWS_AS(write_records(path, test_header(), {dup}), ValidationError);

  ReplayRecord bad_logits;
  bad_logits.gold_id = 1;
  bad_logits.candidates = {1, 2};
  bad_logits.logits = std::vector<float>{0.5f};
  CHECK_THROWS_AS(write_records(path, test_header(), {bad_logits}), ValidationError);
}

TEST_CASE("reader rejects malformed and corrupted files with line numbers") {
  auto path = temp_path("rt_replay_corrupt.jsonl");

  SUBCASE("gold missing from candidates") {
    std::ofstream out(path);
    out << detail::header_line(test_header()) << "\n";
    out << "{\"s\":0,\"t\":8,\"g\":9,\"c\":[1,2]}\n";
    out.close();
    ReplayReader reader(path);
    CHECK_THROWS_AS(reader.next(), ValidationError);
  }
  SUBCASE("broken json names the line") {
    std::ofstream out(path);
    out << detail::header_line(test_header()) << "\n";
    out << "{\"s\":0,\"t\":8\n";
    out.close();
    ReplayReader reader(path);
    try {
      reader.next();
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("unknown keys are rejected") {
    std::ofstream out(path);
    out << detail::header_line(test_header()) << "\n";
    out << "{\"s\":0,\"t\":8,\"g\":1,\"c\":[1],\"extra\":1}\n";
    out.close();
    ReplayReader reader(path);
    CHECK_THROWS_AS(reader.next(), ParseError);
  }
  SUBCASE("bad header version") {
    std::ofstream out(path);
    out << "{\"format_version\":2,\"vocab_size\":16,\"tau\":0.9,\"k_max\":8,"
           "\"position_strategy\":\"all\",\"model_fingerprint\":1}\n";
    out.close();
    CHECK_THROWS_AS(ReplayReader{path}, ValidationError);
  }
  std::remove(path.c_str());
}

TEST_CASE("summarize computes the histogram and median of set sizes") {
  auto path = temp_path("rt_replay_stats.jsonl");
  Rng rng(31337);
  std::vector<ReplayRecord> records;
  std::map<int, uint64_t> want_hist;
  // constructed mixture of set sizes with a generator-side tally
  for (int i = 0; i < 900; ++i) {
    size_t k = 2 + rng.next_below(7);
    ReplayRecord r;
    r.seq_id = static_cast<uint64_t>(i);
    r.pos = 8;
    std::vector<TokenId> pool(16);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    r.candidates.assign(pool.begin(), pool.begin() + static_cast<long>(k));
    r.gold_id = r.candidates[0];
    records.push_back(std::move(r));
    ++want_hist[static_cast<int>(k)];
  }
  write_records(path, test_header(), records);
  auto stats = summarize(path);
  CHECK(stats.record_count == 900);
  CHECK(stats.set_size_histogram == want_hist);
  CHECK(!stats.mean_rho.has_value());  // not derivable from the file alone

  // median of a constant-size file
  std::vector<ReplayRecord> threes;
  for (int i = 0; i < 7; ++i) {
    ReplayRecord r;
    r.seq_id = static_cast<uint64_t>(i);
    r.pos = 8;
    r.gold_id = 0;
    r.candidates = {0, 4, 9};
    threes.push_back(r);
  }
  write_records(path, test_header(), threes);
  CHECK(summarize(path).median_set_size == 3.0);
  std::remove(path.c_str());
}
