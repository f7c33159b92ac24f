#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "tempdir.hpp"
#include "pcpe/corpus.hpp"
#include "pcpe/io_util.hpp"

using namespace pcpe;
using pcpe::testing::TempDir;

namespace {

std::vector<std::vector<std::string>> streams(std::initializer_list<const char*> texts) {
  std::vector<std::vector<std::string>> out;
  for (const char* t : texts) out.push_back(split_words(t));
  return out;
}

RawDialogue text_dialogue(std::string id) {
  RawDialogue d;
  d.id = std::move(id);
  d.text_personas = {"your persona: i like cats.", "partner's persona: i ride bikes."};
  d.history = {"hello there", "hi, how are you?"};
  d.query = "what do you like?";
  d.candidates = {"i love cats", "bikes are fun", "no idea"};
  d.true_index = 0;
  return d;
}

}  // namespace

TEST_CASE("vocab examples") {
  auto v1 = Vocab::build(streams({"a a b"}), 2);
  CHECK(v1.size() == 4);
  CHECK(v1.id("a") == 3);
  CHECK(v1.id("b") == Vocab::kUnk);

  auto v2 = Vocab::build(streams({"x"}), 2);
  CHECK(v2.size() == 3);
  CHECK(v2.token(0) == "<pad>");

  auto v3 = Vocab::build(streams({"b a a b c"}), 1);
  CHECK(v3.id("a") == 3);
  CHECK(v3.id("b") == 4);
  CHECK(v3.id("c") == 5);

  CHECK_THROWS_AS(Vocab::build({}, 1), InputError);
}

TEST_CASE("vocab file round trip") {
  TempDir dir;
  auto v = Vocab::build(streams({"b a a b c", "zeta"}), 1);
  v.save(dir / "v.txt");
  CHECK(Vocab::load(dir / "v.txt") == v);
  CHECK(read_file(dir / "v.txt") == "a\nb\nc\nzeta\n");
}

TEST_CASE("tokenize examples") {
  auto v = Vocab::build(streams({"hello world one two three four five six seven eight nine ten"}), 1);
  auto ids = tokenize("Hello, WORLD", v, 16);
  CHECK(ids == TokenIds{v.id("hello"), v.id(","), v.id("world")});
  CHECK(tokenize("qq rr", v, 8) == TokenIds{Vocab::kUnk, Vocab::kUnk});
  auto tail = tokenize("one two three four five six seven eight nine ten", v, 4);
  CHECK(tail == TokenIds{v.id("seven"), v.id("eight"), v.id("nine"), v.id("ten")});
  auto head = tokenize("one two three four five", v, 2, Truncate::KeepHead);
  CHECK(head == TokenIds{v.id("one"), v.id("two")});
  CHECK(tokenize("", v, 4).empty());
  CHECK_THROWS_AS(tokenize("one", v, 0), InputError);
}

TEST_CASE("load_dialogues: empty file, bad index, missing field, round trip") {
  TempDir dir;
  std::ofstream(dir / "empty.jsonl").close();
  Vocabularies vocabs{Vocab::build(streams({"x"}), 1), std::nullopt};
  CHECK(load_dialogues(dir / "empty.jsonl", vocabs, {}).empty());

  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"id":"a","personas":[],"history":[],"query":"q","candidates":["x"],"true_index":1})" << '\n';
  }
  CHECK_THROWS_AS(read_raw_dialogues(dir / "bad.jsonl"), DataError);

  {
    std::ofstream f(dir / "missing.jsonl");
    f << '\n' << R"({"id":"a","personas":[],"history":[],"candidates":["x"],"true_index":0})" << '\n';
  }
  try {
    read_raw_dialogues(dir / "missing.jsonl");
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("query") != std::string::npos);
  }

  std::vector<RawDialogue> ds = {text_dialogue("d1"), text_dialogue("d2"), text_dialogue("d3")};
  ds[1].true_index = 2;
  write_dialogues(dir / "three.jsonl", ds);
  CHECK(read_raw_dialogues(dir / "three.jsonl") == ds);
}

TEST_CASE("kv dialogues round trip, including numeric values") {
  TempDir dir;
  RawDialogue d = text_dialogue("kv");
  d.schema = PersonaSchema::Kv;
  d.text_personas.clear();
  d.kv_personas = {{"age", "31", true, "0", false}, {"city", "oslo", false, "1", false},
                   {"age", "58", true, "1", false}};
  write_dialogues(dir / "kv.jsonl", std::vector<RawDialogue>{d});
  CHECK(read_raw_dialogues(dir / "kv.jsonl").front() == d);
}

TEST_CASE("history and query are joined, SEP-separated and tail-truncated") {
  std::vector<RawDialogue> raw = {text_dialogue("a")};
  auto vocabs = build_vocabularies(raw, PersonaSchema::Text, 1);
  EncodeOptions opts;
  opts.limits.l_q = 32;
  Dialogue d = encode_dialogue(raw[0], vocabs, opts);
  auto expected = tokenize("hello there", vocabs.words, 32);
  expected.push_back(Vocab::kSep);
  for (auto t : tokenize("hi, how are you?", vocabs.words, 32)) expected.push_back(t);
  expected.push_back(Vocab::kSep);
  for (auto t : tokenize("what do you like?", vocabs.words, 32)) expected.push_back(t);
  CHECK(d.context == expected);
  CHECK(d.personas.size() == 2);
  CHECK(d.personas[0].segment == 0);
  CHECK(d.personas[1].segment == 1);

  opts.limits.l_q = 5;
  Dialogue short_d = encode_dialogue(raw[0], vocabs, opts);
  CHECK(short_d.context == TokenIds(expected.end() - 5, expected.end()));
}

TEST_CASE("kv values: numeric keys are bucketized into 8 quantiles") {
  std::vector<RawDialogue> raw;
  for (int i = 0; i < 16; ++i) {
    RawDialogue d = text_dialogue("n" + std::to_string(i));
    d.schema = PersonaSchema::Kv;
    d.text_personas.clear();
    d.kv_personas = {{"age", std::to_string(10 + i), true, "0", false}, {"pet", "cat", false, "0", false}};
    raw.push_back(d);
  }
  auto av = AttributeVocab::build(raw);
  CHECK(av.value_token("age", "10") == "age#b0");
  CHECK(av.value_token("age", "25") == "age#b7");
  CHECK(av.value_token("age", "-100") == "age#b0");
  CHECK(av.value_token("pet", "cat") == "cat");
  std::set<std::string> buckets;
  for (int i = 0; i < 16; ++i) buckets.insert(av.value_token("age", std::to_string(10 + i)));
  CHECK(buckets.size() == 8);
}

TEST_CASE("flattening follows the 'k1 : v1 , k2 : v2' form") {
  std::vector<RawKv> kv = {{"age", "31", true, "0", false}, {"city", "oslo", false, "0", false}};
  CHECK(flatten_kv(kv) == "age : 31 , city : oslo");
}

TEST_CASE("make_batches examples") {
  std::vector<RawDialogue> raw;
  for (int i = 0; i < 5; ++i) raw.push_back(text_dialogue("b" + std::to_string(i)));
  auto vocabs = build_vocabularies(raw, PersonaSchema::Text, 1);
  auto ds = encode_dialogues(raw, vocabs, {});

  auto two = make_batches(std::span(ds).first(2), 2, 1, BatchMode::Train);
  REQUIRE(two.size() == 1);
  CHECK(two[0].candidates.n == 2);
  CHECK(two[0].labels == std::vector<std::size_t>{0, 1});
  CHECK(two[0].pooled);

  auto train = make_batches(ds, 2, 1, BatchMode::Train);
  CHECK(train.size() == 2);
  auto eval = make_batches(ds, 2, 1, BatchMode::Eval);
  REQUIRE(eval.size() == 3);
  CHECK(eval[2].rows.size() == 1);
  CHECK_FALSE(eval[0].pooled);
  CHECK(eval[0].candidates.n == 6);
  CHECK(eval[0].candidate_offsets == std::vector<std::size_t>{0, 3, 6});

  CHECK_THROWS_AS(make_batches(ds, 1, 1, BatchMode::Train), ConfigError);

  // Padding carries PAD ids and a zero mask.
  const auto& c = train[0].contexts;
  for (std::size_t i = 0; i < c.n; ++i) {
    for (std::size_t t = c.lengths[i]; t < c.len; ++t) {
      CHECK(c.ids[i * c.len + t] == Vocab::kPad);
      CHECK(c.mask[i * c.len + t] == 0);
    }
  }
}

TEST_CASE("synthetic corpus: shape, determinism and oracle ceiling") {
  SynthSpec spec;
  spec.n_dialogues = 50;
  spec.n_valid = 600;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  CHECK(a.train == b.train);
  CHECK(a.valid == b.valid);
  CHECK(a.train.front().id == "train-000000");
  CHECK(a.valid.back().id == "valid-000599");
  for (const auto& d : a.valid) {
    CHECK(d.candidates.size() == 20);
    CHECK(d.kv_personas.size() == 2 * spec.n_attributes);
  }
  for (const auto& d : a.train) CHECK(d.candidates.size() == 1);

  const double n = static_cast<double>(a.valid.size());
  const double hr1 = pcpe::testing::rule_based_hr1(a.valid);
  CHECK(std::abs(hr1 - spec.signal_strength) <= 2.0 / std::sqrt(n));

  spec.signal_strength = 1.0;
  CHECK(pcpe::testing::rule_based_hr1(generate_synthetic(spec).valid) == 1.0);

  spec.signal_strength = 0.0;
  const double chance = pcpe::testing::rule_based_hr1(generate_synthetic(spec).valid);
  CHECK(std::abs(chance - 0.05) <= 3.0 * std::sqrt(0.05 * 0.95 / n));
}

TEST_CASE("synthetic files round trip through load_dialogues") {
  TempDir dir;
  SynthSpec spec;
  spec.n_dialogues = 20;
  spec.n_valid = 5;
  auto corpus = generate_synthetic(spec);
  write_dialogues(dir / "t.jsonl", corpus.train);
  CHECK(read_raw_dialogues(dir / "t.jsonl") == corpus.train);
  auto vocabs = build_vocabularies(corpus.train, PersonaSchema::Kv, 1);
  write_dialogues(dir / "v.jsonl", corpus.valid);
  auto ds = load_dialogues(dir / "v.jsonl", vocabs, {PersonaSchema::Kv, PersonaRouting::Structured, {}});
  CHECK(ds.size() == 5);
  CHECK(ds[0].personas.size() == 2);
  CHECK(ds[0].personas[0].kv.size() == spec.n_attributes);
}
