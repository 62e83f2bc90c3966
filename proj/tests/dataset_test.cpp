#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "gran/dataset.hpp"

using gran::Fact;
using gran::RawFact;
using gran::Slot;
using gran::SlotKind;
using gran::Vocabulary;

namespace {

const char* kCurieLine =
    R"({"subject":"MarieCurie","relation":"award-received","object":"NobelPhysics",)"
    R"("aux":[["point-in-time","1903"],["together-with","PierreCurie"],["together-with","HenriBecquerel"]]})";

}  // namespace

TEST_CASE("parse_canonical reads a 5-ary fact") {
  std::istringstream is(kCurieLine);
  auto facts = gran::parse_canonical(is);
  REQUIRE(facts.size() == 1);
  const RawFact& f = facts[0];
  CHECK(f.subject == "MarieCurie");
  CHECK(f.relation == "award-received");
  CHECK(f.object == "NobelPhysics");
  REQUIRE(f.aux.size() == 3);
  CHECK(f.arity() == 5);
  CHECK(f.aux[0] == std::pair<std::string, std::string>{"point-in-time", "1903"});
  CHECK(f.aux[2].second == "HenriBecquerel");
}

TEST_CASE("parse_canonical binary fact, duplicates, and errors with line numbers") {
  std::istringstream is(
      "{\"subject\":\"a\",\"relation\":\"r\",\"object\":\"b\"}\n"
      "{\"subject\":\"a\",\"relation\":\"r\",\"object\":\"b\",\"aux\":[]}\n"
      "{\"subject\":\"a\",\"relation\":\"r\",\"object\":\"b\"}\n");
  auto facts = gran::parse_canonical(is);
  REQUIRE(facts.size() == 3);
  CHECK(facts[0].arity() == 2);
  CHECK(facts[0] == facts[1]);
  CHECK(facts[0] == facts[2]);  // dedup is not ingestion's job

  std::istringstream missing("{\"subject\":\"a\",\"object\":\"b\"}\n");
  try {
    gran::parse_canonical(missing);
    FAIL("expected parse error");
  } catch (const gran::input_error& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    CHECK(std::string(e.what()).find("relation") != std::string::npos);
  }

  std::istringstream empty_name(
      "{\"subject\":\"a\",\"relation\":\"r\",\"object\":\"b\"}\n"
      "{\"subject\":\"\",\"relation\":\"r\",\"object\":\"b\"}\n");
  try {
    gran::parse_canonical(empty_name);
    FAIL("expected parse error");
  } catch (const gran::input_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("canonical writer re-emits parsed input byte for byte") {
  std::istringstream is(kCurieLine);
  auto facts = gran::parse_canonical(is);
  std::ostringstream out1;
  gran::write_canonical(out1, facts);
  std::istringstream round(out1.str());
  std::ostringstream out2;
  gran::write_canonical(out2, gran::parse_canonical(round));
  CHECK(out1.str() == out2.str());
}

TEST_CASE("convert_jf17k maps positions to the primary triple plus aux pairs") {
  auto f = gran::convert_jf17k("music.group_membership",
                               {"Guitar", "DeanFertita", "QueensOfTheStoneAge"});
  CHECK(f.subject == "Guitar");
  CHECK(f.object == "DeanFertita");
  CHECK(f.relation == "music.group_membership");
  REQUIRE(f.aux.size() == 1);
  CHECK(f.aux[0].first == "music.group_membership#3");
  CHECK(f.aux[0].second == "QueensOfTheStoneAge");

  CHECK(gran::convert_jf17k("r", {"a", "b"}).aux.empty());
  auto six = gran::convert_jf17k("r", {"a", "b", "c", "d", "e", "f"});
  CHECK(six.aux.size() == 4);
  CHECK(six.arity() == 6);
  CHECK_THROWS_AS(gran::convert_jf17k("r", {"only"}), gran::input_error);
}

TEST_CASE("wikipeople conversion finds the primary triple and filters literals") {
  auto j = nlohmann::ordered_json::parse(
      R"({"P26_h":"Q517","P26_t":"Q230","P585":["1810-01-01"],"P1971":"Q42","N":4})");
  auto kept = gran::convert_wikipeople(j, false, 1);
  REQUIRE(kept.has_value());
  CHECK(kept->relation == "P26");
  CHECK(kept->subject == "Q517");
  CHECK(kept->object == "Q230");
  REQUIRE(kept->aux.size() == 2);
  CHECK(kept->aux[0] == std::pair<std::string, std::string>{"P585", "1810-01-01"});

  // the 1810 literal drops the whole statement under filtering
  CHECK_FALSE(gran::convert_wikipeople(j, true, 1).has_value());
  auto clean = nlohmann::ordered_json::parse(
      R"({"P26_h":"Q517","P26_t":"Q230","P1971":"Q42","N":3})");
  auto minus = gran::convert_wikipeople(clean, true, 1);
  REQUIRE(minus.has_value());
  CHECK(minus->aux.size() == 1);
}

TEST_CASE("build_vocab counts and id layout") {
  std::vector<RawFact> facts{{"s", "r", "o", {}}};
  auto vocab = gran::build_vocab({&facts});
  CHECK(vocab.n_entities() == 2);
  CHECK(vocab.n_relations() == 1);
  CHECK(vocab.vocab_size() == 5);  // plus [MASK] and [PAD]
  CHECK(vocab.relation_id("r") == 2);
  CHECK(vocab.entity_id("s") == 3);
  CHECK(vocab.entity_id("o") == 4);
  CHECK(vocab.name(Vocabulary::kMaskId) == "[MASK]");
  CHECK(vocab.name(Vocabulary::kPadId) == "[PAD]");
}

TEST_CASE("vocabulary ids are first-appearance ordered and stable across save/load") {
  std::vector<RawFact> train{
      {"b", "r2", "a", {{"attr", "c"}}},
      {"a", "r1", "c", {}},
  };
  std::vector<RawFact> test{{"z", "r1", "a", {}}};
  auto vocab = gran::build_vocab({&train, &test});
  CHECK(vocab.relation_id("r2") == 2);
  CHECK(vocab.relation_id("attr") == 3);
  CHECK(vocab.relation_id("r1") == 4);
  CHECK(vocab.entity_id("b") == 5);

  std::ostringstream os;
  vocab.save(os);
  std::istringstream is(os.str());
  auto reloaded = Vocabulary::load(is);
  CHECK(reloaded.vocab_size() == vocab.vocab_size());
  for (std::uint32_t id = 0; id < vocab.vocab_size(); ++id) {
    CHECK(reloaded.name(id) == vocab.name(id));
    if (vocab.is_relation_id(id)) CHECK(reloaded.relation_id(vocab.name(id)) == id);
    if (vocab.is_entity_id(id)) CHECK(reloaded.entity_id(vocab.name(id)) == id);
  }
  // resolve round trip keeps ids
  for (const auto& rf : train) CHECK(reloaded.resolve(rf) == vocab.resolve(rf));
}

TEST_CASE("split_dev sizes, determinism, and error paths") {
  std::vector<RawFact> ten;
  for (int i = 0; i < 10; ++i) ten.push_back({"e" + std::to_string(i), "r", "o", {}});
  auto [train, dev] = gran::split_dev(ten, 0.2, 7);
  CHECK(train.size() == 8);
  CHECK(dev.size() == 2);

  auto [train2, dev2] = gran::split_dev(ten, 0.2, 7);
  CHECK(train == train2);
  CHECK(dev == dev2);
  auto [train3, dev3] = gran::split_dev(ten, 0.2, 8);
  CHECK((train3 != train || dev3 != dev));  // different seed, different split

  std::vector<RawFact> none;
  CHECK_THROWS_AS(gran::split_dev(none, 0.2, 1), gran::input_error);
  CHECK_THROWS_AS(gran::split_dev(ten, 0.0, 1), gran::input_error);
  CHECK_THROWS_AS(gran::split_dev(ten, 1.0, 1), gran::input_error);
}

TEST_CASE("split_dev reproduces the published JF17K dev size") {
  std::vector<int> counts(76379, 0);
  // same rounding rule as the fact-level splitter: round(0.2 * N)
  const std::size_t n_dev = std::size_t(std::llround(0.2 * double(counts.size())));
  CHECK(n_dev == 15276);
  std::vector<RawFact> facts(76379, RawFact{"s", "r", "o", {}});
  auto [train, dev] = gran::split_dev(facts, 0.2, 1);
  CHECK(dev.size() == 15276);
  CHECK(train.size() == 76379 - 15276);
}

TEST_CASE("generate_instances emits 2m+3 masks with answers recorded") {
  Fact triple{3, 2, 4, {}};
  auto inst3 = gran::generate_instances(triple);
  REQUIRE(inst3.size() == 3);
  CHECK(inst3[0].slot.kind == SlotKind::subject);
  CHECK(inst3[0].answer == 3);
  CHECK(inst3[0].entity_class);
  CHECK(inst3[2].slot.kind == SlotKind::relation);
  CHECK_FALSE(inst3[2].entity_class);

  Fact curie{3, 2, 4, {{5, 6}, {7, 8}, {7, 9}}};
  auto inst9 = gran::generate_instances(curie);
  CHECK(inst9.size() == 9);  // 2*3+3

  std::vector<Fact> corpus{triple, {3, 2, 4, {{5, 6}}}};
  auto all = gran::generate_all_instances(corpus);
  CHECK(all.size() == 8);  // 3 + 5
  std::size_t recount = 0;
  for (const auto& f : corpus) recount += 2 * f.aux.size() + 3;
  CHECK(all.size() == recount);
}

TEST_CASE("masking attr(i) always masks the i-th pair as given") {
  Fact f{3, 2, 4, {{5, 6}, {7, 8}}};
  auto instances = gran::generate_instances(f);
  REQUIRE(instances.size() == 7);
  CHECK(instances[3].slot == Slot{SlotKind::attr, 0});
  CHECK(instances[3].answer == 5);
  CHECK(instances[5].slot == Slot{SlotKind::attr, 1});
  CHECK(instances[5].answer == 7);
  CHECK(instances[6].slot == Slot{SlotKind::value, 1});
  CHECK(instances[6].answer == 8);
}

TEST_CASE("filter index collects every answer for a masked pattern") {
  // corpus {(a,r,b), (c,r,b)} with ids r=2, a=3, b=4, c=5
  std::vector<Fact> corpus{{3, 2, 4, {}}, {5, 2, 4, {}}};
  auto index = gran::build_filter_index({&corpus});

  const auto& objects = index.lookup(corpus[0], {SlotKind::object, 0});
  REQUIRE(objects.size() == 1);
  CHECK(objects[0] == 4);

  // brute-force oracle for pattern (?, r, b): scan the corpus
  std::vector<std::uint32_t> want;
  for (const auto& f : corpus)
    if (f.relation == 2 && f.object == 4 && f.aux.empty()) want.push_back(f.subject);
  std::sort(want.begin(), want.end());
  const auto& subjects = index.lookup(corpus[0], {SlotKind::subject, 0});
  CHECK(std::vector<std::uint32_t>(subjects.begin(), subjects.end()) == want);
  CHECK(want == std::vector<std::uint32_t>{3, 5});

  // every instance's own answer is in its own filter set
  for (const auto& f : corpus)
    for (const auto& inst : gran::generate_instances(f)) {
      const auto& s = index.lookup(f, inst.slot);
      CHECK(std::binary_search(s.begin(), s.end(), inst.answer));
    }
}

TEST_CASE("filter index treats aux pairs as a set and deduplicates answers") {
  Fact a{3, 2, 4, {{5, 6}, {7, 8}}};
  Fact b{3, 2, 4, {{7, 8}, {5, 6}}};  // same fact, aux order swapped
  std::vector<Fact> split1{a, a};     // duplicate
  std::vector<Fact> split2{b};
  auto index = gran::build_filter_index({&split1, &split2});
  const auto& subj_a = index.lookup(a, {SlotKind::subject, 0});
  REQUIRE(subj_a.size() == 1);  // deduplicated
  const auto& subj_b = index.lookup(b, {SlotKind::subject, 0});
  CHECK(subj_a == subj_b);  // same canonical pattern
}

TEST_CASE("parse_jf17k reads whitespace tuples") {
  std::istringstream is("rel1 a b c\nrel2 x y\n");
  auto facts = gran::parse_jf17k(is);
  REQUIRE(facts.size() == 2);
  CHECK(facts[0].arity() == 3);
  CHECK(facts[1].arity() == 2);
  std::istringstream bad("rel1 onlyone\n");
  CHECK_THROWS_AS(gran::parse_jf17k(bad), gran::input_error);
}
