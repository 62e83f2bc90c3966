#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "gran/evaluation.hpp"
#include "support/synthetic.hpp"

using gran::Category;
using gran::Fact;
using gran::Metrics;
using gran::Slot;
using gran::SlotKind;

namespace {

// Brute-force rank: materialize every candidate substitution, sort scores in
// descending order, and take the floored midpoint of the gold tie block
// (the mean rank over all tie orderings).
std::size_t brute_force_rank(std::span<const float> scores, std::size_t gold,
                             const std::set<std::uint32_t>& known_true) {
  std::vector<std::pair<float, std::size_t>> order;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (c != gold && known_true.count(std::uint32_t(c))) continue;
    order.emplace_back(scores[c], c);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  std::size_t first = 0, last = 0, at = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i].second == gold) at = i;
  }
  first = at;
  while (first > 0 && order[first - 1].first == order[at].first) --first;
  last = at;
  while (last + 1 < order.size() && order[last + 1].first == order[at].first) ++last;
  return (first + 1 + last + 1) / 2;
}

// Fact-level membership of a candidate substitution, with aux treated as a
// set; scans the corpus, independent of FilterIndex.
bool substitution_exists(const std::vector<Fact>& corpus, Fact fact, Slot slot,
                         std::uint32_t candidate) {
  switch (slot.kind) {
    case SlotKind::subject: fact.subject = candidate; break;
    case SlotKind::object: fact.object = candidate; break;
    case SlotKind::relation: fact.relation = candidate; break;
    case SlotKind::attr: fact.aux[slot.index].first = candidate; break;
    case SlotKind::value: fact.aux[slot.index].second = candidate; break;
  }
  auto canon = [](Fact f) {
    std::sort(f.aux.begin(), f.aux.end());
    return f;
  };
  const Fact want = canon(std::move(fact));
  for (const auto& f : corpus)
    if (canon(f) == want) return true;
  return false;
}

}  // namespace

TEST_CASE("rank_answer counting rules") {
  const std::vector<double> scores{0.5, 0.9, 0.1};
  CHECK(gran::rank_answer<double>(scores, 0, {}) == 2);

  const std::vector<std::uint32_t> filter{0, 1};  // index 1 is a known true answer
  CHECK(gran::rank_answer<double>(scores, 0, filter) == 1);

  // gold tied with two others at the top: mean of {1,2,3}
  const std::vector<double> tied{0.9, 0.9, 0.9, 0.2};
  CHECK(gran::rank_answer<double>(tied, 1, {}) == 2);

  CHECK_THROWS_AS(gran::rank_answer<double>(scores, 7, {}), gran::contract_error);
  const std::vector<std::uint32_t> missing_gold{2};
  CHECK_THROWS_AS(gran::rank_answer<double>(scores, 0, missing_gold), gran::contract_error);
}

TEST_CASE("filtering never worsens a rank") {
  gran::Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + rng.below(40);
    std::vector<double> scores(n);
    for (auto& s : scores) s = rng.below(7);  // deliberate ties
    const std::size_t gold = rng.below(n);
    std::vector<std::uint32_t> filter{std::uint32_t(gold)};
    std::size_t prev = gran::rank_answer<double>(scores, gold, filter);
    for (int grow = 0; grow < 10; ++grow) {
      const auto extra = std::uint32_t(rng.below(n));
      filter.push_back(extra);
      std::sort(filter.begin(), filter.end());
      filter.erase(std::unique(filter.begin(), filter.end()), filter.end());
      const std::size_t now = gran::rank_answer<double>(scores, gold, filter);
      CHECK(now <= prev);
      prev = now;
    }
  }
}

TEST_CASE("MRR of ranks {1,2,4} is 7/12") {
  gran::MetricCell cell;
  cell.record(1);
  cell.record(2);
  cell.record(4);
  CHECK(std::abs(cell.mrr() - 7.0 / 12.0) < 1e-15);
  CHECK(cell.h1() == 1.0 / 3.0);
  CHECK(cell.h10() == 1.0);
}

TEST_CASE("metric cell invariants on random rank streams") {
  gran::Rng rng(9);
  gran::MetricCell cell;
  for (int i = 0; i < 500; ++i) cell.record(1 + rng.below(30));
  CHECK(cell.h1() <= cell.h10());
  CHECK(cell.h10() <= 1.0);
  CHECK(cell.mrr() > 0.0);
  CHECK(cell.mrr() <= 1.0);
  CHECK(cell.h1() <= cell.mrr());
}

TEST_CASE("evaluate matches the brute-force evaluator on small corpora") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto corpus = synthetic::rule_corpus(12, 3, seed, 1);
    auto bundle = synthetic::rule_bundle(corpus, 0.25, seed);
    REQUIRE(bundle.vocab.n_entities() <= 50);

    auto cfg = gran::GranConfig{};
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.hidden = 8;
    cfg.dropout = 0.0;
    auto params = gran::GranParams<float>::init(cfg, bundle.vocab.n_relations(),
                                                bundle.vocab.n_entities(), seed);

    gran::EvalSettings settings;
    settings.batch = 16;
    Metrics got = gran::evaluate(params, bundle.dev, bundle.filter, settings);

    // oracle pass: per-instance forward, explicit substitution + sort
    std::vector<Fact> all = bundle.train;
    all.insert(all.end(), bundle.dev.begin(), bundle.dev.end());
    Metrics want;
    gran::autograd_pause pause;
    for (const auto& fact : bundle.dev) {
      for (const auto& inst : gran::generate_instances(fact)) {
        auto logits = gran::forward(params, gran::build_graph(fact, inst.slot));
        const std::uint32_t begin =
            inst.entity_class ? params.entity_begin() : params.relation_begin();
        std::set<std::uint32_t> known;
        for (std::size_t c = 0; c < logits.size(); ++c)
          if (substitution_exists(all, fact, inst.slot, std::uint32_t(c) + begin))
            known.insert(std::uint32_t(c));
        const std::size_t rank =
            brute_force_rank(logits.data(), inst.answer - begin, known);
        switch (inst.slot.kind) {
          case SlotKind::subject:
          case SlotKind::object:
            want.record(Category::all_entities, fact.arity(), rank);
            want.record(Category::subject_object, fact.arity(), rank);
            break;
          case SlotKind::value:
            want.record(Category::all_entities, fact.arity(), rank);
            want.record(Category::aux_values, fact.arity(), rank);
            break;
          case SlotKind::relation:
            want.record(Category::all_relations, fact.arity(), rank);
            want.record(Category::primary_relation, fact.arity(), rank);
            break;
          case SlotKind::attr:
            want.record(Category::all_relations, fact.arity(), rank);
            break;
        }
      }
    }
    for (int c = 0; c < gran::kCategories; ++c)
      for (int b = 0; b < gran::kBuckets; ++b) {
        const auto& gc = got.cells[c][b];
        const auto& wc = want.cells[c][b];
        CHECK(gc.count == wc.count);
        CHECK(gc.hits1 == wc.hits1);
        CHECK(gc.hits10 == wc.hits10);
        CHECK(std::abs(gc.mrr() - wc.mrr()) < 1e-12);
      }
  }
}

TEST_CASE("a perfect oracle scores MRR 1 and a uniform scorer matches mean-tie expectation") {
  auto corpus = synthetic::rule_corpus(10, 2, 5, 1);
  auto bundle = synthetic::rule_bundle(corpus, 0.3, 5);
  auto cfg = gran::GranConfig{};
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.hidden = 4;
  cfg.dropout = 0.0;
  auto params = gran::GranParams<float>::init(cfg, bundle.vocab.n_relations(),
                                              bundle.vocab.n_entities(), 5);
  // zero every parameter: all candidates score identically (uniform model)
  for (const auto& name : params.store.names()) {
    auto w = params.p(name).mutable_data();
    std::fill(w.begin(), w.end(), 0.f);
  }
  gran::EvalSettings entity_only;
  entity_only.categories = {Category::all_entities};
  Metrics uniform = gran::evaluate(params, bundle.dev, bundle.filter, entity_only);

  // closed-form mean-tie expectation, candidate set reduced by the filter
  gran::autograd_pause pause;
  double expect_sum = 0;
  std::size_t n_inst = 0;
  for (const auto& fact : bundle.dev)
    for (const auto& inst : gran::generate_instances(fact)) {
      if (!inst.entity_class) continue;
      const auto& known = bundle.filter.lookup(fact, inst.slot);
      const std::size_t n = bundle.vocab.n_entities() - (known.size() - 1);
      expect_sum += 1.0 / double(1 + (n - 1) / 2);
      ++n_inst;
    }
  const auto& cell = uniform.at(Category::all_entities, gran::ArityBucket::all);
  CHECK(cell.count == n_inst);
  CHECK(std::abs(cell.mrr() - expect_sum / double(n_inst)) < 1e-12);

  // perfect scores: rank 1 everywhere
  gran::Rng rng(6);
  for (const auto& fact : bundle.dev)
    for (const auto& inst : gran::generate_instances(fact)) {
      std::vector<double> scores(inst.entity_class ? bundle.vocab.n_entities()
                                                   : bundle.vocab.n_relations());
      for (auto& s : scores) s = -1.0 - double(rng.below(100));
      const std::uint32_t begin =
          inst.entity_class ? params.entity_begin() : params.relation_begin();
      scores[inst.answer - begin] = 1.0;
      const auto& known = bundle.filter.lookup(fact, inst.slot);
      std::vector<std::uint32_t> local;
      for (auto id : known) local.push_back(id - begin);
      CHECK(gran::rank_answer<double>(scores, inst.answer - begin, local) == 1);
    }
}

TEST_CASE("category partition: all-entities = subject/object + aux-values") {
  auto corpus = synthetic::rule_corpus(15, 3, 11, 1);
  auto bundle = synthetic::rule_bundle(corpus, 0.2, 11);
  auto cfg = gran::GranConfig{};
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.hidden = 4;
  cfg.dropout = 0.0;
  auto params = gran::GranParams<float>::init(cfg, bundle.vocab.n_relations(),
                                              bundle.vocab.n_entities(), 11);
  Metrics m = gran::evaluate(params, bundle.dev, bundle.filter);
  for (auto bucket : {gran::ArityBucket::binary, gran::ArityBucket::higher, gran::ArityBucket::all}) {
    CHECK(m.at(Category::all_entities, bucket).count ==
          m.at(Category::subject_object, bucket).count +
              m.at(Category::aux_values, bucket).count);
  }
  // threaded evaluation merges to the same counts
  gran::EvalSettings threaded;
  threaded.threads = 2;
  threaded.batch = 8;
  Metrics mt = gran::evaluate(params, bundle.dev, bundle.filter, threaded);
  for (int c = 0; c < gran::kCategories; ++c)
    for (int b = 0; b < gran::kBuckets; ++b) {
      CHECK(mt.cells[c][b].count == m.cells[c][b].count);
      CHECK(mt.cells[c][b].hits1 == m.cells[c][b].hits1);
      CHECK(std::abs(mt.cells[c][b].mrr() - m.cells[c][b].mrr()) < 1e-12);
    }
}

TEST_CASE("report renders populated rows") {
  Metrics m;
  m.record(Category::all_entities, 2, 1);
  m.record(Category::all_entities, 3, 4);
  const std::string report = gran::render_report(m, "config: test");
  CHECK(report.find("all-entities") != std::string::npos);
  CHECK(report.find("n=2") != std::string::npos);
  CHECK(report.find("n>2") != std::string::npos);
  CHECK(report.find("config: test") != std::string::npos);
}
