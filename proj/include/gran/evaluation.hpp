#pragma once

// Filtered-ranking evaluation: MRR and Hits@{1,10} per prediction category
// and arity bucket.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gran/model.hpp"

namespace gran {

enum class Category : std::uint8_t {
  all_entities = 0,
  subject_object = 1,
  aux_values = 2,
  all_relations = 3,
  primary_relation = 4,
};
inline constexpr int kCategories = 5;

inline const char* category_name(Category c) {
  switch (c) {
    case Category::all_entities: return "all-entities";
    case Category::subject_object: return "subject-object";
    case Category::aux_values: return "aux-values";
    case Category::all_relations: return "all-relations";
    case Category::primary_relation: return "primary-relation";
  }
  throw input_error("bad category");
}

inline Category parse_category(const std::string& s) {
  for (int c = 0; c < kCategories; ++c)
    if (s == category_name(Category(c))) return Category(c);
  throw input_error("unknown category '" + s + "'");
}

enum class ArityBucket : std::uint8_t { binary = 0, higher = 1, all = 2 };
inline constexpr int kBuckets = 3;

inline const char* bucket_name(ArityBucket b) {
  switch (b) {
    case ArityBucket::binary: return "n=2";
    case ArityBucket::higher: return "n>2";
    case ArityBucket::all: return "all";
  }
  throw input_error("bad bucket");
}

struct MetricCell {
  double reciprocal_sum = 0.0;
  std::size_t hits1 = 0;
  std::size_t hits10 = 0;
  std::size_t count = 0;

  void record(std::size_t rank) {
    ++count;
    reciprocal_sum += 1.0 / double(rank);
    if (rank <= 1) ++hits1;
    if (rank <= 10) ++hits10;
  }
  void merge(const MetricCell& o) {
    reciprocal_sum += o.reciprocal_sum;
    hits1 += o.hits1;
    hits10 += o.hits10;
    count += o.count;
  }
  double mrr() const { return count ? reciprocal_sum / double(count) : 0.0; }
  double h1() const { return count ? double(hits1) / double(count) : 0.0; }
  double h10() const { return count ? double(hits10) / double(count) : 0.0; }
};

struct Metrics {
  MetricCell cells[kCategories][kBuckets];

  MetricCell& at(Category c, ArityBucket b) { return cells[int(c)][int(b)]; }
  const MetricCell& at(Category c, ArityBucket b) const { return cells[int(c)][int(b)]; }

  void record(Category c, std::size_t arity, std::size_t rank) {
    at(c, arity == 2 ? ArityBucket::binary : ArityBucket::higher).record(rank);
    at(c, ArityBucket::all).record(rank);
  }
  void merge(const Metrics& o) {
    for (int c = 0; c < kCategories; ++c)
      for (int b = 0; b < kBuckets; ++b) cells[c][b].merge(o.cells[c][b]);
  }
};

// Mean-tie filtered rank. `filter` holds local candidate indices known to be
// true for this pattern (sorted); they are removed from consideration except
// for the gold answer itself.
//   rank = 1 + #{better} + floor(#{tied, != gold} / 2)
template <typename T>
std::size_t rank_answer(std::span<const T> scores, std::size_t gold,
                        std::span<const std::uint32_t> filter) {
  if (gold >= scores.size()) throw contract_error("rank_answer: gold outside candidate range");
  if (!filter.empty() &&
      !std::binary_search(filter.begin(), filter.end(), std::uint32_t(gold)))
    throw contract_error("rank_answer: gold answer missing from its own filter set");
  const T gold_score = scores[gold];
  std::size_t better = 0, tied = 0;
  std::size_t fpos = 0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    while (fpos < filter.size() && filter[fpos] < c) ++fpos;
    const bool filtered = fpos < filter.size() && filter[fpos] == c;
    if (c == gold) continue;
    if (filtered) continue;
    if (scores[c] > gold_score) ++better;
    else if (scores[c] == gold_score) ++tied;
  }
  return 1 + better + tied / 2;
}

struct EvalSettings {
  std::vector<Category> categories = {Category::all_entities, Category::subject_object,
                                      Category::aux_values, Category::all_relations,
                                      Category::primary_relation};
  std::size_t batch = 128;
  int threads = 1;
};

namespace detail {

struct EvalTask {
  std::uint32_t fact = 0;
  Slot slot;
};

inline bool wants(const EvalSettings& s, Category c) {
  return std::find(s.categories.begin(), s.categories.end(), c) != s.categories.end();
}

template <typename S>
void eval_range(GranParams<S>& params, const std::vector<Fact>& facts, const FilterIndex& filter,
                const EvalSettings& settings, const std::vector<EvalTask>& tasks,
                std::size_t begin, std::size_t end, Metrics& out) {
  autograd_pause no_tape;
  for (std::size_t start = begin; start < end; start += settings.batch) {
    const std::size_t stop = std::min(end, start + settings.batch);
    std::vector<HeteroGraph> graphs;
    graphs.reserve(stop - start);
    for (std::size_t t = start; t < stop; ++t)
      graphs.push_back(build_graph(facts[tasks[t].fact], tasks[t].slot));
    GraphBatch gb = pack_graphs(graphs);
    ForwardResult<S> fwd = forward_batch(params, gb);
    auto handle = [&](const Tensor<S>& logits, const std::vector<std::uint32_t>& rows,
                      std::uint32_t class_begin) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const EvalTask& task = tasks[start + rows[r]];
        const Fact& fact = facts[task.fact];
        const std::uint32_t gold_global = slot_id(fact, task.slot);
        const std::size_t c = logits.shape()[1];
        std::span<const S> scores = logits.data().subspan(r * c, c);
        const auto& known = filter.lookup(fact, task.slot);
        std::vector<std::uint32_t> local;
        local.reserve(known.size());
        for (auto id : known) local.push_back(id - class_begin);
        const std::size_t rank = rank_answer(scores, gold_global - class_begin, local);
        const std::size_t arity = fact.arity();
        switch (task.slot.kind) {
          case SlotKind::subject:
          case SlotKind::object:
            if (wants(settings, Category::all_entities))
              out.record(Category::all_entities, arity, rank);
            if (wants(settings, Category::subject_object))
              out.record(Category::subject_object, arity, rank);
            break;
          case SlotKind::value:
            if (wants(settings, Category::all_entities))
              out.record(Category::all_entities, arity, rank);
            if (wants(settings, Category::aux_values))
              out.record(Category::aux_values, arity, rank);
            break;
          case SlotKind::relation:
            if (wants(settings, Category::all_relations))
              out.record(Category::all_relations, arity, rank);
            if (wants(settings, Category::primary_relation))
              out.record(Category::primary_relation, arity, rank);
            break;
          case SlotKind::attr:
            if (wants(settings, Category::all_relations))
              out.record(Category::all_relations, arity, rank);
            break;
        }
      }
    };
    if (!fwd.entity_rows.empty()) handle(fwd.entity_logits, fwd.entity_rows, params.entity_begin());
    if (!fwd.relation_rows.empty())
      handle(fwd.relation_logits, fwd.relation_rows, params.relation_begin());
  }
}

}  // namespace detail

// Masks each requested position of each fact in turn, ranks the gold answer
// against its full candidate class under the filtered protocol, and
// aggregates. Parameters are only read; ranges may be spread across threads.
template <typename S>
Metrics evaluate(GranParams<S>& params, const std::vector<Fact>& facts, const FilterIndex& filter,
                 const EvalSettings& settings = {}) {
  const bool need_entities = detail::wants(settings, Category::all_entities) ||
                             detail::wants(settings, Category::subject_object) ||
                             detail::wants(settings, Category::aux_values);
  const bool need_values = detail::wants(settings, Category::all_entities) ||
                           detail::wants(settings, Category::aux_values);
  const bool need_relations = detail::wants(settings, Category::all_relations) ||
                              detail::wants(settings, Category::primary_relation);
  const bool need_attrs = detail::wants(settings, Category::all_relations);
  std::vector<detail::EvalTask> tasks;
  for (std::uint32_t i = 0; i < facts.size(); ++i) {
    const Fact& f = facts[i];
    if (need_entities) {
      tasks.push_back({i, {SlotKind::subject, 0}});
      tasks.push_back({i, {SlotKind::object, 0}});
    }
    if (need_values)
      for (std::uint16_t a = 0; a < f.aux.size(); ++a) tasks.push_back({i, {SlotKind::value, a}});
    if (need_relations) tasks.push_back({i, {SlotKind::relation, 0}});
    if (need_attrs)
      for (std::uint16_t a = 0; a < f.aux.size(); ++a) tasks.push_back({i, {SlotKind::attr, a}});
  }

  const int threads = std::max(1, settings.threads);
  if (threads == 1 || tasks.size() < 2 * settings.batch) {
    Metrics m;
    detail::eval_range(params, facts, filter, settings, tasks, 0, tasks.size(), m);
    return m;
  }
  std::vector<Metrics> partial;
  partial.resize(std::size_t(threads));
  std::vector<std::thread> pool;
  const std::size_t chunk = (tasks.size() + std::size_t(threads) - 1) / std::size_t(threads);
  for (int t = 0; t < threads; ++t) {
    const std::size_t begin = std::min(tasks.size(), std::size_t(t) * chunk);
    const std::size_t end = std::min(tasks.size(), begin + chunk);
    pool.emplace_back([&, t, begin, end] {
      detail::eval_range(params, facts, filter, settings, tasks, begin, end, partial[std::size_t(t)]);
    });
  }
  for (auto& th : pool) th.join();
  Metrics m;
  for (const auto& p : partial) m.merge(p);
  return m;
}

// Plain-text report: one row per category and arity bucket.
inline std::string render_report(const Metrics& m, const std::string& header = "") {
  std::ostringstream os;
  if (!header.empty()) os << header << "\n";
  os << std::left << std::setw(18) << "category" << std::setw(6) << "arity" << std::right
     << std::setw(8) << "MRR" << std::setw(8) << "H@1" << std::setw(8) << "H@10" << std::setw(10)
     << "count" << "\n";
  for (int c = 0; c < kCategories; ++c) {
    for (int b = 0; b < kBuckets; ++b) {
      const MetricCell& cell = m.cells[c][b];
      if (cell.count == 0) continue;
      os << std::left << std::setw(18) << category_name(Category(c)) << std::setw(6)
         << bucket_name(ArityBucket(b)) << std::right << std::fixed << std::setprecision(3)
         << std::setw(8) << cell.mrr() << std::setw(8) << cell.h1() << std::setw(8) << cell.h10()
         << std::setw(10) << cell.count << "\n";
    }
  }
  return os.str();
}

}  // namespace gran
