#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "gran/graph.hpp"

using gran::Fact;
using gran::HeteroGraph;
using gran::Slot;
using gran::SlotKind;

namespace {

Fact random_fact(std::size_t m, gran::Rng& rng) {
  // ids: relations in [2, 12), entities in [12, 52)
  auto rel = [&] { return std::uint32_t(2 + rng.below(10)); };
  auto ent = [&] { return std::uint32_t(12 + rng.below(40)); };
  Fact f{ent(), rel(), ent(), {}};
  for (std::size_t i = 0; i < m; ++i) f.aux.emplace_back(rel(), ent());
  return f;
}

Slot random_slot(const Fact& f, gran::Rng& rng) {
  auto instances = gran::generate_instances(f);
  return instances[rng.below(instances.size())].slot;
}

}  // namespace

TEST_CASE("binary fact graph: three vertices, two typed edges") {
  Fact f{10, 2, 11, {}};
  auto g = gran::build_graph(f, {SlotKind::subject, 0});
  REQUIRE(g.k() == 3);
  CHECK(g.vertices[0] == 2);
  CHECK(g.vertices[1] == gran::Vocabulary::kMaskId);
  CHECK(g.vertices[2] == 11);
  CHECK(gran::edge_type(g, 1, 0) == gran::kEdgeSubjectRelation);
  CHECK(gran::edge_type(g, 2, 0) == gran::kEdgeObjectRelation);
  CHECK(gran::edge_type(g, 1, 2) == gran::kEdgeNone);  // no subject-object edge
  CHECK(g.mask_position() == 1);
}

TEST_CASE("m=3 graph has nine vertices and eight undirected edges") {
  Fact f{20, 2, 21, {{3, 22}, {4, 23}, {4, 24}}};
  auto g = gran::build_graph(f, {SlotKind::value, 2});
  REQUIRE(g.k() == 9);
  std::size_t nonzero = 0;
  for (auto code : g.edge_types) nonzero += code != 0;
  CHECK(nonzero == 2 * (2 * 3 + 2));  // each undirected edge stored twice
  CHECK(g.vertices[8] == gran::Vocabulary::kMaskId);

  // cross-pair vertices stay unlinked
  CHECK(gran::edge_type(g, 4, 6) == gran::kEdgeNone);   // v1 vs v2
  CHECK(gran::edge_type(g, 3, 6) == gran::kEdgeNone);   // a1 vs v2
  CHECK(gran::edge_type(g, 5, 6) == gran::kEdgeAttributeValue);  // a2 - v2
  CHECK(gran::edge_type(g, 0, 5) == gran::kEdgeRelationAttribute);
}

TEST_CASE("edge_type is symmetric, zero on the diagonal, and bounds-checked") {
  Fact f{20, 2, 21, {{3, 22}}};
  auto g = gran::build_graph(f, {SlotKind::object, 0});
  for (std::size_t i = 0; i < g.k(); ++i) {
    CHECK(gran::edge_type(g, i, i) == 0);
    for (std::size_t j = 0; j < g.k(); ++j)
      CHECK(gran::edge_type(g, i, j) == gran::edge_type(g, j, i));
  }
  CHECK_THROWS_AS(gran::edge_type(g, 0, g.k()), gran::input_error);
}

TEST_CASE("graph invariants hold for random arities up to m=8") {
  gran::Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = rng.below(9);
    Fact f = random_fact(m, rng);
    auto g = gran::build_graph(f, random_slot(f, rng));
    const std::size_t k = 2 * m + 3;
    REQUIRE(g.k() == k);

    std::size_t per_type[5] = {0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const auto code = g.edge(i, j);
        REQUIRE(code <= 4);
        if (i == j) REQUIRE(code == 0);
        REQUIRE(code == g.edge(j, i));
        if (i < j) ++per_type[code];
      }
    CHECK(per_type[1] == 1);
    CHECK(per_type[2] == 1);
    CHECK(per_type[3] == m);
    CHECK(per_type[4] == m);
    CHECK(per_type[1] + per_type[2] + per_type[3] + per_type[4] == 2 * m + 2);

    // vertex typing follows the canonical layout
    CHECK(g.vertex_types[0] == gran::VertexType::relation);
    CHECK(g.vertex_types[1] == gran::VertexType::entity);
    CHECK(g.vertex_types[2] == gran::VertexType::entity);
    for (std::size_t i = 0; i < m; ++i) {
      CHECK(g.vertex_types[3 + 2 * i] == gran::VertexType::relation);
      CHECK(g.vertex_types[4 + 2 * i] == gran::VertexType::entity);
    }
  }
}

TEST_CASE("graphs reconstruct their masked instance exactly") {
  gran::Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    Fact f = random_fact(rng.below(6), rng);
    Slot slot = random_slot(f, rng);
    auto [masked_fact, recovered_slot] = gran::instance_from_graph(gran::build_graph(f, slot));
    CHECK(recovered_slot == slot);
    Fact expect = f;
    switch (slot.kind) {
      case SlotKind::subject: expect.subject = 0; break;
      case SlotKind::object: expect.object = 0; break;
      case SlotKind::relation: expect.relation = 0; break;
      case SlotKind::attr: expect.aux[slot.index].first = 0; break;
      case SlotKind::value: expect.aux[slot.index].second = 0; break;
    }
    CHECK(masked_fact == expect);
  }
}

TEST_CASE("swapping aux pairs permutes the graph consistently") {
  gran::Rng rng(88);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(4);
    Fact f = random_fact(m, rng);
    const std::size_t i = rng.below(m);
    std::size_t j = rng.below(m);
    if (i == j) j = (j + 1) % m;

    Fact swapped = f;
    std::swap(swapped.aux[i], swapped.aux[j]);
    auto g = gran::build_graph(f, {SlotKind::subject, 0});
    auto h = gran::build_graph(swapped, {SlotKind::subject, 0});

    // permutation that exchanges the two aux pairs' vertex slots
    std::vector<std::size_t> perm(g.k());
    for (std::size_t v = 0; v < g.k(); ++v) perm[v] = v;
    std::swap(perm[3 + 2 * i], perm[3 + 2 * j]);
    std::swap(perm[4 + 2 * i], perm[4 + 2 * j]);

    for (std::size_t v = 0; v < g.k(); ++v) CHECK(h.vertices[v] == g.vertices[perm[v]]);
    for (std::size_t a = 0; a < g.k(); ++a)
      for (std::size_t b = 0; b < g.k(); ++b)
        CHECK(h.edge(a, b) == g.edge(perm[a], perm[b]));
  }
}
