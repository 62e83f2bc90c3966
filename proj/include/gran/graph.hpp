#pragma once

// A masked instance as a small heterogeneous graph: the fact's elements as
// typed vertices in the canonical order [r, s, o, a1, v1, ..., am, vm] plus a
// symmetric matrix of typed edges.

#include <cstdint>
#include <vector>

#include "gran/dataset.hpp"

namespace gran {

enum EdgeCode : std::uint8_t {
  kEdgeNone = 0,
  kEdgeSubjectRelation = 1,
  kEdgeObjectRelation = 2,
  kEdgeRelationAttribute = 3,
  kEdgeAttributeValue = 4,
};
inline constexpr int kEdgeCodes = 5;  // including "no edge"

enum class VertexType : std::uint8_t { entity = 0, relation = 1 };

struct HeteroGraph {
  std::vector<std::uint32_t> vertices;    // vocabulary ids, [MASK] at the masked slot
  std::vector<VertexType> vertex_types;   // parallel to vertices
  std::vector<std::uint8_t> edge_types;   // k*k row-major, symmetric, zero diagonal

  std::size_t k() const { return vertices.size(); }

  std::uint8_t edge(std::size_t i, std::size_t j) const { return edge_types[i * k() + j]; }

  std::size_t mask_position() const {
    for (std::size_t i = 0; i < vertices.size(); ++i)
      if (vertices[i] == Vocabulary::kMaskId) return i;
    throw contract_error("graph has no [MASK] vertex");
  }
};

// Vertex index of each slot under the canonical ordering.
inline std::size_t slot_vertex(Slot s) {
  switch (s.kind) {
    case SlotKind::relation: return 0;
    case SlotKind::subject: return 1;
    case SlotKind::object: return 2;
    case SlotKind::attr: return 3 + 2 * std::size_t(s.index);
    case SlotKind::value: return 4 + 2 * std::size_t(s.index);
  }
  throw contract_error("slot_vertex: bad slot kind");
}

inline HeteroGraph build_graph(const Fact& fact, Slot masked) {
  const std::size_t m = fact.aux.size();
  const std::size_t k = 2 * m + 3;
  HeteroGraph g;
  g.vertices.resize(k);
  g.vertex_types.resize(k);
  g.edge_types.assign(k * k, kEdgeNone);

  g.vertices[0] = fact.relation;
  g.vertices[1] = fact.subject;
  g.vertices[2] = fact.object;
  g.vertex_types[0] = VertexType::relation;
  g.vertex_types[1] = VertexType::entity;
  g.vertex_types[2] = VertexType::entity;
  for (std::size_t i = 0; i < m; ++i) {
    g.vertices[3 + 2 * i] = fact.aux[i].first;
    g.vertices[4 + 2 * i] = fact.aux[i].second;
    g.vertex_types[3 + 2 * i] = VertexType::relation;
    g.vertex_types[4 + 2 * i] = VertexType::entity;
  }
  const std::size_t masked_at = slot_vertex(masked);
  if (masked_at >= k) throw contract_error("build_graph: masked slot outside fact");
  g.vertices[masked_at] = Vocabulary::kMaskId;

  auto link = [&](std::size_t i, std::size_t j, std::uint8_t code) {
    g.edge_types[i * k + j] = code;
    g.edge_types[j * k + i] = code;
  };
  link(1, 0, kEdgeSubjectRelation);
  link(2, 0, kEdgeObjectRelation);
  for (std::size_t i = 0; i < m; ++i) {
    link(0, 3 + 2 * i, kEdgeRelationAttribute);
    link(3 + 2 * i, 4 + 2 * i, kEdgeAttributeValue);
  }
  return g;
}

inline std::uint8_t edge_type(const HeteroGraph& g, std::size_t i, std::size_t j) {
  if (i >= g.k() || j >= g.k())
    throw input_error("edge_type: index (" + std::to_string(i) + "," + std::to_string(j) +
                      ") out of range for k=" + std::to_string(g.k()));
  return g.edge(i, j);
}

// Inverse of build_graph: recovers the masked fact and slot from the vertex
// sequence. The graph retains the full semantics of the instance.
inline std::pair<Fact, Slot> instance_from_graph(const HeteroGraph& g) {
  if (g.k() < 3 || g.k() % 2 == 0)
    throw contract_error("instance_from_graph: vertex count must be 2m+3");
  Fact f;
  f.relation = g.vertices[0];
  f.subject = g.vertices[1];
  f.object = g.vertices[2];
  const std::size_t m = (g.k() - 3) / 2;
  for (std::size_t i = 0; i < m; ++i)
    f.aux.emplace_back(g.vertices[3 + 2 * i], g.vertices[4 + 2 * i]);

  const std::size_t pos = g.mask_position();
  Slot slot;
  if (pos == 0) slot = {SlotKind::relation, 0};
  else if (pos == 1) slot = {SlotKind::subject, 0};
  else if (pos == 2) slot = {SlotKind::object, 0};
  else if (pos % 2 == 1) slot = {SlotKind::attr, std::uint16_t((pos - 3) / 2)};
  else slot = {SlotKind::value, std::uint16_t((pos - 4) / 2)};
  return {std::move(f), slot};
}

}  // namespace gran
