#pragma once

// The GRAN network: a unified embedding table over specials+relations+entities,
// L graph-attention layers whose fully-connected attention carries learned
// per-edge-type key/value biases, and a prediction head tied to the embedding
// table. Variants: hete (per-type biases), homo (one shared bias for every
// edge), complete (no biases, plain attention).

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gran/checkpoint.hpp"
#include "gran/graph.hpp"
#include "gran/optim.hpp"
#include "gran/tensor.hpp"

namespace gran {

enum class Variant : std::uint8_t { hete, homo, complete };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::hete: return "hete";
    case Variant::homo: return "homo";
    case Variant::complete: return "complete";
  }
  throw input_error("bad variant");
}

inline Variant parse_variant(const std::string& s) {
  if (s == "hete") return Variant::hete;
  if (s == "homo") return Variant::homo;
  if (s == "complete") return Variant::complete;
  throw input_error("unknown variant '" + s + "' (expected hete|homo|complete)");
}

struct GranConfig {
  int layers = 12;
  int heads = 4;
  int hidden = 256;
  int ffn_mult = 4;
  double dropout = 0.2;
  double eps_entity = 0.9;
  double eps_relation = 0.0;
  Variant variant = Variant::hete;
  bool positional = false;
  int max_vertices = 19;  // rows of the positional table when enabled

  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers < 1 || heads < 1 || hidden < 1 || ffn_mult < 1)
      throw input_error("config: layers/heads/hidden/ffn_mult must be positive");
    if (hidden % heads != 0)
      throw input_error("config: hidden " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    if (dropout < 0.0 || dropout >= 1.0) throw input_error("config: dropout must lie in [0,1)");
    if (eps_entity < 0.0 || eps_entity >= 1.0 || eps_relation < 0.0 || eps_relation >= 1.0)
      throw input_error("config: smoothing rates must lie in [0,1)");
  }
};

// Edge code -> edge-bias table row; -1 selects the zero pair.
inline std::array<int, kEdgeCodes> bias_rows(Variant v) {
  switch (v) {
    case Variant::hete: return {-1, 0, 1, 2, 3};
    case Variant::homo: return {-1, 0, 0, 0, 0};
    case Variant::complete: return {-1, -1, -1, -1, -1};
  }
  throw input_error("bad variant");
}

// ---------------------------------------------------------------------------
// parameters

template <typename S>
struct GranParams {
  GranConfig cfg;
  std::uint32_t n_relations = 0;
  std::uint32_t n_entities = 0;
  ParamStore<S> store;

  std::uint32_t vocab_size() const { return Vocabulary::kSpecials + n_relations + n_entities; }
  std::uint32_t relation_begin() const { return Vocabulary::kSpecials; }
  std::uint32_t entity_begin() const { return Vocabulary::kSpecials + n_relations; }

  Tensor<S>& p(const std::string& name) { return store.at(name); }
  const Tensor<S>& p(const std::string& name) const { return store.at(name); }

  static std::string lp(int layer, const char* suffix) {
    return "layer." + std::to_string(layer) + "." + suffix;
  }

  static GranParams init(GranConfig cfg, std::uint32_t n_rel, std::uint32_t n_ent,
                         std::uint64_t seed) {
    cfg.validate();
    GranParams P;
    P.cfg = cfg;
    P.n_relations = n_rel;
    P.n_entities = n_ent;
    Rng rng(mix_seed(seed, "param-init"));
    const std::size_t d = std::size_t(cfg.hidden);
    const std::size_t dz = std::size_t(cfg.head_dim());
    const std::size_t ffn = d * std::size_t(cfg.ffn_mult);
    const std::size_t v = P.vocab_size();

    auto normal = [&](Shape shape) {
      std::vector<S> data(shape_numel(shape));
      for (auto& x : data) x = S(0.02 * rng.normal());
      return Tensor<S>::from(std::move(shape), std::move(data));
    };
    auto zeros = [](Shape shape) { return Tensor<S>::zeros(std::move(shape)); };
    auto ones = [](Shape shape) { return Tensor<S>::full(std::move(shape), S(1)); };

    P.store.add("embed.table", normal({v, d}));
    if (cfg.positional) P.store.add("embed.pos", normal({std::size_t(cfg.max_vertices), d}));
    for (int l = 0; l < cfg.layers; ++l) {
      P.store.add(lp(l, "attn.Wq"), normal({d, d}));
      P.store.add(lp(l, "attn.Wk"), normal({d, d}));
      P.store.add(lp(l, "attn.Wv"), normal({d, d}));
      P.store.add(lp(l, "attn.Wo"), normal({d, d}));
      P.store.add(lp(l, "attn_ln.gain"), ones({d}));
      P.store.add(lp(l, "attn_ln.bias"), zeros({d}));
      P.store.add(lp(l, "ffn.W1"), normal({d, ffn}));
      P.store.add(lp(l, "ffn.b1"), zeros({ffn}));
      P.store.add(lp(l, "ffn.W2"), normal({ffn, d}));
      P.store.add(lp(l, "ffn.b2"), zeros({d}));
      P.store.add(lp(l, "ffn_ln.gain"), ones({d}));
      P.store.add(lp(l, "ffn_ln.bias"), zeros({d}));
    }
    // 4 key/value bias pairs, one per edge type, shared by all layers and heads.
    P.store.add("edge_bias.K", zeros({4, dz}));
    P.store.add("edge_bias.V", zeros({4, dz}));
    P.store.add("head.W1", normal({d, d}));
    P.store.add("head.b1", zeros({d}));
    P.store.add("head.b2", zeros({v}));
    return P;
  }
};

// The (key, value) bias pair the active variant assigns to an edge-type code.
template <typename S>
std::pair<std::vector<S>, std::vector<S>> resolve_bias(const GranParams<S>& params, int code) {
  if (code < 0 || code >= kEdgeCodes)
    throw input_error("resolve_bias: unknown edge-type code " + std::to_string(code));
  const int row = bias_rows(params.cfg.variant)[std::size_t(code)];
  const std::size_t dz = std::size_t(params.cfg.head_dim());
  if (row < 0) return {std::vector<S>(dz, S(0)), std::vector<S>(dz, S(0))};
  const auto k = params.p("edge_bias.K").data();
  const auto v = params.p("edge_bias.V").data();
  return {std::vector<S>(k.begin() + row * dz, k.begin() + (row + 1) * dz),
          std::vector<S>(v.begin() + row * dz, v.begin() + (row + 1) * dz)};
}

// ---------------------------------------------------------------------------
// edge-bias attention ops
//
// Attention scores get an additive term q_i . e^K(type(i,j)) and the
// aggregated output an additive term sum_j A_ij e^V(type(i,j)). Both are
// implemented as dedicated tape ops over the shared [4, dz] bias tables.

template <typename S>
Tensor<S> edge_bias_scores(const Tensor<S>& q, const Tensor<S>& table,
                           std::shared_ptr<const std::vector<std::uint8_t>> codes,
                           std::array<int, kEdgeCodes> rows) {
  const auto& qs = q.shape();
  if (qs.size() != 3) throw input_error("edge_bias_scores: q must be [B,k,dz]");
  const std::size_t b = qs[0], k = qs[1], dz = qs[2];
  if (table.shape() != Shape{4, dz}) throw input_error("edge_bias_scores: bad bias table shape");
  if (codes->size() != b * k * k) throw input_error("edge_bias_scores: bad code matrix size");
  std::vector<S> out(b * k * k);
  const S* qd = q.data().data();
  const S* td = table.data().data();
  for (std::size_t bi = 0; bi < b * k; ++bi) {
    const S* qv = qd + bi * dz;
    S dots[kEdgeCodes] = {S(0)};
    for (int c = 1; c < kEdgeCodes; ++c) {
      const int r = rows[std::size_t(c)];
      if (r < 0) continue;
      S acc = 0;
      const S* tv = td + std::size_t(r) * dz;
      for (std::size_t l = 0; l < dz; ++l) acc += qv[l] * tv[l];
      dots[c] = acc;
    }
    const std::uint8_t* cd = codes->data() + bi * k;
    S* od = out.data() + bi * k;
    for (std::size_t j = 0; j < k; ++j) od[j] = dots[cd[j]];
  }
  return make_op<S>({b, k, k}, std::move(out), {q, table},
                    [qn = q.node(), tn = table.node(), codes, rows, b, k, dz](auto& self) {
                      if (qn->requires_grad) qn->ensure_grad();
                      if (tn->requires_grad) tn->ensure_grad();
                      for (std::size_t bi = 0; bi < b * k; ++bi) {
                        const std::uint8_t* cd = codes->data() + bi * k;
                        const S* g = self.grad.data() + bi * k;
                        S wsum[kEdgeCodes] = {S(0)};
                        for (std::size_t j = 0; j < k; ++j) wsum[cd[j]] += g[j];
                        for (int c = 1; c < kEdgeCodes; ++c) {
                          const int r = rows[std::size_t(c)];
                          if (r < 0 || wsum[c] == S(0)) continue;
                          const S w = wsum[c];
                          if (qn->requires_grad) {
                            S* dq = qn->grad.data() + bi * dz;
                            const S* tv = tn->data.data() + std::size_t(r) * dz;
                            for (std::size_t l = 0; l < dz; ++l) dq[l] += w * tv[l];
                          }
                          if (tn->requires_grad) {
                            S* dt = tn->grad.data() + std::size_t(r) * dz;
                            const S* qv = qn->data.data() + bi * dz;
                            for (std::size_t l = 0; l < dz; ++l) dt[l] += w * qv[l];
                          }
                        }
                      }
                    });
}

template <typename S>
Tensor<S> edge_bias_values(const Tensor<S>& attn, const Tensor<S>& table,
                           std::shared_ptr<const std::vector<std::uint8_t>> codes,
                           std::array<int, kEdgeCodes> rows) {
  const auto& as = attn.shape();
  if (as.size() != 3 || as[1] != as[2]) throw input_error("edge_bias_values: attn must be [B,k,k]");
  const std::size_t b = as[0], k = as[1];
  const std::size_t dz = table.shape().back();
  if (table.shape() != Shape{4, dz}) throw input_error("edge_bias_values: bad bias table shape");
  if (codes->size() != b * k * k) throw input_error("edge_bias_values: bad code matrix size");
  std::vector<S> out(b * k * dz, S(0));
  const S* ad = attn.data().data();
  const S* td = table.data().data();
  for (std::size_t bi = 0; bi < b * k; ++bi) {
    const S* av = ad + bi * k;
    const std::uint8_t* cd = codes->data() + bi * k;
    S wsum[kEdgeCodes] = {S(0)};
    for (std::size_t j = 0; j < k; ++j) wsum[cd[j]] += av[j];
    S* ov = out.data() + bi * dz;
    for (int c = 1; c < kEdgeCodes; ++c) {
      const int r = rows[std::size_t(c)];
      if (r < 0 || wsum[c] == S(0)) continue;
      const S* tv = td + std::size_t(r) * dz;
      for (std::size_t l = 0; l < dz; ++l) ov[l] += wsum[c] * tv[l];
    }
  }
  return make_op<S>({b, k, dz}, std::move(out), {attn, table},
                    [an = attn.node(), tn = table.node(), codes, rows, b, k, dz](auto& self) {
                      if (an->requires_grad) an->ensure_grad();
                      if (tn->requires_grad) tn->ensure_grad();
                      for (std::size_t bi = 0; bi < b * k; ++bi) {
                        const std::uint8_t* cd = codes->data() + bi * k;
                        const S* g = self.grad.data() + bi * dz;
                        S dots[kEdgeCodes] = {S(0)};
                        for (int c = 1; c < kEdgeCodes; ++c) {
                          const int r = rows[std::size_t(c)];
                          if (r < 0) continue;
                          S acc = 0;
                          const S* tv = tn->data.data() + std::size_t(r) * dz;
                          for (std::size_t l = 0; l < dz; ++l) acc += g[l] * tv[l];
                          dots[c] = acc;
                        }
                        if (an->requires_grad) {
                          S* da = an->grad.data() + bi * k;
                          for (std::size_t j = 0; j < k; ++j) da[j] += dots[cd[j]];
                        }
                        if (tn->requires_grad) {
                          const S* av = an->data.data() + bi * k;
                          S wsum[kEdgeCodes] = {S(0)};
                          for (std::size_t j = 0; j < k; ++j) wsum[cd[j]] += av[j];
                          for (int c = 1; c < kEdgeCodes; ++c) {
                            const int r = rows[std::size_t(c)];
                            if (r < 0 || wsum[c] == S(0)) continue;
                            S* dt = tn->grad.data() + std::size_t(r) * dz;
                            for (std::size_t l = 0; l < dz; ++l) dt[l] += wsum[c] * g[l];
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// batching

// Graphs padded to a common vertex count with [PAD]; padded columns are
// masked out of the attention softmax.
struct GraphBatch {
  std::size_t batch = 0;
  std::size_t k = 0;  // padded vertex count
  std::shared_ptr<std::vector<std::uint32_t>> ids;       // batch*k
  std::shared_ptr<std::vector<std::uint8_t>> codes;      // batch*k*k
  std::shared_ptr<std::vector<std::uint32_t>> mask_pos;  // batch
  std::vector<std::uint32_t> real_k;                     // batch
  std::vector<std::uint8_t> entity_class;                // batch
  std::vector<std::uint32_t> answers;                    // batch, global vocab ids

  bool needs_padding() const {
    for (auto rk : real_k)
      if (rk != k) return true;
    return false;
  }
};

inline GraphBatch pack_graphs(const std::vector<HeteroGraph>& graphs,
                              const std::vector<std::uint32_t>& answers = {}) {
  if (graphs.empty()) throw input_error("pack_graphs: empty batch");
  GraphBatch gb;
  gb.batch = graphs.size();
  for (const auto& g : graphs) gb.k = std::max(gb.k, g.k());
  auto ids = std::make_shared<std::vector<std::uint32_t>>(gb.batch * gb.k, Vocabulary::kPadId);
  auto codes = std::make_shared<std::vector<std::uint8_t>>(gb.batch * gb.k * gb.k, kEdgeNone);
  auto mask_pos = std::make_shared<std::vector<std::uint32_t>>(gb.batch, 0);
  for (std::size_t b = 0; b < gb.batch; ++b) {
    const auto& g = graphs[b];
    const std::size_t k = g.k();
    std::size_t masks = 0;
    for (std::size_t i = 0; i < k; ++i) {
      (*ids)[b * gb.k + i] = g.vertices[i];
      if (g.vertices[i] == Vocabulary::kMaskId) {
        (*mask_pos)[b] = std::uint32_t(i);
        ++masks;
      }
      for (std::size_t j = 0; j < k; ++j)
        (*codes)[(b * gb.k + i) * gb.k + j] = g.edge(i, j);
    }
    if (masks != 1)
      throw contract_error("pack_graphs: graph must contain exactly one [MASK] vertex, found " +
                           std::to_string(masks));
    gb.real_k.push_back(std::uint32_t(k));
    gb.entity_class.push_back(
        g.vertex_types[(*mask_pos)[b]] == VertexType::entity ? std::uint8_t(1) : std::uint8_t(0));
  }
  gb.ids = std::move(ids);
  gb.codes = std::move(codes);
  gb.mask_pos = std::move(mask_pos);
  gb.answers = answers;
  if (!gb.answers.empty() && gb.answers.size() != gb.batch)
    throw input_error("pack_graphs: answer count mismatch");
  return gb;
}

inline GraphBatch pack_instances(const std::vector<Fact>& facts,
                                 const std::vector<MaskedInstance>& instances,
                                 const std::vector<std::uint32_t>& which) {
  std::vector<HeteroGraph> graphs;
  std::vector<std::uint32_t> answers;
  graphs.reserve(which.size());
  for (auto idx : which) {
    const auto& inst = instances.at(idx);
    graphs.push_back(build_graph(facts.at(inst.fact), inst.slot));
    answers.push_back(inst.answer);
  }
  return pack_graphs(graphs, answers);
}

// ---------------------------------------------------------------------------
// forward

template <typename S>
struct ForwardResult {
  Tensor<S> entity_logits;    // [n_entity_rows, |E|]
  Tensor<S> relation_logits;  // [n_relation_rows, |R|]
  std::vector<std::uint32_t> entity_rows;    // batch rows in order of logits rows
  std::vector<std::uint32_t> relation_rows;
};

namespace detail {

// One multi-head edge-biased attention sub-layer on [B,k,d] states.
template <typename S>
Tensor<S> attention_sublayer(GranParams<S>& P, int layer, const Tensor<S>& x,
                             const GraphBatch& gb, const Tensor<S>& attn_mask, bool training,
                             Rng* rng) {
  const auto rows = bias_rows(P.cfg.variant);
  const std::size_t dz = std::size_t(P.cfg.head_dim());
  const S inv_sqrt_dz = S(1.0 / std::sqrt(double(dz)));
  Tensor<S> q = matmul(x, P.p(GranParams<S>::lp(layer, "attn.Wq")));
  Tensor<S> kk = matmul(x, P.p(GranParams<S>::lp(layer, "attn.Wk")));
  Tensor<S> v = matmul(x, P.p(GranParams<S>::lp(layer, "attn.Wv")));
  std::vector<Tensor<S>> heads;
  heads.reserve(std::size_t(P.cfg.heads));
  for (int h = 0; h < P.cfg.heads; ++h) {
    Tensor<S> qh = slice_last(q, std::size_t(h) * dz, dz);
    Tensor<S> kh = slice_last(kk, std::size_t(h) * dz, dz);
    Tensor<S> vh = slice_last(v, std::size_t(h) * dz, dz);
    Tensor<S> scores = matmul(qh, transpose(kh));
    scores = add(scores, edge_bias_scores(qh, P.p("edge_bias.K"), gb.codes, rows));
    scores = scale(scores, inv_sqrt_dz);
    if (attn_mask.defined()) scores = add(scores, attn_mask);
    Tensor<S> probs = softmax(scores, -1);
    if (training) probs = dropout(probs, P.cfg.dropout, true, *rng);
    Tensor<S> zh = add(matmul(probs, vh), edge_bias_values(probs, P.p("edge_bias.V"), gb.codes, rows));
    heads.push_back(std::move(zh));
  }
  Tensor<S> z = concat_last(heads);
  return matmul(z, P.p(GranParams<S>::lp(layer, "attn.Wo")));
}

template <typename S>
Tensor<S> encode_batch(GranParams<S>& P, const GraphBatch& gb, bool training, Rng* rng) {
  if (training && !rng) throw contract_error("forward: training mode needs an rng");
  const std::size_t d = std::size_t(P.cfg.hidden);
  Tensor<S> x = reshape(gather_rows(P.p("embed.table"), gb.ids), {gb.batch, gb.k, d});
  if (P.cfg.positional) {
    if (gb.k > std::size_t(P.cfg.max_vertices))
      throw input_error("forward: graph has " + std::to_string(gb.k) +
                        " vertices but the positional table holds " +
                        std::to_string(P.cfg.max_vertices));
    auto pos_ids = std::make_shared<std::vector<std::uint32_t>>();
    pos_ids->reserve(gb.batch * gb.k);
    for (std::size_t b = 0; b < gb.batch; ++b)
      for (std::size_t i = 0; i < gb.k; ++i) pos_ids->push_back(std::uint32_t(i));
    x = add(x, reshape(gather_rows(P.p("embed.pos"), pos_ids), {gb.batch, gb.k, d}));
  }
  Tensor<S> attn_mask;
  if (gb.needs_padding()) {
    std::vector<S> m(gb.batch * gb.k * gb.k, S(0));
    for (std::size_t b = 0; b < gb.batch; ++b)
      for (std::size_t i = 0; i < gb.k; ++i)
        for (std::size_t j = gb.real_k[b]; j < gb.k; ++j)
          m[(b * gb.k + i) * gb.k + j] = S(-1e30);
    attn_mask = Tensor<S>::from({gb.batch, gb.k, gb.k}, std::move(m));
  }
  for (int l = 0; l < P.cfg.layers; ++l) {
    Tensor<S> attn = attention_sublayer(P, l, x, gb, attn_mask, training, rng);
    if (training) attn = dropout(attn, P.cfg.dropout, true, *rng);
    x = layer_norm(add(x, attn), P.p(GranParams<S>::lp(l, "attn_ln.gain")),
                   P.p(GranParams<S>::lp(l, "attn_ln.bias")));
    Tensor<S> f = add(matmul(x, P.p(GranParams<S>::lp(l, "ffn.W1"))),
                      P.p(GranParams<S>::lp(l, "ffn.b1")));
    f = gelu(f);
    f = add(matmul(f, P.p(GranParams<S>::lp(l, "ffn.W2"))), P.p(GranParams<S>::lp(l, "ffn.b2")));
    if (training) f = dropout(f, P.cfg.dropout, true, *rng);
    x = layer_norm(add(x, f), P.p(GranParams<S>::lp(l, "ffn_ln.gain")),
                   P.p(GranParams<S>::lp(l, "ffn_ln.bias")));
  }
  return x;
}

// W2^T (W1 h + b1) + b2 restricted to one candidate class, with W2 the
// embedding table itself (weight tying).
template <typename S>
Tensor<S> head_logits(GranParams<S>& P, const Tensor<S>& u, std::uint32_t row_begin,
                      std::uint32_t rows) {
  Tensor<S> table = row_range(P.p("embed.table"), row_begin, rows);
  Tensor<S> bias = row_range(P.p("head.b2"), row_begin, rows);
  return add(matmul(u, transpose(table)), bias);
}

}  // namespace detail

template <typename S>
ForwardResult<S> forward_batch(GranParams<S>& P, const GraphBatch& gb, bool training = false,
                               Rng* rng = nullptr) {
  Tensor<S> x = detail::encode_batch(P, gb, training, rng);
  Tensor<S> h = select_positions(x, gb.mask_pos);
  Tensor<S> u = add(matmul(h, P.p("head.W1")), P.p("head.b1"));
  ForwardResult<S> out;
  for (std::uint32_t b = 0; b < gb.batch; ++b)
    (gb.entity_class[b] ? out.entity_rows : out.relation_rows).push_back(b);
  if (!out.entity_rows.empty()) {
    Tensor<S> ue = out.entity_rows.size() == gb.batch ? u : gather_rows(u, out.entity_rows);
    out.entity_logits = detail::head_logits(P, ue, P.entity_begin(), P.n_entities);
  }
  if (!out.relation_rows.empty()) {
    Tensor<S> ur = out.relation_rows.size() == gb.batch ? u : gather_rows(u, out.relation_rows);
    out.relation_logits = detail::head_logits(P, ur, P.relation_begin(), P.n_relations);
  }
  return out;
}

// Logits over the masked slot's candidate class for a single graph.
template <typename S>
Tensor<S> forward(GranParams<S>& P, const HeteroGraph& g, bool training = false,
                  Rng* rng = nullptr) {
  GraphBatch gb = pack_graphs({g});
  ForwardResult<S> r = forward_batch(P, gb, training, rng);
  Tensor<S> logits = gb.entity_class[0] ? r.entity_logits : r.relation_logits;
  return reshape(logits, {logits.size()});
}

// Single-graph, single-head edge-biased attention (one layer's projections).
template <typename S>
Tensor<S> edge_biased_attention(GranParams<S>& P, int layer, int head, const Tensor<S>& x,
                                const HeteroGraph& g) {
  if (x.rank() != 2 || x.shape()[0] != g.k() || x.shape()[1] != std::size_t(P.cfg.hidden))
    throw input_error("edge_biased_attention: x must be [k,d]");
  const auto rows = bias_rows(P.cfg.variant);
  const std::size_t dz = std::size_t(P.cfg.head_dim());
  auto codes = std::make_shared<const std::vector<std::uint8_t>>(g.edge_types);
  Tensor<S> xb = reshape(x, {std::size_t(1), g.k(), std::size_t(P.cfg.hidden)});
  Tensor<S> qh = slice_last(matmul(xb, P.p(GranParams<S>::lp(layer, "attn.Wq"))),
                            std::size_t(head) * dz, dz);
  Tensor<S> kh = slice_last(matmul(xb, P.p(GranParams<S>::lp(layer, "attn.Wk"))),
                            std::size_t(head) * dz, dz);
  Tensor<S> vh = slice_last(matmul(xb, P.p(GranParams<S>::lp(layer, "attn.Wv"))),
                            std::size_t(head) * dz, dz);
  Tensor<S> scores = matmul(qh, transpose(kh));
  scores = add(scores, edge_bias_scores(qh, P.p("edge_bias.K"), codes, rows));
  scores = scale(scores, S(1.0 / std::sqrt(double(dz))));
  Tensor<S> probs = softmax(scores, -1);
  Tensor<S> zh = add(matmul(probs, vh), edge_bias_values(probs, P.p("edge_bias.V"), codes, rows));
  return reshape(zh, {g.k(), dz});
}

// One full graph-attention layer on [k,d] states (no padding, eval dropout).
template <typename S>
Tensor<S> gran_layer(GranParams<S>& P, int layer, const Tensor<S>& x, const HeteroGraph& g,
                     bool training = false, Rng* rng = nullptr) {
  if (x.rank() != 2 || x.shape()[0] != g.k() || x.shape()[1] != std::size_t(P.cfg.hidden))
    throw input_error("gran_layer: x must be [k,d]");
  GraphBatch gb;
  gb.batch = 1;
  gb.k = g.k();
  gb.ids = std::make_shared<std::vector<std::uint32_t>>(g.vertices);
  gb.codes = std::make_shared<std::vector<std::uint8_t>>(g.edge_types);
  gb.mask_pos = std::make_shared<std::vector<std::uint32_t>>(1, 0);
  gb.real_k = {std::uint32_t(g.k())};
  Tensor<S> xb = reshape(x, {std::size_t(1), g.k(), std::size_t(P.cfg.hidden)});
  Tensor<S> attn = detail::attention_sublayer(P, layer, xb, gb, Tensor<S>(), training, rng);
  if (training) attn = dropout(attn, P.cfg.dropout, true, *rng);
  Tensor<S> y = layer_norm(add(xb, attn), P.p(GranParams<S>::lp(layer, "attn_ln.gain")),
                           P.p(GranParams<S>::lp(layer, "attn_ln.bias")));
  Tensor<S> f = add(matmul(y, P.p(GranParams<S>::lp(layer, "ffn.W1"))),
                    P.p(GranParams<S>::lp(layer, "ffn.b1")));
  f = gelu(f);
  f = add(matmul(f, P.p(GranParams<S>::lp(layer, "ffn.W2"))), P.p(GranParams<S>::lp(layer, "ffn.b2")));
  if (training) f = dropout(f, P.cfg.dropout, true, *rng);
  y = layer_norm(add(y, f), P.p(GranParams<S>::lp(layer, "ffn_ln.gain")),
                 P.p(GranParams<S>::lp(layer, "ffn_ln.bias")));
  return reshape(y, {g.k(), std::size_t(P.cfg.hidden)});
}

// ---------------------------------------------------------------------------
// loss

// Smoothed one-hot label: 1-eps on the target, eps/(C-1) elsewhere.
template <typename S>
Tensor<S> smoothed_label(std::size_t c, std::size_t target, double eps) {
  if (eps < 0.0 || eps >= 1.0) throw input_error("label smoothing rate must lie in [0,1)");
  if (target >= c) throw contract_error("smoothed_label: target outside candidate range");
  // a single-candidate class leaves nothing to smooth over
  std::vector<S> y(c, c > 1 ? S(eps / double(c - 1)) : S(0));
  y[target] = c > 1 ? S(1.0 - eps) : S(1);
  return Tensor<S>::from({c}, std::move(y));
}

// Cross-entropy of one instance against its smoothed label.
template <typename S>
Tensor<S> loss(const Tensor<S>& logits, std::size_t answer, double eps) {
  return soft_cross_entropy(logits, smoothed_label<S>(logits.size(), answer, eps));
}

// Fused smoothed cross-entropy summed over rows; avoids materializing dense
// label matrices for large candidate classes. Gradient per row is
// softmax(logits) - y.
template <typename S>
Tensor<S> smoothed_ce_sum(const Tensor<S>& logits,
                          std::shared_ptr<const std::vector<std::uint32_t>> golds, double eps) {
  if (eps < 0.0 || eps >= 1.0) throw input_error("label smoothing rate must lie in [0,1)");
  if (logits.rank() != 2) throw input_error("smoothed_ce_sum: logits must be [n,C]");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (golds->size() != n) throw input_error("smoothed_ce_sum: gold count mismatch");
  const S off_weight = c > 1 ? S(eps / double(c - 1)) : S(0);
  const S on_weight = c > 1 ? S(1.0 - eps) : S(1);
  const S* ld = logits.data().data();
  auto lses = std::make_shared<std::vector<S>>(n);
  S total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const S* row = ld + r * c;
    const std::size_t gold = (*golds)[r];
    if (gold >= c) throw contract_error("smoothed_ce_sum: gold index outside candidate range");
    S mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S denom = 0, lsum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      denom += std::exp(row[j] - mx);
      lsum += row[j];
    }
    const S lse = mx + std::log(denom);
    (*lses)[r] = lse;
    // sum_t y_t (lse - l_t) with y the smoothed label
    total += lse - (on_weight * row[gold] + off_weight * (lsum - row[gold]));
  }
  return make_op<S>({1}, {total}, {logits},
                    [ln = logits.node(), golds, lses, n, c, on_weight, off_weight](auto& self) {
                      ln->ensure_grad();
                      const S g = self.grad[0];
                      for (std::size_t r = 0; r < n; ++r) {
                        const S* row = ln->data.data() + r * c;
                        S* grad = ln->grad.data() + r * c;
                        const S lse = (*lses)[r];
                        const std::size_t gold = (*golds)[r];
                        for (std::size_t j = 0; j < c; ++j) {
                          const S p = std::exp(row[j] - lse);
                          const S y = j == gold ? on_weight : off_weight;
                          grad[j] += g * (p - y);
                        }
                      }
                    });
}

// Mean batch loss; `denom` is the logical batch size so micro-batches
// accumulate to the same gradients as one full batch.
template <typename S>
Tensor<S> batch_loss(GranParams<S>& P, const ForwardResult<S>& fwd, const GraphBatch& gb,
                     std::size_t denom) {
  if (gb.answers.size() != gb.batch) throw contract_error("batch_loss: batch lacks answers");
  Tensor<S> total;
  auto add_part = [&](const Tensor<S>& logits, const std::vector<std::uint32_t>& rows,
                      std::uint32_t begin, std::uint32_t count, double eps) {
    if (rows.empty()) return;
    auto golds = std::make_shared<std::vector<std::uint32_t>>();
    golds->reserve(rows.size());
    for (auto row : rows) {
      const std::uint32_t ans = gb.answers[row];
      if (ans < begin || ans >= begin + count)
        throw contract_error("batch_loss: answer id outside candidate class");
      golds->push_back(ans - begin);
    }
    Tensor<S> part = smoothed_ce_sum(logits, golds, eps);
    total = total.defined() ? add(total, part) : part;
  };
  add_part(fwd.entity_logits, fwd.entity_rows, P.entity_begin(), P.n_entities, P.cfg.eps_entity);
  add_part(fwd.relation_logits, fwd.relation_rows, P.relation_begin(), P.n_relations,
           P.cfg.eps_relation);
  return scale(total, S(1.0 / double(denom)));
}

// ---------------------------------------------------------------------------
// checkpoint meta

inline std::string config_echo(const GranConfig& cfg, std::uint32_t n_rel, std::uint32_t n_ent) {
  std::ostringstream os;
  os << "format = 1\n"
     << "variant = " << variant_name(cfg.variant) << "\n"
     << "layers = " << cfg.layers << "\n"
     << "heads = " << cfg.heads << "\n"
     << "hidden = " << cfg.hidden << "\n"
     << "ffn_mult = " << cfg.ffn_mult << "\n"
     << "dropout = " << cfg.dropout << "\n"
     << "eps_entity = " << cfg.eps_entity << "\n"
     << "eps_relation = " << cfg.eps_relation << "\n"
     << "positional = " << (cfg.positional ? 1 : 0) << "\n"
     << "max_vertices = " << cfg.max_vertices << "\n"
     << "relations = " << n_rel << "\n"
     << "entities = " << n_ent << "\n";
  return os.str();
}

inline std::map<std::string, std::string> parse_meta(const std::string& meta) {
  std::map<std::string, std::string> kv;
  std::istringstream is(meta);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

template <typename S>
Checkpoint model_checkpoint(const GranParams<S>& params, const std::string& extra_meta = "",
                            bool with_optimizer = true) {
  std::string meta = config_echo(params.cfg, params.n_relations, params.n_entities);
  meta += extra_meta;
  return checkpoint_from_store(params.store, std::move(meta), with_optimizer);
}

// Rebuilds a model from a checkpoint. The stored config echo is authoritative;
// when `expect` is supplied any disagreement is refused.
template <typename S>
GranParams<S> params_from_checkpoint(const Checkpoint& ckpt, const GranConfig* expect = nullptr) {
  auto kv = parse_meta(ckpt.meta);
  auto want = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw input_error("checkpoint meta lacks '" + key + "'");
    return it->second;
  };
  GranConfig cfg;
  cfg.variant = parse_variant(want("variant"));
  cfg.layers = std::stoi(want("layers"));
  cfg.heads = std::stoi(want("heads"));
  cfg.hidden = std::stoi(want("hidden"));
  cfg.ffn_mult = std::stoi(want("ffn_mult"));
  cfg.dropout = std::stod(want("dropout"));
  cfg.eps_entity = std::stod(want("eps_entity"));
  cfg.eps_relation = std::stod(want("eps_relation"));
  cfg.positional = want("positional") == "1";
  cfg.max_vertices = std::stoi(want("max_vertices"));
  const auto n_rel = std::uint32_t(std::stoul(want("relations")));
  const auto n_ent = std::uint32_t(std::stoul(want("entities")));
  if (expect) {
    const std::string stored = config_echo(cfg, n_rel, n_ent);
    const std::string expected = config_echo(*expect, n_rel, n_ent);
    if (stored != expected)
      throw input_error("checkpoint config mismatch:\n--- stored ---\n" + stored +
                        "--- expected ---\n" + expected);
  }
  GranParams<S> params = GranParams<S>::init(cfg, n_rel, n_ent, /*seed=*/0);
  load_into_store(ckpt, params.store);
  return params;
}

}  // namespace gran
