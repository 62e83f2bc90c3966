#pragma once

// Ingestion of n-ary facts: the canonical line-delimited format, best-effort
// converters for the JF17K and WikiPeople raw dumps, vocabulary construction,
// masked-instance generation, and the filtered-ranking index.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gran/common.hpp"

namespace gran {

// A fact before name resolution: primary triple plus ordered attribute-value
// pairs, all as strings.
struct RawFact {
  std::string subject;
  std::string relation;
  std::string object;
  std::vector<std::pair<std::string, std::string>> aux;

  std::size_t arity() const { return 2 + aux.size(); }

  bool operator==(const RawFact&) const = default;
};

// Same fact with ids resolved against a Vocabulary.
struct Fact {
  std::uint32_t subject = 0;
  std::uint32_t relation = 0;
  std::uint32_t object = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> aux;  // (attribute, value)

  std::size_t arity() const { return 2 + aux.size(); }

  bool operator==(const Fact&) const = default;
};

enum class SlotKind : std::uint8_t { subject, object, relation, attr, value };

struct Slot {
  SlotKind kind = SlotKind::subject;
  std::uint16_t index = 0;  // aux pair index for attr/value

  bool operator==(const Slot&) const = default;
};

inline bool slot_holds_entity(Slot s) {
  return s.kind == SlotKind::subject || s.kind == SlotKind::object || s.kind == SlotKind::value;
}

inline std::uint32_t slot_id(const Fact& f, Slot s) {
  switch (s.kind) {
    case SlotKind::subject: return f.subject;
    case SlotKind::object: return f.object;
    case SlotKind::relation: return f.relation;
    case SlotKind::attr: return f.aux.at(s.index).first;
    case SlotKind::value: return f.aux.at(s.index).second;
  }
  throw contract_error("slot_id: bad slot kind");
}

// Unified id space: [MASK], [PAD], then all relations, then all entities,
// each section in first-appearance order.
class Vocabulary {
 public:
  static constexpr std::uint32_t kMaskId = 0;
  static constexpr std::uint32_t kPadId = 1;
  static constexpr std::uint32_t kSpecials = 2;

  void add_relation(const std::string& name) {
    if (rel_ids_.count(name)) return;
    relations_.push_back(name);
    rel_ids_.emplace(name, std::uint32_t(kSpecials + relations_.size() - 1));
  }

  // Entity ids are offsets past the relation section, which may still grow
  // while facts are being added; the map stores ordinals and entity_id()
  // applies the final offset, so callers add all facts first and then seal.
  void add_entity(const std::string& name) {
    if (ent_ids_.count(name)) return;
    entities_.push_back(name);
    ent_ids_.emplace(name, std::uint32_t(entities_.size() - 1));
  }

  void seal() { sealed_ = true; }
  bool sealed() const { return sealed_; }

  std::uint32_t n_relations() const { return std::uint32_t(relations_.size()); }
  std::uint32_t n_entities() const { return std::uint32_t(entities_.size()); }
  std::uint32_t vocab_size() const { return kSpecials + n_relations() + n_entities(); }

  std::uint32_t relation_begin() const { return kSpecials; }
  std::uint32_t entity_begin() const { return kSpecials + n_relations(); }

  bool is_relation_id(std::uint32_t id) const {
    return id >= relation_begin() && id < entity_begin();
  }
  bool is_entity_id(std::uint32_t id) const { return id >= entity_begin() && id < vocab_size(); }

  std::uint32_t relation_id(const std::string& name) const {
    auto it = rel_ids_.find(name);
    if (it == rel_ids_.end()) throw input_error("unknown relation '" + name + "'");
    return it->second;
  }
  std::uint32_t entity_id(const std::string& name) const {
    auto it = ent_ids_.find(name);
    if (it == ent_ids_.end()) throw input_error("unknown entity '" + name + "'");
    return entity_begin() + it->second;
  }

  const std::string& name(std::uint32_t id) const {
    if (id == kMaskId) return mask_name_;
    if (id == kPadId) return pad_name_;
    if (is_relation_id(id)) return relations_[id - relation_begin()];
    if (is_entity_id(id)) return entities_[id - entity_begin()];
    throw input_error("vocabulary id " + std::to_string(id) + " out of range");
  }

  Fact resolve(const RawFact& rf) const {
    Fact f;
    f.subject = entity_id(rf.subject);
    f.relation = relation_id(rf.relation);
    f.object = entity_id(rf.object);
    f.aux.reserve(rf.aux.size());
    for (const auto& [a, v] : rf.aux) f.aux.emplace_back(relation_id(a), entity_id(v));
    return f;
  }

  RawFact unresolve(const Fact& f) const {
    RawFact rf;
    rf.subject = name(f.subject);
    rf.relation = name(f.relation);
    rf.object = name(f.object);
    for (const auto& [a, v] : f.aux) rf.aux.emplace_back(name(a), name(v));
    return rf;
  }

  void save(std::ostream& os) const {
    os << "[special]\n[MASK]\n[PAD]\n[relation]\n";
    for (const auto& r : relations_) os << r << '\n';
    os << "[entity]\n";
    for (const auto& e : entities_) os << e << '\n';
  }

  static Vocabulary load(std::istream& is) {
    Vocabulary v;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      if (line == "[special]" || line == "[relation]" || line == "[entity]") {
        section = line;
        continue;
      }
      if (section == "[special]") {
        if (line != "[MASK]" && line != "[PAD]")
          throw input_error("vocabulary line " + std::to_string(lineno) +
                            ": unexpected special token '" + line + "'");
      } else if (section == "[relation]") {
        v.add_relation(line);
      } else if (section == "[entity]") {
        v.add_entity(line);
      } else {
        throw input_error("vocabulary line " + std::to_string(lineno) + ": missing section header");
      }
    }
    v.seal();
    return v;
  }

 private:
  std::vector<std::string> relations_;
  std::vector<std::string> entities_;
  std::unordered_map<std::string, std::uint32_t> rel_ids_;  // name -> unified id
  std::unordered_map<std::string, std::uint32_t> ent_ids_;  // name -> entity ordinal
  std::string mask_name_ = "[MASK]";
  std::string pad_name_ = "[PAD]";
  bool sealed_ = false;
};

// Builds the vocabulary over all splits (train, dev, test order) with
// first-appearance ordering inside each of the relation/entity sections.
inline Vocabulary build_vocab(const std::vector<const std::vector<RawFact>*>& splits) {
  Vocabulary v;
  bool any = false;
  for (const auto* split : splits) {
    for (const auto& f : *split) {
      any = true;
      v.add_relation(f.relation);
      v.add_entity(f.subject);
      v.add_entity(f.object);
      for (const auto& [a, val] : f.aux) {
        v.add_relation(a);
        v.add_entity(val);
      }
    }
  }
  if (!any) throw input_error("build_vocab: empty fact list");
  v.seal();
  return v;
}

// ---------------------------------------------------------------------------
// canonical format: one JSON object per line with fields
// "subject", "relation", "object", "aux" (ordered list of [attribute, value]).

inline RawFact parse_canonical_record(const std::string& line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw input_error("line " + std::to_string(lineno) + ": " + e.what());
  }
  RawFact f;
  auto field = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string())
      throw input_error("line " + std::to_string(lineno) + ": missing field '" + key + "'");
    std::string s = j[key].get<std::string>();
    if (s.empty())
      throw input_error("line " + std::to_string(lineno) + ": empty name in field '" + key + "'");
    return s;
  };
  f.subject = field("subject");
  f.relation = field("relation");
  f.object = field("object");
  if (j.contains("aux") && !j["aux"].is_null()) {
    if (!j["aux"].is_array())
      throw input_error("line " + std::to_string(lineno) + ": 'aux' must be an array");
    for (const auto& pair : j["aux"]) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string() ||
          pair[0].get<std::string>().empty() || pair[1].get<std::string>().empty())
        throw input_error("line " + std::to_string(lineno) +
                          ": aux entries must be [attribute, value] string pairs");
      f.aux.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
    }
  }
  return f;
}

inline std::vector<RawFact> parse_canonical(std::istream& is) {
  std::vector<RawFact> facts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    facts.push_back(parse_canonical_record(line, lineno));
  }
  return facts;
}

inline void write_canonical_record(std::ostream& os, const RawFact& f) {
  nlohmann::ordered_json j;
  j["subject"] = f.subject;
  j["relation"] = f.relation;
  j["object"] = f.object;
  auto aux = nlohmann::ordered_json::array();
  for (const auto& [a, v] : f.aux) aux.push_back({a, v});
  j["aux"] = std::move(aux);
  os << j.dump() << '\n';
}

inline void write_canonical(std::ostream& os, const std::vector<RawFact>& facts) {
  for (const auto& f : facts) write_canonical_record(os, f);
}

// ---------------------------------------------------------------------------
// raw-format adapters

// JF17K tuples list all values of a predefined relation in attribute order.
// The first two values become the primary subject and object; the rest stay
// as attribute-value pairs. The raw dump carries no attribute names for
// positions 3+, so "<relation>#<position>" names are synthesized.
inline RawFact convert_jf17k(const std::string& relation, const std::vector<std::string>& values) {
  if (values.size() < 2)
    throw input_error("jf17k: relation '" + relation + "' has " + std::to_string(values.size()) +
                      " values; need at least 2");
  RawFact f;
  f.relation = relation;
  f.subject = values[0];
  f.object = values[1];
  for (std::size_t i = 2; i < values.size(); ++i)
    f.aux.emplace_back(relation + "#" + std::to_string(i + 1), values[i]);
  return f;
}

// One whitespace-separated tuple per line: relation then its values.
inline std::vector<RawFact> parse_jf17k(std::istream& is) {
  std::vector<RawFact> facts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string relation, tok;
    ss >> relation;
    std::vector<std::string> values;
    while (ss >> tok) values.push_back(tok);
    if (relation.empty() || values.size() < 2)
      throw input_error("jf17k line " + std::to_string(lineno) + ": need a relation and >= 2 values");
    facts.push_back(convert_jf17k(relation, values));
  }
  return facts;
}

inline bool wikidata_entity_like(const std::string& s) {
  static const std::regex re("^Q[0-9]+$");
  return std::regex_match(s, re);
}

// WikiPeople statements are JSON objects whose "<rel>_h"/"<rel>_t" keys carry
// the primary triple; remaining keys (other than "N") are attributes with one
// or more values. With filter_literals set, statements containing any
// non-entity value are dropped (the "minus" version of the dataset).
inline std::optional<RawFact> convert_wikipeople(const nlohmann::ordered_json& j,
                                                 bool filter_literals, std::size_t lineno) {
  RawFact f;
  auto as_values = [](const nlohmann::ordered_json& v) {
    std::vector<std::string> out;
    if (v.is_string()) {
      out.push_back(v.get<std::string>());
    } else if (v.is_array()) {
      for (const auto& e : v) out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
    } else {
      out.push_back(v.dump());
    }
    return out;
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "N") continue;
    if (key.size() > 2 && key.ends_with("_h")) {
      f.relation = key.substr(0, key.size() - 2);
      f.subject = as_values(value).at(0);
    } else if (key.size() > 2 && key.ends_with("_t")) {
      f.object = as_values(value).at(0);
    } else {
      for (const auto& v : as_values(value)) f.aux.emplace_back(key, v);
    }
  }
  if (f.subject.empty() || f.relation.empty() || f.object.empty())
    throw input_error("wikipeople line " + std::to_string(lineno) +
                      ": statement lacks a *_h/*_t primary triple");
  if (filter_literals) {
    if (!wikidata_entity_like(f.subject) || !wikidata_entity_like(f.object)) return std::nullopt;
    for (const auto& [a, v] : f.aux)
      if (!wikidata_entity_like(v)) return std::nullopt;
  }
  return f;
}

inline std::vector<RawFact> parse_wikipeople(std::istream& is, bool filter_literals) {
  std::vector<RawFact> facts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw input_error("wikipeople line " + std::to_string(lineno) + ": " + e.what());
    }
    if (auto f = convert_wikipeople(j, filter_literals, lineno)) facts.push_back(std::move(*f));
  }
  return facts;
}

// ---------------------------------------------------------------------------
// dev split

// Seeded partition into (train', dev) with |dev| = round(fraction * N).
// Both halves keep the original relative fact order.
template <typename FactT>
std::pair<std::vector<FactT>, std::vector<FactT>> split_dev(const std::vector<FactT>& facts,
                                                            double fraction, std::uint64_t seed) {
  if (facts.empty()) throw input_error("split_dev: empty fact list");
  if (fraction <= 0.0 || fraction >= 1.0)
    throw input_error("split_dev: fraction must lie in (0,1), got " + std::to_string(fraction));
  const std::size_t n_dev = std::size_t(std::llround(fraction * double(facts.size())));
  std::vector<std::uint32_t> idx(facts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = std::uint32_t(i);
  Rng rng(mix_seed(seed, "dev-split"));
  rng.shuffle(idx);
  std::vector<bool> in_dev(facts.size(), false);
  for (std::size_t i = 0; i < n_dev; ++i) in_dev[idx[i]] = true;
  std::pair<std::vector<FactT>, std::vector<FactT>> out;
  for (std::size_t i = 0; i < facts.size(); ++i)
    (in_dev[i] ? out.second : out.first).push_back(facts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// masked instances

struct MaskedInstance {
  std::uint32_t fact = 0;  // index into the owning split
  Slot slot;
  std::uint32_t answer = 0;
  bool entity_class = true;
};

// All 2m+3 single-slot masks of one fact.
inline std::vector<MaskedInstance> generate_instances(const Fact& f, std::uint32_t fact_idx = 0) {
  std::vector<MaskedInstance> out;
  out.reserve(f.arity() * 2 - 1);
  auto push = [&](Slot s) {
    out.push_back({fact_idx, s, slot_id(f, s), slot_holds_entity(s)});
  };
  push({SlotKind::subject, 0});
  push({SlotKind::object, 0});
  push({SlotKind::relation, 0});
  for (std::uint16_t i = 0; i < f.aux.size(); ++i) {
    push({SlotKind::attr, i});
    push({SlotKind::value, i});
  }
  return out;
}

inline std::vector<MaskedInstance> generate_all_instances(const std::vector<Fact>& facts) {
  std::vector<MaskedInstance> out;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    auto one = generate_instances(facts[i], std::uint32_t(i));
    out.insert(out.end(), one.begin(), one.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// filtered-ranking index

// Maps each masked pattern to every answer id seen for it across all splits.
// Patterns canonicalize the aux pairs by sorting, matching the set semantics
// of a fact's auxiliary descriptions.
class FilterIndex {
 public:
  void add_split(const std::vector<Fact>& facts) {
    for (const auto& f : facts)
      for (const auto& inst : generate_instances(f)) add(key_of(f, inst.slot), inst.answer);
  }

  // Deduplicates and sorts the answer sets; call once after the last split.
  void finalize() {
    for (auto& [k, answers] : map_) {
      std::sort(answers.begin(), answers.end());
      answers.erase(std::unique(answers.begin(), answers.end()), answers.end());
    }
    finalized_ = true;
  }

  // Answers known for this fact's pattern with `slot` masked. Empty when the
  // pattern was never indexed.
  const std::vector<std::uint32_t>& lookup(const Fact& f, Slot slot) const {
    if (!finalized_) throw contract_error("FilterIndex: lookup before finalize");
    auto it = map_.find(key_of(f, slot));
    return it == map_.end() ? empty_ : it->second;
  }

  std::size_t pattern_count() const { return map_.size(); }

 private:
  struct KeyHash {
    std::size_t operator()(const std::vector<std::uint32_t>& k) const {
      return std::size_t(fnv1a(k.data(), k.size() * sizeof(std::uint32_t)));
    }
  };

  static std::vector<std::uint32_t> key_of(const Fact& f, Slot slot) {
    auto id_or_mask = [&](Slot s, std::uint32_t id) {
      return s == slot ? Vocabulary::kMaskId : id;
    };
    std::vector<std::pair<std::uint32_t, std::uint32_t>> aux;
    aux.reserve(f.aux.size());
    for (std::uint16_t i = 0; i < f.aux.size(); ++i) {
      aux.emplace_back(id_or_mask({SlotKind::attr, i}, f.aux[i].first),
                       id_or_mask({SlotKind::value, i}, f.aux[i].second));
    }
    std::sort(aux.begin(), aux.end());
    std::vector<std::uint32_t> key;
    key.reserve(3 + 2 * aux.size());
    key.push_back(id_or_mask({SlotKind::relation, 0}, f.relation));
    key.push_back(id_or_mask({SlotKind::subject, 0}, f.subject));
    key.push_back(id_or_mask({SlotKind::object, 0}, f.object));
    for (const auto& [a, v] : aux) {
      key.push_back(a);
      key.push_back(v);
    }
    return key;
  }

  void add(std::vector<std::uint32_t> key, std::uint32_t answer) {
    map_[std::move(key)].push_back(answer);
  }

  std::unordered_map<std::vector<std::uint32_t>, std::vector<std::uint32_t>, KeyHash> map_;
  std::vector<std::uint32_t> empty_;
  bool finalized_ = false;
};

inline FilterIndex build_filter_index(const std::vector<const std::vector<Fact>*>& splits) {
  FilterIndex idx;
  for (const auto* s : splits) idx.add_split(*s);
  idx.finalize();
  return idx;
}

// ---------------------------------------------------------------------------
// file-level helpers

inline std::vector<RawFact> read_canonical_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw input_error("cannot open facts file '" + path + "'");
  try {
    return parse_canonical(is);
  } catch (const input_error& e) {
    throw input_error(path + ": " + e.what());
  }
}

inline void write_canonical_file(const std::string& path, const std::vector<RawFact>& facts) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw input_error("cannot open '" + path + "' for writing");
  write_canonical(os, facts);
}

inline Vocabulary read_vocab_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw input_error("cannot open vocabulary file '" + path + "'");
  return Vocabulary::load(is);
}

inline void write_vocab_file(const std::string& path, const Vocabulary& v) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw input_error("cannot open '" + path + "' for writing");
  v.save(os);
}

}  // namespace gran
