// Command-line front end: data preparation, training, filtered-ranking
// evaluation, and single-instance prediction over n-ary facts.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gran/gran.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const nlohmann::ordered_json& inputs, std::uint64_t seed,
                    std::uint64_t config_hash) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["created"] = iso_timestamp();
  m["version"] = kVersion;
  m["checkpoint_format"] = 1;
  m["seed"] = seed;
  {
    std::ostringstream h;
    h << "fnv1a-" << std::hex << config_hash;
    m["config_hash"] = h.str();
  }
  m["inputs"] = inputs;
  std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
  if (!os) throw gran::input_error("cannot write manifest under '" + out_dir.string() + "'");
  os << m.dump(2) << "\n";
}

// Finds a split file under `input` by stem; returns empty when absent.
fs::path find_split_file(const fs::path& input, const std::vector<std::string>& stems) {
  static const std::vector<std::string> exts{".jsonl", ".json", ".txt", ""};
  for (const auto& stem : stems)
    for (const auto& ext : exts) {
      const fs::path p = input / (stem + ext);
      if (fs::exists(p) && fs::is_regular_file(p)) return p;
    }
  return {};
}

std::vector<gran::RawFact> read_raw_split(const fs::path& file, const std::string& format,
                                          bool filter_literals) {
  std::ifstream is(file);
  if (!is) throw gran::input_error("cannot open '" + file.string() + "'");
  try {
    if (format == "canonical") return gran::parse_canonical(is);
    if (format == "jf17k") return gran::parse_jf17k(is);
    if (format == "wikipeople") return gran::parse_wikipeople(is, filter_literals);
  } catch (const gran::input_error& e) {
    throw gran::input_error(file.string() + ": " + e.what());
  }
  throw gran::input_error("unknown format '" + format + "'");
}

struct PrepareArgs {
  std::string input;
  std::string format = "canonical";
  bool filter_literals = false;
  double dev_fraction = 0.2;
  std::uint64_t seed = 42;
  std::string out;
};

int run_prepare(const PrepareArgs& args) {
  const fs::path input(args.input);
  if (!fs::exists(input)) throw gran::input_error("input '" + args.input + "' does not exist");

  std::vector<gran::RawFact> train, dev, test;
  if (fs::is_directory(input)) {
    const fs::path train_file = find_split_file(input, {"train", "n-ary_train"});
    if (train_file.empty())
      throw gran::input_error("no train split found under '" + args.input + "'");
    train = read_raw_split(train_file, args.format, args.filter_literals);
    const fs::path dev_file = find_split_file(input, {"dev", "valid", "n-ary_valid"});
    if (!dev_file.empty()) dev = read_raw_split(dev_file, args.format, args.filter_literals);
    const fs::path test_file = find_split_file(input, {"test", "n-ary_test"});
    if (!test_file.empty()) test = read_raw_split(test_file, args.format, args.filter_literals);
  } else {
    train = read_raw_split(input, args.format, args.filter_literals);
  }
  if (dev.empty() && train.size() >= 2) {
    auto [rest, held_out] = gran::split_dev(train, args.dev_fraction, args.seed);
    train = std::move(rest);
    dev = std::move(held_out);
  }

  auto vocab = gran::build_vocab({&train, &dev, &test});

  const fs::path out(args.out);
  fs::create_directories(out);
  gran::write_canonical_file((out / "train.jsonl").string(), train);
  gran::write_canonical_file((out / "dev.jsonl").string(), dev);
  gran::write_canonical_file((out / "test.jsonl").string(), test);
  gran::write_vocab_file((out / "vocab.txt").string(), vocab);

  const std::size_t all = train.size() + dev.size() + test.size();
  std::size_t higher = 0, min_arity = SIZE_MAX, max_arity = 0;
  for (const auto* split : {&train, &dev, &test})
    for (const auto& f : *split) {
      higher += f.arity() > 2;
      min_arity = std::min(min_arity, f.arity());
      max_arity = std::max(max_arity, f.arity());
    }
  std::ostringstream stats;
  stats << "all_facts: " << all << "\n"
        << "higher_arity_facts: " << higher << " ("
        << (all ? 100.0 * double(higher) / double(all) : 0.0) << "%)\n"
        << "entities: " << vocab.n_entities() << "\n"
        << "relations: " << vocab.n_relations() << "\n"
        << "train: " << train.size() << "\n"
        << "dev: " << dev.size() << "\n"
        << "test: " << test.size() << "\n"
        << "arity: " << (all ? min_arity : 0) << "-" << (all ? max_arity : 0) << "\n";
  std::ofstream sf(out / "stats.txt", std::ios::trunc);
  sf << stats.str();
  std::cout << stats.str();

  nlohmann::ordered_json inputs;
  inputs["input"] = args.input;
  inputs["format"] = args.format;
  inputs["filter_literals"] = args.filter_literals;
  inputs["dev_fraction"] = args.dev_fraction;
  const std::string hash_src = args.input + "|" + args.format + "|" +
                               std::to_string(args.filter_literals) + "|" +
                               std::to_string(args.dev_fraction);
  write_manifest(out, "prepare", inputs, args.seed, gran::fnv1a(hash_src));
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out_dir;
  bool combine_dev = false;
  int eval_every = 0;
  double grad_clip = 0.0;
};

int run_train(const TrainArgs& args) {
  gran::TrainPlan plan = gran::load_train_config(args.config);
  if (plan.dataset_dir.empty()) throw gran::input_error("config: 'dataset' key is required");
  plan.combine_dev = args.combine_dev;
  plan.eval_every = args.eval_every;
  plan.grad_clip = args.grad_clip;

  auto bundle = gran::DatasetBundle::load(plan.dataset_dir);
  fs::create_directories(args.out_dir);

  std::ifstream cfg_file(args.config);
  const std::string cfg_bytes((std::istreambuf_iterator<char>(cfg_file)),
                              std::istreambuf_iterator<char>());
  nlohmann::ordered_json inputs;
  inputs["config"] = args.config;
  inputs["dataset"] = plan.dataset_dir;
  inputs["variant"] = gran::variant_name(plan.cfg.variant);
  inputs["combine_dev"] = args.combine_dev;
  inputs["eval_every"] = args.eval_every;
  inputs["grad_clip"] = args.grad_clip;
  write_manifest(args.out_dir, "train", inputs, plan.seed, gran::fnv1a(cfg_bytes));

  auto result = gran::run_training<float>(plan, bundle, args.out_dir, &std::cout);
  std::cout << "trained " << result.steps << " steps\n";
  std::cout << "last checkpoint: " << result.last_checkpoint << "\n";
  if (!result.best_checkpoint.empty())
    std::cout << "best checkpoint: " << result.best_checkpoint << " (dev entity MRR "
              << result.best_dev_mrr << ")\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string categories = "all";
  std::size_t batch = 128;
  int threads = 1;
  std::string out_dir;
};

int run_eval(const EvalArgs& args) {
  auto bundle = gran::DatasetBundle::load(args.data);
  auto params = gran::params_from_checkpoint<float>(gran::load_checkpoint(args.checkpoint));
  if (params.n_relations != bundle.vocab.n_relations() ||
      params.n_entities != bundle.vocab.n_entities())
    throw gran::input_error(
        "checkpoint vocabulary (" + std::to_string(params.n_relations) + " relations, " +
        std::to_string(params.n_entities) + " entities) does not match the dataset (" +
        std::to_string(bundle.vocab.n_relations()) + ", " +
        std::to_string(bundle.vocab.n_entities()) + "); refusing to evaluate");

  const std::vector<gran::Fact>* facts = nullptr;
  if (args.split == "train") facts = &bundle.train;
  else if (args.split == "dev") facts = &bundle.dev;
  else if (args.split == "test") facts = &bundle.test;
  else throw gran::input_error("unknown split '" + args.split + "'");
  if (facts->empty()) throw gran::input_error("split '" + args.split + "' is empty");

  gran::EvalSettings settings;
  settings.batch = args.batch;
  settings.threads = args.threads;
  if (args.categories != "all") {
    settings.categories.clear();
    std::istringstream ss(args.categories);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) settings.categories.push_back(gran::parse_category(item));
    if (settings.categories.empty()) throw gran::input_error("no categories selected");
  }

  auto metrics = gran::evaluate(params, *facts, bundle.filter, settings);
  const std::string header = "split: " + args.split + "\n" +
                             gran::config_echo(params.cfg, params.n_relations, params.n_entities);
  const std::string report = gran::render_report(metrics, header);
  std::cout << report;
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    std::ofstream rf(fs::path(args.out_dir) / "report.txt", std::ios::trunc);
    rf << report;
    nlohmann::ordered_json inputs;
    inputs["checkpoint"] = args.checkpoint;
    inputs["data"] = args.data;
    inputs["split"] = args.split;
    inputs["categories"] = args.categories;
    inputs["threads"] = args.threads;
    write_manifest(args.out_dir, "eval", inputs, 0,
                   gran::fnv1a(args.checkpoint + "|" + args.split + "|" + args.categories));
  }
  return 0;
}

struct PredictArgs {
  std::string checkpoint;
  std::string data;
  std::string fact_json;
  std::string mask_slot = "object";
  std::size_t topk = 10;
};

gran::Slot parse_mask_slot(const std::string& s, std::size_t m) {
  if (s == "subject") return {gran::SlotKind::subject, 0};
  if (s == "object") return {gran::SlotKind::object, 0};
  if (s == "relation") return {gran::SlotKind::relation, 0};
  const auto colon = s.find(':');
  if (colon != std::string::npos) {
    const std::string kind = s.substr(0, colon);
    int idx = 0;
    try {
      idx = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw gran::input_error("bad mask slot index in '" + s + "'");
    }
    if (idx < 1 || std::size_t(idx) > m)
      throw gran::input_error("mask slot '" + s + "' outside the fact's " + std::to_string(m) +
                              " attribute-value pairs");
    if (kind == "attr") return {gran::SlotKind::attr, std::uint16_t(idx - 1)};
    if (kind == "value") return {gran::SlotKind::value, std::uint16_t(idx - 1)};
  }
  throw gran::input_error("unknown mask slot '" + s +
                          "' (expected subject|relation|object|attr:N|value:N)");
}

int run_predict(const PredictArgs& args) {
  auto vocab = gran::read_vocab_file((fs::path(args.data) / "vocab.txt").string());
  auto params = gran::params_from_checkpoint<float>(gran::load_checkpoint(args.checkpoint));
  if (params.n_relations != vocab.n_relations() || params.n_entities != vocab.n_entities())
    throw gran::input_error("checkpoint vocabulary does not match the dataset; refusing");

  const gran::RawFact raw = gran::parse_canonical_record(args.fact_json, 1);
  const gran::Fact fact = vocab.resolve(raw);
  const gran::Slot slot = parse_mask_slot(args.mask_slot, fact.aux.size());

  gran::autograd_pause no_tape;
  auto logits = gran::forward(params, gran::build_graph(fact, slot));
  auto probs = gran::softmax(logits);
  const std::uint32_t begin =
      gran::slot_holds_entity(slot) ? params.entity_begin() : params.relation_begin();
  std::vector<std::pair<float, std::uint32_t>> ranked;
  ranked.reserve(probs.size());
  for (std::uint32_t c = 0; c < probs.size(); ++c) ranked.emplace_back(probs.data()[c], c);
  const std::size_t k = std::min(args.topk, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + long(k), ranked.end(),
                    [](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first > b.first : a.second < b.second;
                    });
  std::cout.precision(6);
  for (std::size_t i = 0; i < k; ++i)
    std::cout << vocab.name(begin + ranked[i].second) << "\t" << std::fixed << ranked[i].first
              << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"link prediction over n-ary relational facts"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "convert raw data into training artifacts");
  prepare->add_option("--input", prep.input, "raw data file or directory")->required();
  prepare->add_option("--format", prep.format, "canonical|jf17k|wikipeople")
      ->check(CLI::IsMember({"canonical", "jf17k", "wikipeople"}));
  prepare->add_flag("--filter-literals", prep.filter_literals,
                    "drop statements with non-entity values (wikipeople)");
  prepare->add_option("--dev-fraction", prep.dev_fraction,
                      "dev fraction when the source has no dev split");
  prepare->add_option("--seed", prep.seed, "dev split seed");
  prepare->add_option("--out", prep.out, "output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", train.config, "plain-text key = value config")->required();
  train_cmd->add_option("--out-dir", train.out_dir, "checkpoints and logs go here")->required();
  train_cmd->add_flag("--combine-dev", train.combine_dev, "final-run regime: train on train+dev");
  train_cmd->add_option("--eval-every", train.eval_every,
                        "evaluate dev entity MRR every N epochs");
  train_cmd->add_option("--grad-clip", train.grad_clip, "global-norm gradient clip (0 = off)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "filtered-ranking evaluation of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data, "prepared dataset directory")->required();
  eval_cmd->add_option("--split", eval.split, "train|dev|test");
  eval_cmd->add_option("--categories", eval.categories,
                       "comma list of all-entities,subject-object,aux-values,all-relations,"
                       "primary-relation, or 'all'");
  eval_cmd->add_option("--batch", eval.batch);
  eval_cmd->add_option("--threads", eval.threads);
  eval_cmd->add_option("--out-dir", eval.out_dir, "also write report.txt and manifest here");

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "rank candidates for one masked slot");
  pred_cmd->add_option("--checkpoint", pred.checkpoint)->required();
  pred_cmd->add_option("--data", pred.data, "prepared dataset directory (vocabulary)")->required();
  pred_cmd->add_option("--fact-json", pred.fact_json, "one canonical fact record")->required();
  pred_cmd->add_option("--mask-slot", pred.mask_slot, "subject|relation|object|attr:N|value:N");
  pred_cmd->add_option("--topk", pred.topk);

  try {
    app.parse(argc, argv);
    if (*prepare) return run_prepare(prep);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*pred_cmd) return run_predict(pred);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const gran::input_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const gran::contract_error& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 3;
  } catch (const gran::numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
