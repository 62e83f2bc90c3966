#pragma once

// End-to-end training: instance sampling, padded batching, Adam with the
// warmup/decay schedule, checkpointing, and periodic dev evaluation. All
// randomness is derived from (seed, purpose, counter), so a run can be
// resumed from a checkpoint bit-exactly.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gran/checkpoint.hpp"
#include "gran/dataset.hpp"
#include "gran/evaluation.hpp"
#include "gran/model.hpp"
#include "gran/optim.hpp"

namespace gran {

struct TrainPlan {
  std::string dataset_dir;
  GranConfig cfg;
  int epochs = 160;
  std::size_t batch = 1024;
  std::size_t micro_batch = 0;  // 0: one micro-batch per batch
  double lr = 5e-4;
  std::uint64_t seed = 42;
  int eval_every = 0;       // dev entity-MRR every N epochs (0: off)
  bool combine_dev = false;  // final-run regime: train on train+dev
  double grad_clip = 0.0;    // global-norm clip (0: off)
};

// Plain-text config: "key = value" lines, '#' comments. Unknown keys are
// rejected.
inline TrainPlan parse_train_config(std::istream& is) {
  TrainPlan plan;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw input_error("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (value.empty())
      throw input_error("config line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    try {
      if (key == "dataset") plan.dataset_dir = value;
      else if (key == "variant") plan.cfg.variant = parse_variant(value);
      else if (key == "layers") plan.cfg.layers = std::stoi(value);
      else if (key == "heads") plan.cfg.heads = std::stoi(value);
      else if (key == "hidden") plan.cfg.hidden = std::stoi(value);
      else if (key == "ffn_mult") plan.cfg.ffn_mult = std::stoi(value);
      else if (key == "dropout") plan.cfg.dropout = std::stod(value);
      else if (key == "eps_entity") plan.cfg.eps_entity = std::stod(value);
      else if (key == "eps_relation") plan.cfg.eps_relation = std::stod(value);
      else if (key == "epochs") plan.epochs = std::stoi(value);
      else if (key == "batch") plan.batch = std::size_t(std::stoul(value));
      else if (key == "micro_batch") plan.micro_batch = std::size_t(std::stoul(value));
      else if (key == "lr") plan.lr = std::stod(value);
      else if (key == "seed") plan.seed = std::stoull(value);
      else if (key == "positional") plan.cfg.positional = value == "1" || value == "true";
      else throw input_error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw input_error("config line " + std::to_string(lineno) + ": bad value '" + value + "'");
    }
  }
  if (plan.batch < 1) throw input_error("config: batch must be >= 1");
  if (plan.epochs < 0) throw input_error("config: epochs must be >= 0");
  plan.cfg.validate();
  return plan;
}

inline TrainPlan load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw input_error("cannot open config file '" + path + "'");
  return parse_train_config(is);
}

// Prepared dataset artifacts as written by `gran prepare`.
struct DatasetBundle {
  Vocabulary vocab;
  std::vector<Fact> train, dev, test;
  FilterIndex filter;

  std::size_t max_vertices() const {
    std::size_t k = 3;
    for (const auto* split : {&train, &dev, &test})
      for (const auto& f : *split) k = std::max(k, 2 * f.aux.size() + 3);
    return k;
  }

  static DatasetBundle load(const std::string& dir) {
    namespace fs = std::filesystem;
    DatasetBundle b;
    b.vocab = read_vocab_file((fs::path(dir) / "vocab.txt").string());
    auto read_split = [&](const char* name, std::vector<Fact>& out, bool required) {
      const fs::path p = fs::path(dir) / name;
      if (!fs::exists(p)) {
        if (required) throw input_error("dataset: missing '" + p.string() + "'");
        return;
      }
      for (const auto& rf : read_canonical_file(p.string())) out.push_back(b.vocab.resolve(rf));
    };
    read_split("train.jsonl", b.train, true);
    read_split("dev.jsonl", b.dev, false);
    read_split("test.jsonl", b.test, false);
    b.filter = build_filter_index({&b.train, &b.dev, &b.test});
    return b;
  }
};

// Epoch-shuffled batches of instance indices; the trailing short batch is
// kept. Mixed entity/relation instances are allowed within a batch.
inline std::vector<std::vector<std::uint32_t>> make_batches(std::size_t n_instances,
                                                            std::size_t batch, Rng& rng) {
  if (batch < 1) throw input_error("make_batches: batch must be >= 1");
  std::vector<std::uint32_t> order(n_instances);
  for (std::size_t i = 0; i < n_instances; ++i) order[i] = std::uint32_t(i);
  rng.shuffle(order);
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t at = 0; at < n_instances; at += batch) {
    const std::size_t stop = std::min(n_instances, at + batch);
    out.emplace_back(order.begin() + long(at), order.begin() + long(stop));
  }
  return out;
}

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::int64_t wall_ms = 0;
};

template <typename S = float>
class Trainer {
 public:
  Trainer(TrainPlan plan, const DatasetBundle& data)
      : plan_(std::move(plan)), data_(&data) {
    init_common();
    params_ = GranParams<S>::init(plan_.cfg, data.vocab.n_relations(), data.vocab.n_entities(),
                                  plan_.seed);
    if (total_steps_ > 0) start_epoch(0);
  }

  Trainer(TrainPlan plan, const DatasetBundle& data, const Checkpoint& resume)
      : plan_(std::move(plan)), data_(&data) {
    init_common();
    params_ = params_from_checkpoint<S>(resume, &plan_.cfg);
    if (params_.n_relations != data.vocab.n_relations() ||
        params_.n_entities != data.vocab.n_entities())
      throw input_error("resume: checkpoint vocabulary does not match the dataset");
    auto kv = parse_meta(resume.meta);
    global_step_ = kv.count("trainer.step") ? std::stoll(kv.at("trainer.step")) : 0;
    epoch_ = kv.count("trainer.epoch") ? std::stoi(kv.at("trainer.epoch")) : 0;
    const std::size_t cursor =
        kv.count("trainer.cursor") ? std::size_t(std::stoull(kv.at("trainer.cursor"))) : 0;
    if (!done()) {
      start_epoch(epoch_);
      cursor_ = cursor;
    }
  }

  bool done() const { return global_step_ >= total_steps_; }
  std::int64_t global_step() const { return global_step_; }
  std::int64_t total_steps() const { return total_steps_; }
  int epoch() const { return epoch_; }
  const LrSchedule& schedule() const { return schedule_; }
  GranParams<S>& params() { return params_; }
  const TrainPlan& plan() const { return plan_; }
  const std::vector<MaskedInstance>& instances() const { return instances_; }

  // One optimizer step (micro-batches accumulate into it).
  StepRecord step() {
    if (done()) throw contract_error("Trainer::step past the end of the plan");
    const auto t0 = std::chrono::steady_clock::now();
    if (cursor_ >= batches_.size()) start_epoch(epoch_ + 1);
    const std::vector<std::uint32_t>& batch = batches_[cursor_];
    const std::size_t micro = plan_.micro_batch ? plan_.micro_batch : batch.size();
    Rng drop_rng(mix_seed(plan_.seed, "dropout", std::uint64_t(global_step_)));
    double loss_value = 0.0;
    for (std::size_t at = 0; at < batch.size(); at += micro) {
      const std::size_t stop = std::min(batch.size(), at + micro);
      std::vector<std::uint32_t> part(batch.begin() + long(at), batch.begin() + long(stop));
      GraphBatch gb = pack_instances(*facts_, instances_, part);
      ForwardResult<S> fwd = forward_batch(params_, gb, plan_.cfg.dropout > 0.0, &drop_rng);
      Tensor<S> loss = batch_loss(params_, fwd, gb, batch.size());
      const double v = double(loss.item());
      if (!std::isfinite(v)) {
        offending_batch_ = batch;
        throw numeric_error("non-finite loss at step " + std::to_string(global_step_ + 1));
      }
      loss_value += v;
      loss.backward();
    }
    if (plan_.grad_clip > 0.0) clip_gradients();
    const double lr = lr_at(schedule_, global_step_);
    adam_step(params_.store, lr);
    ++global_step_;
    ++cursor_;
    StepRecord rec;
    rec.step = global_step_;
    rec.epoch = epoch_ + 1;
    rec.lr = lr;
    rec.loss = loss_value;
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
  }

  Checkpoint snapshot() const {
    std::ostringstream extra;
    extra << "trainer.step = " << global_step_ << "\n"
          << "trainer.epoch = " << epoch_ << "\n"
          << "trainer.cursor = " << cursor_ << "\n";
    return model_checkpoint(params_, extra.str());
  }

  double dev_entity_mrr(std::size_t eval_batch = 128, int threads = 1) {
    EvalSettings settings;
    settings.categories = {Category::all_entities};
    settings.batch = eval_batch;
    settings.threads = threads;
    Metrics m = evaluate(params_, data_->dev, data_->filter, settings);
    return m.at(Category::all_entities, ArityBucket::all).mrr();
  }

  const std::vector<std::uint32_t>& offending_batch() const { return offending_batch_; }

 private:
  void init_common() {
    plan_.cfg.validate();
    facts_ = plan_.combine_dev ? &combined_ : &data_->train;
    if (plan_.combine_dev) {
      combined_ = data_->train;
      combined_.insert(combined_.end(), data_->dev.begin(), data_->dev.end());
    }
    if (facts_->empty()) throw input_error("training: empty train split");
    const std::size_t need_k = data_->max_vertices();
    if (plan_.cfg.positional && std::size_t(plan_.cfg.max_vertices) < need_k)
      plan_.cfg.max_vertices = int(need_k);
    instances_ = generate_all_instances(*facts_);
    const std::int64_t per_epoch =
        std::int64_t((instances_.size() + plan_.batch - 1) / plan_.batch);
    total_steps_ = per_epoch * plan_.epochs;
    if (total_steps_ > 0) schedule_ = LrSchedule::make(plan_.lr, total_steps_);
  }

  void start_epoch(int e) {
    epoch_ = e;
    cursor_ = 0;
    Rng rng(mix_seed(plan_.seed, "epoch-shuffle", std::uint64_t(e)));
    batches_ = make_batches(instances_.size(), plan_.batch, rng);
  }

  void clip_gradients() {
    double norm_sq = 0.0;
    for (const auto& name : params_.store.names())
      for (S g : params_.store.at(name).grad()) norm_sq += double(g) * double(g);
    const double norm = std::sqrt(norm_sq);
    if (norm <= plan_.grad_clip) return;
    const S factor = S(plan_.grad_clip / norm);
    for (const auto& name : params_.store.names())
      for (S& g : params_.store.at(name).mutable_grad()) g *= factor;
  }

  TrainPlan plan_;
  const DatasetBundle* data_;
  std::vector<Fact> combined_;
  const std::vector<Fact>* facts_ = nullptr;
  std::vector<MaskedInstance> instances_;
  GranParams<S> params_;
  LrSchedule schedule_;
  std::vector<std::vector<std::uint32_t>> batches_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  std::int64_t global_step_ = 0;
  std::int64_t total_steps_ = 0;
  std::vector<std::uint32_t> offending_batch_;
};

struct TrainResult {
  std::string last_checkpoint;
  std::string best_checkpoint;  // empty when no dev evaluation ran
  double best_dev_mrr = -1.0;
  std::int64_t steps = 0;
};

// Full training run: writes init/last (and best, under periodic dev
// evaluation) checkpoints plus a line-delimited step log under out_dir.
template <typename S = float>
TrainResult run_training(const TrainPlan& plan, const DatasetBundle& data,
                         const std::string& out_dir, std::ostream* console = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Trainer<S> trainer(plan, data);
  const fs::path base(out_dir);
  save_checkpoint((base / "init.ckpt").string(), trainer.snapshot());
  std::ofstream log((base / "train.log.jsonl").string(), std::ios::trunc);
  if (!log) throw input_error("cannot open training log under '" + out_dir + "'");
  log.precision(17);  // lr/loss round-trip exactly

  TrainResult result;
  const std::int64_t steps_per_epoch =
      plan.epochs > 0 ? trainer.total_steps() / plan.epochs : 0;
  try {
    while (!trainer.done()) {
      StepRecord rec = trainer.step();
      log << "{\"step\":" << rec.step << ",\"epoch\":" << rec.epoch << ",\"lr\":" << rec.lr
          << ",\"loss\":" << rec.loss << ",\"wall_ms\":" << rec.wall_ms << "}\n";
      const bool epoch_end = steps_per_epoch > 0 && rec.step % steps_per_epoch == 0;
      if (epoch_end && plan.eval_every > 0 && rec.epoch % plan.eval_every == 0 &&
          !data.dev.empty()) {
        const double mrr = trainer.dev_entity_mrr();
        log << "{\"epoch\":" << rec.epoch << ",\"dev_entity_mrr\":" << mrr << "}\n";
        if (console) *console << "epoch " << rec.epoch << " dev entity MRR " << mrr << "\n";
        if (mrr > result.best_dev_mrr) {
          result.best_dev_mrr = mrr;
          result.best_checkpoint = (base / "best.ckpt").string();
          save_checkpoint(result.best_checkpoint, trainer.snapshot());
        }
      }
    }
  } catch (const numeric_error&) {
    std::ofstream dump((base / "diagnostic_batch.txt").string(), std::ios::trunc);
    dump << "step " << trainer.global_step() + 1 << "\ninstance indices:";
    for (auto idx : trainer.offending_batch()) dump << ' ' << idx;
    dump << '\n';
    throw;
  }
  result.last_checkpoint = (base / "last.ckpt").string();
  save_checkpoint(result.last_checkpoint, trainer.snapshot());
  result.steps = trainer.global_step();
  log.flush();
  return result;
}

}  // namespace gran
