#include "cultura/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <new>
#include <set>
#include <numeric>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/random.hpp"
#include "cultura/text.hpp"

namespace cultura::finetune {

using json = nlohmann::json;
using tinylm::Adapter;
using tinylm::MatrixXd;
using tinylm::TinyModel;

// --- data ----------------------------------------------------------------------------

PromptPair render_pair(std::string_view question, std::string_view response, std::string version) {
  const std::string q = text::trim(question);
  const std::string r = text::trim(response);
  PromptPair p;
  p.question = q;
  p.prompt_text = "Question: " + q + " Answer: ";
  p.answer_offset = p.prompt_text.size();
  p.prompt_text += r;
  p.reference_version = std::move(version);
  return p;
}

std::vector<PromptPair> format_pairs(std::span<const corpus::QuestionRecord> questions,
                                     std::span<const aggregation::ReferencePair> references) {
  std::map<std::string, const aggregation::ReferencePair*> by_question;
  for (const auto& r : references) by_question.emplace(r.question, &r);
  std::vector<PromptPair> out;
  for (const auto& q : questions) {
    const auto it = by_question.find(q.text);
    if (it == by_question.end()) throw InvalidArgument("no reference responses for question: " + q.text);
    for (const auto& [version, ref] : {std::pair{"v1", &it->second->v1}, std::pair{"v2", &it->second->v2}}) {
      if (text::trim(*ref).empty()) {
        spdlog::info("skipping empty {} reference for question: {}", version, q.text);
        continue;
      }
      out.push_back(render_pair(q.text, *ref, version));
    }
  }
  return out;
}

DatasetSplit split_dataset(std::span<const PromptPair> pairs, double train_fraction, std::uint64_t seed) {
  if (pairs.size() < 2) throw InvalidArgument("splitting needs at least two pairs");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidArgument("train fraction must lie in (0, 1)");
  // The small epsilon keeps products like 0.7 * 10 from flooring to 6.
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(pairs.size()) + 1e-9));
  if (n_train == 0) throw InvalidArgument("train fraction leaves no training pairs");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span(order));
  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? split.train : split.validation).push_back(pairs[order[i]]);
  }
  return split;
}

// --- configuration ---------------------------------------------------------------------

tinylm::LoraSpec LoraConfig::to_spec() const {
  tinylm::LoraSpec spec;
  spec.rank = rank;
  spec.alpha = scaling;
  spec.targets.clear();
  for (const auto& name : target_projections) {
    const auto p = tinylm::parse_projection(name);
    if (std::find(spec.targets.begin(), spec.targets.end(), p) == spec.targets.end()) spec.targets.push_back(p);
  }
  std::sort(spec.targets.begin(), spec.targets.end());
  spec.validate();
  return spec;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1 || grad_accumulation < 1) throw ConfigError("batch size and accumulation must be at least 1");
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("learning rate and weight decay must be >= 0");
  if (warmup_steps < 0) throw ConfigError("warmup steps must be >= 0");
  if (max_sequence_tokens < 2) throw ConfigError("max sequence tokens must be at least 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_epsilon > 0.0)) {
    throw ConfigError("invalid AdamW constants");
  }
}

double scheduled_lr(const TrainConfig& cfg, int k, int total_steps) {
  if (k < cfg.warmup_steps) return cfg.learning_rate * k / cfg.warmup_steps;
  const int decay = std::max(1, total_steps - cfg.warmup_steps);
  return cfg.learning_rate * std::max(0.0, static_cast<double>(total_steps - k) / decay);
}

// --- training ------------------------------------------------------------------------

namespace {

struct Encoded {
  std::vector<int> tokens;
  std::size_t first_target = 0;
};

Encoded encode_pair(const PromptPair& p, const TrainConfig& cfg) {
  Encoded e;
  e.tokens = tinylm::encode(p.prompt_text, static_cast<std::size_t>(cfg.max_sequence_tokens));
  // Token index of the first answer byte is offset + 1 (after BOS).
  e.first_target = cfg.answer_only_loss ? p.answer_offset + 1 : 0;
  return e;
}

std::string data_hash(std::span<const PromptPair> train, std::span<const PromptPair> validation) {
  std::string all;
  for (const auto& p : train) all += p.prompt_text + '\n';
  all += '\x1e';
  for (const auto& p : validation) all += p.prompt_text + '\n';
  return io::sha256_hex(all);
}

json fingerprint(const TinyModel& model, const std::string& model_ref, const std::string& base_checksum,
                 const LoraConfig& lora, const tinylm::LoraSpec& spec, const TrainConfig& cfg,
                 std::span<const PromptPair> train, std::span<const PromptPair> validation) {
  json targets = json::array();
  for (auto t : spec.targets) targets.push_back(std::string(tinylm::to_string(t)));
  return json{
      {"lora", {{"rank", lora.rank}, {"scaling", lora.scaling}, {"target_projections", targets}}},
      {"train",
       {{"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"grad_accumulation", cfg.grad_accumulation},
        {"precision", cfg.precision},
        {"compute_precision", "float64"},
        {"optimizer", "AdamW"},
        {"learning_rate", cfg.learning_rate},
        {"weight_decay", cfg.weight_decay},
        {"warmup_steps", cfg.warmup_steps},
        {"schedule", "linear warmup from 0, then linear decay to 0"},
        {"max_sequence_tokens", cfg.max_sequence_tokens},
        {"train_fraction", cfg.train_fraction},
        {"loss", "per pair: sum of token cross-entropy; mean over pairs"},
        {"loss_masking", cfg.answer_only_loss ? "answer tokens only" : "all tokens"},
        {"adam", {{"beta1", cfg.adam_beta1}, {"beta2", cfg.adam_beta2}, {"epsilon", cfg.adam_epsilon}}}}},
      {"seed", cfg.seed},
      {"data_sha256", data_hash(train, validation)},
      {"train_pairs", train.size()},
      {"validation_pairs", validation.size()},
      {"base_model",
       {{"ref", model_ref},
        {"sha256", base_checksum},
        {"parameters", model.parameter_count()},
        {"d_model", model.config().d_model},
        {"n_layers", model.config().n_layers}}},
      {"adapter_parameters", nullptr},
  };
}

struct AdamState {
  Adapter m;
  Adapter v;
  long t = 0;
};

void adamw_step(Adapter& params, const Adapter& grad, AdamState& st, const TrainConfig& cfg, double lr) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));
  std::vector<MatrixXd*> p, m, v;
  std::vector<const MatrixXd*> g;
  params.for_each_matrix([&](MatrixXd& x) { p.push_back(&x); });
  st.m.for_each_matrix([&](MatrixXd& x) { m.push_back(&x); });
  st.v.for_each_matrix([&](MatrixXd& x) { v.push_back(&x); });
  grad.for_each_matrix([&](const MatrixXd& x) { g.push_back(&x); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    *p[i] *= 1.0 - lr * cfg.weight_decay;
    *m[i] = cfg.adam_beta1 * *m[i] + (1.0 - cfg.adam_beta1) * *g[i];
    *v[i] = cfg.adam_beta2 * *v[i] + (1.0 - cfg.adam_beta2) * g[i]->cwiseProduct(*g[i]);
    p[i]->array() -= lr * (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + cfg.adam_epsilon);
  }
}

std::string fmt_num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

void write_logs(const std::filesystem::path& dir, const std::vector<LogRow>& log,
                const std::vector<EpochSummary>& epochs) {
  csv::Writer w({"step", "epoch", "loss", "lr"});
  for (const auto& r : log) w.add({std::to_string(r.step), std::to_string(r.epoch), fmt_num(r.loss), fmt_num(r.lr)});
  w.save(dir / "train_log.csv");
  csv::Writer e({"epoch", "train_loss", "validation_loss"});
  for (const auto& s : epochs) {
    e.add({std::to_string(s.epoch), fmt_num(s.train_loss), s.validation_loss ? fmt_num(*s.validation_loss) : ""});
  }
  e.save(dir / "epochs.csv");
}

void save_checkpoint(const std::filesystem::path& dir, const std::string& fingerprint_sha, const Adapter& adapter,
                     const AdamState& adam, int epochs_done, int step, const std::vector<LogRow>& log,
                     const std::vector<EpochSummary>& epochs, const std::string& note) {
  adapter.save(dir / "adapter.bin");
  adam.m.save(dir / "adam_m.bin");
  adam.v.save(dir / "adam_v.bin");
  json rows = json::array();
  for (const auto& r : log) rows.push_back({r.step, r.epoch, r.loss, r.lr});
  json ep = json::array();
  for (const auto& s : epochs) {
    ep.push_back({s.epoch, s.train_loss, s.validation_loss ? json(*s.validation_loss) : json(nullptr)});
  }
  const json state = {{"fingerprint_sha256", fingerprint_sha}, {"epochs_done", epochs_done}, {"step", step},
                      {"adam_t", adam.t}, {"log", rows}, {"epochs", ep}, {"note", note}};
  io::write_text(dir / "state.json", state.dump(2) + "\n");
}

}  // namespace

double mean_pair_loss(const TinyModel& model, const Adapter* adapter, std::span<const PromptPair> pairs,
                      const TrainConfig& cfg) {
  if (pairs.empty()) throw InvalidArgument("loss over an empty pair list");
  double total = 0.0;
  for (const auto& p : pairs) {
    const auto e = encode_pair(p, cfg);
    total += tinylm::sequence_loss(model, adapter, e.tokens, e.first_target);
  }
  return total / static_cast<double>(pairs.size());
}

TrainResult train_adapter(const TinyModel& model, const std::string& model_ref, std::span<const PromptPair> train,
                          std::span<const PromptPair> validation, const LoraConfig& lora, const TrainConfig& cfg,
                          const TrainOptions& options) {
  cfg.validate();
  const auto spec = lora.to_spec();
  if (train.empty()) throw InvalidArgument("no training pairs");
  if (options.out_dir.empty()) throw InvalidArgument("training needs an output directory");

  TrainResult result;
  result.base_checksum_before = model.checksum();
  json fp = fingerprint(model, model_ref, result.base_checksum_before, lora, spec, cfg, train, validation);
  const std::string fp_sha = io::sha256_hex(fp.dump());

  std::vector<Encoded> encoded;
  for (const auto& p : train) encoded.push_back(encode_pair(p, cfg));

  const auto n = encoded.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t accum = static_cast<std::size_t>(cfg.grad_accumulation);
  const std::size_t batches_per_epoch = (n + batch - 1) / batch;
  const int steps_per_epoch = static_cast<int>((batches_per_epoch + accum - 1) / accum);
  result.total_steps = steps_per_epoch * cfg.epochs;

  Adapter adapter = Adapter::init(model.config(), spec, io::mix_seed(cfg.seed, 0xada));
  AdamState adam{tinylm::zeros_like(adapter), tinylm::zeros_like(adapter), 0};
  int start_epoch = 1;
  int step = 0;
  const auto ckpt_dir = options.out_dir / "checkpoint";

  if (options.resume && std::filesystem::exists(ckpt_dir / "state.json")) {
    const json state = json::parse(io::read_text(ckpt_dir / "state.json"));
    if (state.value("fingerprint_sha256", std::string{}) != fp_sha) {
      throw ConfigError((ckpt_dir / "state.json").string() + ": checkpoint was written for different inputs");
    }
    adapter = Adapter::load(ckpt_dir / "adapter.bin");
    adam.m = Adapter::load(ckpt_dir / "adam_m.bin");
    adam.v = Adapter::load(ckpt_dir / "adam_v.bin");
    adam.t = state.at("adam_t").get<long>();
    start_epoch = state.at("epochs_done").get<int>() + 1;
    step = state.at("step").get<int>();
    for (const auto& r : state.at("log")) result.log.push_back({r[0], r[1], r[2], r[3]});
    for (const auto& s : state.at("epochs")) {
      result.epochs.push_back({s[0], s[1], s[2].is_null() ? std::nullopt : std::optional<double>(s[2].get<double>())});
    }
    spdlog::info("resuming fine-tuning at epoch {} (step {})", start_epoch, step);
  }

  int epochs_run = 0;
  try {
    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
      if (options.stop_after_epochs > 0 && epochs_run >= options.stop_after_epochs) break;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      Rng rng(io::mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
      rng.shuffle(std::span(order));

      double epoch_loss = 0.0;
      std::size_t b = 0;
      while (b < batches_per_epoch) {
        const std::size_t group_end = std::min(batches_per_epoch, b + accum);
        const std::size_t group = group_end - b;
        Adapter grad = tinylm::zeros_like(adapter);
        double step_loss = 0.0;
        for (; b < group_end; ++b) {
          const std::size_t lo = b * batch;
          const std::size_t hi = std::min(n, lo + batch);
          const double per_sample = 1.0 / static_cast<double>((hi - lo) * group);
          double batch_loss = 0.0;
          for (std::size_t i = lo; i < hi; ++i) {
            const auto& e = encoded[order[i]];
            const double l = tinylm::loss_and_grad(model, adapter, e.tokens, e.first_target, &grad, per_sample);
            if (!std::isfinite(l)) {
              const auto diag = options.out_dir / "diagnostic";
              save_checkpoint(diag, fp_sha, adapter, adam, epoch - 1, step, result.log, result.epochs,
                              "non-finite loss on pair: " + train[order[i]].prompt_text.substr(0, 120));
              throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step + 1) + "; diagnostic checkpoint in " + diag.string(),
                                  diag.string());
            }
            batch_loss += l;
            epoch_loss += l;
          }
          step_loss += batch_loss / static_cast<double>(hi - lo);
        }
        const double lr = scheduled_lr(cfg, step, result.total_steps);
        adamw_step(adapter, grad, adam, cfg, lr);
        ++step;
        result.log.push_back({step, epoch, step_loss / static_cast<double>(group), lr});
      }

      EpochSummary summary{epoch, epoch_loss / static_cast<double>(n), std::nullopt};
      if (!validation.empty()) summary.validation_loss = mean_pair_loss(model, &adapter, validation, cfg);
      result.epochs.push_back(summary);
      spdlog::info("epoch {}: train loss {:.4f}{}", epoch, summary.train_loss,
                   summary.validation_loss ? fmt::format(", validation loss {:.4f}", *summary.validation_loss) : "");
      save_checkpoint(ckpt_dir, fp_sha, adapter, adam, epoch, step, result.log, result.epochs, "");
      ++epochs_run;
    }
  } catch (const std::bad_alloc&) {
    throw TrainingError("out of memory during fine-tuning; resume from the last epoch checkpoint in " +
                            ckpt_dir.string(),
                        std::filesystem::exists(ckpt_dir / "state.json") ? ckpt_dir.string() : "");
  }

  result.completed = static_cast<int>(result.epochs.size()) == cfg.epochs;
  result.base_checksum_after = model.checksum();
  fp["adapter_parameters"] = adapter.parameter_count();
  result.fingerprint_json = fp.dump(2) + "\n";
  write_logs(options.out_dir, result.log, result.epochs);
  if (result.completed) {
    adapter.save(options.out_dir / "adapter.bin");
    io::write_text(options.out_dir / "adapter.json", result.fingerprint_json);
  }
  result.adapter = std::move(adapter);
  return result;
}

// --- local generation ---------------------------------------------------------------------

LocalModelBackend::LocalModelBackend(std::shared_ptr<const TinyModel> model, std::string model_ref,
                                     std::shared_ptr<const Adapter> adapter, std::string adapter_id)
    : model_(std::move(model)), model_ref_(std::move(model_ref)), adapter_(std::move(adapter)),
      adapter_id_(std::move(adapter_id)) {
  if (!model_) throw InvalidArgument("local backend needs a model");
}

LocalModelBackend LocalModelBackend::open(const std::string& model_ref, const std::filesystem::path& adapter_dir) {
  auto model = std::make_shared<const TinyModel>(TinyModel::from_ref(model_ref));
  if (adapter_dir.empty()) return LocalModelBackend(std::move(model), model_ref);
  auto adapter = std::make_shared<const Adapter>(Adapter::load(adapter_dir / "adapter.bin"));
  const std::string id = io::sha256_file(adapter_dir / "adapter.bin").substr(0, 16);
  return LocalModelBackend(std::move(model), model_ref, std::move(adapter), id);
}

std::string LocalModelBackend::identity() const {
  return "local:" + model_ref_ + (adapter_ ? "+adapter:" + adapter_id_ : "");
}

std::string LocalModelBackend::generate(std::string_view prompt, const harness::GenerationParams& params) {
  params.validate();
  const auto max_seq = static_cast<std::size_t>(model_->config().max_seq);
  std::vector<int> context = tinylm::encode("Question: " + text::trim(prompt) + " Answer:", SIZE_MAX, false);
  // Keep BOS and the tail of long prompts so at least one token can be generated.
  if (context.size() > max_seq - 1) {
    std::vector<int> tail(context.end() - static_cast<std::ptrdiff_t>(max_seq - 2), context.end());
    tail.insert(tail.begin(), tinylm::kBos);
    context = std::move(tail);
  }
  tinylm::Decoder dec(*model_, adapter_.get());
  tinylm::VectorXd logits;
  for (int tok : context) logits = dec.step(tok);

  Rng rng(params.seed);
  std::string out;
  for (int i = 0; i < params.max_new_tokens; ++i) {
    // Allowed: printable ASCII and EOS.
    int best = tinylm::kEos;
    for (int c = 32; c < 127; ++c) {
      if (logits(c) > logits(best)) best = c;
    }
    int next = best;
    if (params.temperature > 0.0) {
      const double mx = logits(best);
      std::vector<std::pair<int, double>> w;
      double total = 0.0;
      auto add = [&](int c) {
        const double p = std::exp((logits(c) - mx) / params.temperature);
        w.emplace_back(c, p);
        total += p;
      };
      for (int c = 32; c < 127; ++c) add(c);
      add(tinylm::kEos);
      double u = rng.uniform01() * total;
      for (const auto& [c, p] : w) {
        next = c;
        if ((u -= p) < 0.0) break;
      }
    }
    if (next == tinylm::kEos) break;
    out.push_back(static_cast<char>(next));
    if (dec.position() >= max_seq) break;
    logits = dec.step(next);
  }
  return text::trim(out);
}

// --- before / after -----------------------------------------------------------------------------

BeforeAfter evaluate_before_after(harness::ModelBackend& base, const std::string& base_name,
                                  harness::ModelBackend& adapted, const std::string& adapted_name,
                                  std::span<const corpus::QuestionRecord> test_questions,
                                  std::span<const std::string> training_questions,
                                  std::span<const aggregation::ReferencePair> references,
                                  const metrics::EvaluationContext& ctx, const harness::GenerationParams& params) {
  std::set<std::string> seen(training_questions.begin(), training_questions.end());
  for (const auto& q : test_questions) {
    if (seen.count(q.text)) throw InvalidArgument("test question also used for training: " + q.text);
  }
  BeforeAfter out;
  out.base_responses = harness::collect_responses(base, base_name, test_questions, params);
  out.adapted_responses = harness::collect_responses(adapted, adapted_name, test_questions, params);
  out.before = metrics::evaluate_model(out.base_responses, references, ctx).row;
  out.after = metrics::evaluate_model(out.adapted_responses, references, ctx).row;
  out.changes = metrics::improvement_report(out.before, out.after);
  return out;
}

}  // namespace cultura::finetune
