#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cultura/aggregation.hpp"
#include "cultura/corpus.hpp"
#include "cultura/harness.hpp"
#include "cultura/metrics.hpp"
#include "cultura/tinylm.hpp"

/// Low-rank adapter fine-tuning on question/answer pairs and before/after evaluation.
namespace cultura::finetune {

struct PromptPair {
  std::string question;
  /// "Question: {q} Answer: {r}"
  std::string prompt_text;
  /// Byte offset where {r} starts in prompt_text.
  std::size_t answer_offset = 0;
  /// "v1" or "v2".
  std::string reference_version;

  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

/// Renders the training template. Surrounding whitespace of q and r is trimmed.
PromptPair render_pair(std::string_view question, std::string_view response, std::string version);

/// Two pairs per question (Resp V1 then Resp V2) in question order. Empty
/// references are skipped with a log line. Throws InvalidArgument when a
/// question has no reference pair.
std::vector<PromptPair> format_pairs(std::span<const corpus::QuestionRecord> questions,
                                     std::span<const aggregation::ReferencePair> references);

struct DatasetSplit {
  std::vector<PromptPair> train;
  std::vector<PromptPair> validation;
};

/// Seeded shuffle, then the first floor(fraction * count) items train.
/// Needs count >= 2, fraction in (0, 1), and a non-empty training part.
DatasetSplit split_dataset(std::span<const PromptPair> pairs, double train_fraction, std::uint64_t seed);

struct LoraConfig {
  int rank = 16;
  double scaling = 32.0;
  std::vector<std::string> target_projections = {"query", "value"};

  tinylm::LoraSpec to_spec() const;
};

struct TrainConfig {
  int epochs = 3;
  int batch_size = 1;
  int grad_accumulation = 4;
  /// Recorded only. The CPU path computes in double precision.
  std::string precision = "mixed-16-bit";
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  int warmup_steps = 10;
  int max_sequence_tokens = 512;
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  /// Restrict the loss to the answer tokens instead of the whole rendered pair.
  bool answer_only_loss = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const;
};

/// Learning rate for 0-based optimizer step `k`: linear warmup from zero,
/// then linear decay to zero at `total_steps`.
double scheduled_lr(const TrainConfig& cfg, int k, int total_steps);

struct LogRow {
  int step = 0;  // 1-based optimizer step
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochSummary {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> validation_loss;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from out_dir/checkpoint when it exists and matches the fingerprint.
  bool resume = false;
  /// Stop after this many epochs in this call (for testing resumption); 0 means all.
  int stop_after_epochs = 0;
};

struct TrainResult {
  tinylm::Adapter adapter;
  std::vector<LogRow> log;
  std::vector<EpochSummary> epochs;
  std::string base_checksum_before;
  std::string base_checksum_after;
  std::string fingerprint_json;
  int total_steps = 0;
  bool completed = false;
};

/// Mean over the pairs of the per-pair summed token cross-entropy.
double mean_pair_loss(const tinylm::TinyModel& model, const tinylm::Adapter* adapter,
                      std::span<const PromptPair> pairs, const TrainConfig& cfg);

/// Trains adapter weights only; the base model is taken by const reference.
/// Writes adapter.bin, adapter.json, train_log.csv and epochs.csv to
/// options.out_dir and a checkpoint after every epoch. A non-finite loss
/// writes out_dir/diagnostic and throws TrainingError.
TrainResult train_adapter(const tinylm::TinyModel& model, const std::string& model_ref,
                          std::span<const PromptPair> train, std::span<const PromptPair> validation,
                          const LoraConfig& lora, const TrainConfig& cfg, const TrainOptions& options);

/// Generation from a TinyModel, optionally with an adapter. The prompt is
/// wrapped in the training template and decoding stops at EOS, the token
/// budget, or the context limit. Only printable ASCII bytes are sampled.
class LocalModelBackend final : public harness::ModelBackend {
 public:
  LocalModelBackend(std::shared_ptr<const tinylm::TinyModel> model, std::string model_ref,
                    std::shared_ptr<const tinylm::Adapter> adapter = nullptr, std::string adapter_id = "");
  /// `adapter_dir` may be empty.
  static LocalModelBackend open(const std::string& model_ref, const std::filesystem::path& adapter_dir = {});

  std::string generate(std::string_view prompt, const harness::GenerationParams& params) override;
  std::string identity() const override;
  bool thread_safe() const override { return true; }

 private:
  std::shared_ptr<const tinylm::TinyModel> model_;
  std::string model_ref_;
  std::shared_ptr<const tinylm::Adapter> adapter_;
  std::string adapter_id_;
};

struct BeforeAfter {
  harness::ResponseSet base_responses;
  harness::ResponseSet adapted_responses;
  metrics::MetricRow before;
  metrics::MetricRow after;
  std::vector<metrics::MetricChange> changes;
};

/// Collects responses from both backends on the held-out questions and
/// compares their metric rows. Throws InvalidArgument when a test question
/// also appears among the training questions.
BeforeAfter evaluate_before_after(harness::ModelBackend& base, const std::string& base_name,
                                  harness::ModelBackend& adapted, const std::string& adapted_name,
                                  std::span<const corpus::QuestionRecord> test_questions,
                                  std::span<const std::string> training_questions,
                                  std::span<const aggregation::ReferencePair> references,
                                  const metrics::EvaluationContext& ctx, const harness::GenerationParams& params);

}  // namespace cultura::finetune
