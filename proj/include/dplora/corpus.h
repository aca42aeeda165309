//
// Copyright 2026 The dplora Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

// Report ingestion and preparation:
//
//   records -> dedup -> patient-level split -> per-patient aggregation
//           -> tokenisation -> (token ids, binary label vector) examples
//
// plus a synthetic report generator for the two label schemas.
//
// File formats (all UTF-8 text):
//   corpus      one JSON object per line:
//               {"patient_id", "report_id", "findings", "impression",
//                "raw_labels": [int, ...]}
//   manifest    JSON: {"format", "seed", "ratios", "splits": {name: [report_id]},
//                      "patients": {patient_id: split name}}
//   vocabulary  one token per line; the line number (from 0) is the id.

#ifndef DPLORA_CORPUS_H_
#define DPLORA_CORPUS_H_

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dplora {

enum class Schema { kMimic14, kCt18 };

struct LabelSchema {
  Schema schema;
  std::string name;  // "mimic14" or "ct18"
  std::vector<std::string> labels;
  // Raw codes allowed in this schema: {+1, 0, -1, +2} or {0, +1}.
  std::vector<int> allowed_codes;
};

const LabelSchema& schema_info(Schema schema);
Schema parse_schema(std::string_view name);

struct ReportRecord {
  std::string patient_id;
  std::string report_id;
  std::string findings;
  std::string impression;
  std::vector<int> raw_labels;

  bool operator==(const ReportRecord&) const = default;
};

using LabelVector = std::vector<std::uint8_t>;

// +1 -> 1; 0, -1, +2 -> 0. Any other code throws DataError naming the slot.
LabelVector normalize_labels(std::span<const int> raw);

inline constexpr std::string_view kSectionSeparator = " | ";

struct AggregatedText {
  std::string findings;
  std::string impression;
};

// Concatenates sections of one patient's records in report_id order, joined
// by kSectionSeparator. Empty sections are skipped.
AggregatedText aggregate_patient_text(std::span<const ReportRecord> records);

// Collapses records with identical (patient_id, findings, impression,
// raw_labels), keeping the smallest report_id. Output sorted by report_id.
std::vector<ReportRecord> dedup(std::span<const ReportRecord> records);

struct SplitManifest {
  std::vector<std::string> split_names;
  std::vector<double> ratios;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> reports;  // split -> sorted report ids
  std::map<std::string, std::string> patient_split;         // patient -> split

  std::string to_json() const;
  static SplitManifest from_json(const std::string& text);
  // Throws DataError when a patient appears in more than one split.
  void check_disjoint() const;
};

// Names for k splits: train / train,test / train,val,test / split0..k-1.
std::vector<std::string> default_split_names(std::size_t k);

// Shuffles the sorted patient list with `seed` and cuts it by cumulative
// ratio. Every split with a positive ratio receives at least one patient.
// Throws ContractError when ratios do not sum to 1 (within 1e-9) and
// DataError when there are fewer patients than splits.
SplitManifest split_by_patient(std::span<const ReportRecord> records,
                               const std::vector<double>& ratios, std::uint64_t seed);

class Vocabulary {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kMask = "[MASK]";

  Vocabulary();  // reserved tokens only

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  void add(const std::string& token);

  std::string to_text() const;
  static Vocabulary from_text(const std::string& text);
  std::uint64_t fingerprint() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Lowercases, splits on whitespace, and emits every other non-alphanumeric
// character as its own token.
std::vector<std::string> split_words(std::string_view text);

// Reserved tokens plus the most frequent words, up to max_vocab entries in
// total; frequency ties break lexicographically. Throws DataError for an
// empty corpus and ContractError when max_vocab leaves no room for words.
Vocabulary build_vocab(std::span<const std::string> texts, std::size_t max_vocab);

// [CLS] followed by word ids, truncated to max_seq_len ids in total.
std::vector<std::int32_t> tokenize(const Vocabulary& vocab, std::string_view text,
                                   std::size_t max_seq_len);

struct VocabAndTokens {
  Vocabulary vocab;
  std::vector<std::vector<std::int32_t>> sequences;
};

VocabAndTokens build_vocab_and_tokenize(std::span<const std::string> texts, std::size_t max_vocab,
                                        std::size_t max_seq_len);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticOptions {
  Schema schema = Schema::kMimic14;
  std::size_t n_patients = 100;
  std::uint64_t seed = 1;
  // Per-label probability of a +1 code; empty means the schema default.
  std::vector<double> prevalences;
  // Among non-present slots (mimic14 only): probability of -1 and of +2.
  double uncertain_rate = 0.08;
  double no_data_rate = 0.08;
  std::size_t min_reports = 1;
  std::size_t max_reports = 3;
};

std::vector<double> default_prevalences(Schema schema);

// Deterministic in `options`. Every patient gets min..max reports; each
// present label contributes 2-4 label-specific sentences to the findings,
// uncertain labels a hedged sentence, and every report carries generic
// distractor sentences and patient-specific details (measurements and a
// follow-up line). Throws ContractError for n_patients < 10.
std::vector<ReportRecord> generate_synthetic_corpus(const SyntheticOptions& options);

std::string record_to_json(const ReportRecord& record);
ReportRecord record_from_json(const std::string& line);
std::string corpus_to_jsonl(std::span<const ReportRecord> records);
std::vector<ReportRecord> corpus_from_jsonl(const std::string& text);

// ---------------------------------------------------------------------------
// Model-ready examples

struct Example {
  std::string patient_id;
  std::vector<std::string> report_ids;
  std::string text;  // findings then impression
  std::vector<std::int32_t> tokens;
  std::vector<double> labels;  // 0/1 per class
};

// Model input text: findings, then impression.
std::string model_text(const AggregatedText& text);

// One example per patient of `split`: aggregated text and the element-wise
// OR of the normalised labels of that patient's reports.
std::vector<Example> build_examples(std::span<const ReportRecord> records,
                                    const SplitManifest& manifest, const std::string& split,
                                    const Vocabulary& vocab, std::size_t max_seq_len);

// Aggregated text of every patient in `split`, in patient order.
std::vector<std::string> split_texts(std::span<const ReportRecord> records,
                                     const SplitManifest& manifest, const std::string& split);

}  // namespace dplora

#endif  // DPLORA_CORPUS_H_
