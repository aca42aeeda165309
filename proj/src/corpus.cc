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

#include "dplora/corpus.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "dplora/errors.h"
#include "dplora/model.h"
#include "dplora/util.h"
#include "json.hpp"

namespace dplora {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schemas

const LabelSchema& schema_info(Schema schema) {
  static const LabelSchema kMimic{
      Schema::kMimic14,
      "mimic14",
      {"Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Enlarged Cardiomediastinum",
       "Fracture", "Lung Lesion", "Lung Opacity", "No Finding", "Pleural Effusion",
       "Pleural Other", "Pneumonia", "Pneumothorax", "Support Devices"},
      {1, 0, -1, 2}};
  static const LabelSchema kCt{
      Schema::kCt18,
      "ct18",
      {"Medical material", "Arterial wall calcification", "Cardiomegaly", "Pericardial effusion",
       "Coronary artery wall calcification", "Hiatal hernia", "Lymphadenopathy", "Emphysema",
       "Atelectasis", "Lung nodule", "Lung opacity", "Pulmonary fibrotic sequela",
       "Pleural effusion", "Mosaic attenuation pattern", "Peribronchial thickening",
       "Consolidation", "Bronchiectasis", "Interlobular septal thickening"},
      {0, 1}};
  return schema == Schema::kMimic14 ? kMimic : kCt;
}

Schema parse_schema(std::string_view name) {
  if (name == "mimic14") return Schema::kMimic14;
  if (name == "ct18") return Schema::kCt18;
  throw ConfigError("unknown schema '" + std::string(name) + "' (expected mimic14 or ct18)");
}

LabelVector normalize_labels(std::span<const int> raw) {
  LabelVector out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    switch (raw[i]) {
      case 1:
        out[i] = 1;
        break;
      case 0:
      case -1:
      case 2:
        out[i] = 0;
        break;
      default:
        throw DataError("label code " + std::to_string(raw[i]) + " at position " +
                        std::to_string(i) + " is not one of {+1, 0, -1, +2}");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation and dedup

AggregatedText aggregate_patient_text(std::span<const ReportRecord> records) {
  std::vector<const ReportRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const ReportRecord* a, const ReportRecord* b) { return a->report_id < b->report_id; });
  AggregatedText out;
  auto append = [](std::string& dst, const std::string& part) {
    if (part.empty()) return;
    if (!dst.empty()) dst += kSectionSeparator;
    dst += part;
  };
  for (const auto* r : sorted) {
    append(out.findings, r->findings);
    append(out.impression, r->impression);
  }
  return out;
}

std::vector<ReportRecord> dedup(std::span<const ReportRecord> records) {
  using Key = std::tuple<std::string, std::string, std::string, std::vector<int>>;
  std::map<Key, const ReportRecord*> survivors;
  for (const auto& r : records) {
    Key key{r.patient_id, r.findings, r.impression, r.raw_labels};
    auto [it, inserted] = survivors.emplace(std::move(key), &r);
    if (!inserted && r.report_id < it->second->report_id) it->second = &r;
  }
  std::vector<ReportRecord> out;
  out.reserve(survivors.size());
  for (const auto& [key, r] : survivors) out.push_back(*r);
  std::sort(out.begin(), out.end(),
            [](const ReportRecord& a, const ReportRecord& b) { return a.report_id < b.report_id; });
  return out;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<std::string> default_split_names(std::size_t k) {
  switch (k) {
    case 1:
      return {"train"};
    case 2:
      return {"train", "test"};
    case 3:
      return {"train", "val", "test"};
    default: {
      std::vector<std::string> names;
      for (std::size_t i = 0; i < k; ++i) names.push_back("split" + std::to_string(i));
      return names;
    }
  }
}

SplitManifest split_by_patient(std::span<const ReportRecord> records,
                               const std::vector<double>& ratios, std::uint64_t seed) {
  if (ratios.empty()) throw ContractError("split_by_patient: no ratios");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ContractError("split_by_patient: ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split_by_patient: ratios must sum to 1");

  std::set<std::string> unique;
  for (const auto& r : records) unique.insert(r.patient_id);
  std::vector<std::string> patients(unique.begin(), unique.end());
  const std::size_t n = patients.size();
  const std::size_t k = ratios.size();
  if (n < k) {
    throw DataError("split_by_patient: " + std::to_string(n) + " patients for " +
                    std::to_string(k) + " splits");
  }

  Rng rng = make_rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(patients[i - 1], patients[j]);
  }

  // Largest-remainder apportionment of patient counts.
  std::vector<std::size_t> counts(k);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[remainders[i % k].second];
  for (std::size_t i = 0; i < k; ++i) {
    if (ratios[i] > 0.0 && counts[i] == 0) {
      auto donor = std::max_element(counts.begin(), counts.end());
      --*donor;
      ++counts[i];
    }
  }

  SplitManifest m;
  m.split_names = default_split_names(k);
  m.ratios = ratios;
  m.seed = seed;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < k; ++i) {
    m.reports[m.split_names[i]];
    for (std::size_t c = 0; c < counts[i]; ++c) m.patient_split[patients[cursor++]] = m.split_names[i];
  }
  for (const auto& r : records) m.reports[m.patient_split.at(r.patient_id)].push_back(r.report_id);
  for (auto& [name, ids] : m.reports) std::sort(ids.begin(), ids.end());
  m.check_disjoint();
  return m;
}

void SplitManifest::check_disjoint() const {
  // patient_split maps each patient to one split by construction; verify the
  // report lists agree with it and that no report id repeats.
  std::set<std::string> seen;
  for (const auto& [name, ids] : reports) {
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw DataError("report " + id + " appears in two splits");
    }
  }
}

std::string SplitManifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "dplora.manifest.v1";
  j["seed"] = seed;
  j["ratios"] = ratios;
  j["split_names"] = split_names;
  j["splits"] = reports;
  j["patients"] = patient_split;
  return j.dump(1) + "\n";
}

SplitManifest SplitManifest::from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "dplora.manifest.v1") throw DataError("not a dplora split manifest");
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.ratios = j.at("ratios").get<std::vector<double>>();
  m.split_names = j.at("split_names").get<std::vector<std::string>>();
  m.reports = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
  m.patient_split = j.at("patients").get<std::map<std::string, std::string>>();
  m.check_disjoint();
  return m;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenisation

Vocabulary::Vocabulary() {
  for (auto t : {kPad, kUnk, kCls, kMask}) add(std::string(t));
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::add(const std::string& token) {
  if (index_.count(token)) throw DataError("duplicate vocabulary token '" + token + "'");
  index_[token] = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::from_text(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < static_cast<std::size_t>(kNumReservedIds) || lines[0] != kPad ||
      lines[1] != kUnk || lines[2] != kCls || lines[3] != kMask) {
    throw DataError("vocabulary file must start with the reserved tokens");
  }
  Vocabulary v;
  for (std::size_t i = kNumReservedIds; i < lines.size(); ++i) v.add(lines[i]);
  return v;
}

std::uint64_t Vocabulary::fingerprint() const { return fnv1a64(to_text()); }

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.emplace_back(1, raw);
    }
  }
  flush();
  return out;
}

Vocabulary build_vocab(std::span<const std::string> texts, std::size_t max_vocab) {
  if (max_vocab <= static_cast<std::size_t>(kNumReservedIds)) {
    throw ContractError("max_vocab must exceed the reserved token count");
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++freq[w];
  if (freq.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [word, count] : ranked) {
    if (v.size() >= max_vocab) break;
    if (v.id(word) != kUnkId || word == Vocabulary::kUnk) continue;  // never shadow reserved
    v.add(word);
  }
  return v;
}

std::vector<std::int32_t> tokenize(const Vocabulary& vocab, std::string_view text,
                                   std::size_t max_seq_len) {
  std::vector<std::int32_t> ids{kClsId};
  for (const auto& w : split_words(text)) {
    if (ids.size() >= max_seq_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

VocabAndTokens build_vocab_and_tokenize(std::span<const std::string> texts, std::size_t max_vocab,
                                        std::size_t max_seq_len) {
  VocabAndTokens out{build_vocab(texts, max_vocab), {}};
  for (const auto& t : texts) out.sequences.push_back(tokenize(out.vocab, t, max_seq_len));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct LabelText {
  std::vector<std::string> positive;
  std::string hedge;
  std::string impression;
};

const std::vector<LabelText>& label_texts(Schema schema) {
  static const std::vector<LabelText> kMimic{
      {{"{side} basilar atelectasis", "{sev} atelectasis", "subsegmental atelectasis",
        "linear atelectasis"},
       "possible volume loss",
       "atelectasis"},
      {{"heart is enlarged", "cardiomegaly", "{sev} cardiomegaly", "enlarged cardiac silhouette"},
       "borderline heart size",
       "cardiomegaly"},
      {{"{side} {lobe} consolidation", "airspace consolidation", "dense consolidation",
        "focal consolidation"},
       "early airspace process",
       "consolidation"},
      {{"pulmonary edema", "{sev} interstitial edema", "vascular congestion",
        "kerley b lines"},
       "possible fluid overload",
       "edema"},
      {{"widened mediastinum", "enlarged cardiomediastinal contour", "mediastinal widening",
        "prominent mediastinum"},
       "mediastinum likely projectional",
       "widened mediastinum"},
      {{"{side} {ordinal} rib fracture", "healing rib fracture", "vertebral compression fracture",
        "acute fracture"},
       "questionable cortical irregularity",
       "fracture"},
      {{"{size} mm {side} nodule", "{side} hilar mass", "spiculated lesion", "pulmonary mass"},
       "possible nipple shadow",
       "lung lesion"},
      {{"{side} {lobe} opacity", "hazy opacification", "patchy opacity", "increased opacity"},
       "subtle overlapping density",
       "lung opacity"},
      {{"lungs are clear", "no acute process", "normal chest", "no abnormality"},
       "probably normal",
       "no findings"},
      {{"{sev} {side} pleural effusion", "costophrenic blunting", "layering pleural fluid",
        "pleural effusion"},
       "trace fluid versus thickening",
       "pleural effusion"},
      {{"{side} pleural thickening", "calcified pleural plaques", "pleural scarring",
        "apical pleural cap"},
       "possible pleural irregularity",
       "pleural plaques"},
      {{"{side} {lobe} pneumonia", "suspected pneumonia", "multifocal pneumonia",
        "infectious infiltrate"},
       "infection not excluded",
       "pneumonia"},
      {{"{side} apical pneumothorax", "{sev} pneumothorax", "visceral pleural line",
        "pneumothorax"},
       "skin fold mimic",
       "pneumothorax"},
      {{"endotracheal tube", "central venous line", "nasogastric tube", "pacemaker leads"},
       "device partially imaged",
       "support devices"},
  };
  static const std::vector<LabelText> kCt{
      {{"{side} port catheter", "surgical clips", "sternotomy wires", "stent in place"},
       "",
       "medical material"},
      {{"aortic wall calcification", "calcified aortic plaques", "arterial calcifications",
        "atherosclerotic aorta"},
       "",
       "arterial calcification"},
      {{"heart is enlarged", "cardiomegaly", "{sev} cardiomegaly", "increased cardiac size"},
       "",
       "cardiomegaly"},
      {{"{sev} pericardial effusion", "pericardial fluid", "pericardial effusion",
        "fluid around heart"},
       "",
       "pericardial effusion"},
      {{"coronary calcification", "calcified coronary arteries", "coronary calcific deposits",
        "{sev} coronary calcification"},
       "",
       "coronary calcification"},
      {{"hiatal hernia", "sliding hiatal hernia", "{sev} hiatal hernia", "gastric herniation"},
       "",
       "hiatal hernia"},
      {{"enlarged mediastinal nodes", "hilar lymphadenopathy", "{size} mm {side} hilar node",
        "lymphadenopathy"},
       "",
       "lymphadenopathy"},
      {{"centrilobular emphysema", "paraseptal emphysema", "{sev} emphysema",
        "emphysematous changes"},
       "",
       "emphysema"},
      {{"{side} basal atelectasis", "atelectatic bands", "passive atelectasis",
        "subsegmental atelectasis"},
       "",
       "atelectasis"},
      {{"{size} mm {side} nodule", "solid pulmonary nodule", "{side} {lobe} nodule",
        "subsolid nodule"},
       "",
       "lung nodule"},
      {{"{side} {lobe} opacity", "ground glass opacities", "hazy density", "patchy opacity"},
       "",
       "lung opacity"},
      {{"{side} {lobe} fibrotic sequelae", "fibrotic bands", "parenchymal scarring",
        "fibrotic changes"},
       "",
       "fibrotic sequelae"},
      {{"{sev} {side} pleural effusion", "pleural fluid", "bilateral pleural effusions",
        "pleural effusion"},
       "",
       "pleural effusion"},
      {{"mosaic attenuation", "mosaic perfusion", "mosaic pattern", "heterogeneous attenuation"},
       "",
       "mosaic attenuation"},
      {{"peribronchial thickening", "bronchial wall thickening", "peribronchial cuffing",
        "thickened bronchial walls"},
       "",
       "peribronchial thickening"},
      {{"{side} {lobe} consolidation", "consolidative areas", "airspace consolidation",
        "dense consolidation"},
       "",
       "consolidation"},
      {{"cylindrical bronchiectasis", "{side} {lobe} bronchiectasis", "dilated bronchi",
        "bronchiectatic changes"},
       "",
       "bronchiectasis"},
      {{"interlobular septal thickening", "septal lines", "smooth septal thickening",
        "thickened septa"},
       "",
       "septal thickening"},
  };
  return schema == Schema::kMimic14 ? kMimic : kCt;
}

const std::vector<std::string>& distractors(Schema schema) {
  static const std::vector<std::string> kMimic{
      "bones unremarkable",     "compared with prior", "patient slightly rotated",
      "portable upright view", "spine degeneration",  "trachea midline",
      "upper abdomen normal",   "low lung volumes",    "soft tissues normal",
      "frontal lateral views"};
  static const std::vector<std::string> kCt{
      "thyroid unremarkable",    "airways patent",      "esophagus normal",
      "no osseous lesion",       "upper abdomen normal", "noncontrast study",
      "thin axial sections",     "chest wall normal",   "spine degeneration",
      "compared with prior"};
  return schema == Schema::kMimic14 ? kMimic : kCt;
}

const std::vector<std::string> kSides{"left", "right", "bilateral"};
const std::vector<std::string> kLobes{"upper lobe", "middle lobe", "lower lobe", "lingula"};
const std::vector<std::string> kSeverity{"mild", "moderate", "severe", "small", "large"};
const std::vector<std::string> kOrdinals{"third", "fourth", "fifth", "sixth", "seventh", "eighth"};
const std::vector<std::string> kSurnames{
    "adams",  "baker",  "carter", "dalton", "ellis",  "foster", "garcia", "hughes", "irwin",
    "jensen", "keller", "lopez",  "morgan", "nolan",  "ortiz",  "patel",  "quinn",  "reyes",
    "shah",   "turner", "upton",  "vargas", "walsh",  "young",  "zimmer", "brooks", "chen",
    "diaz",   "evans",  "fisher", "grant",  "hayes",  "ingram", "jordan", "kim",    "lewis"};
const std::vector<std::string> kStations{"alpha", "bravo", "cedar", "delta", "echo", "falcon",
                                         "granite", "harbor", "indigo", "juniper"};

template <typename C>
const auto& pick(const C& items, Rng& rng) {
  return items[static_cast<std::size_t>(rng() % items.size())];
}

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::string fill_template(const std::string& tmpl, Rng& rng) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] != '{') {
      out.push_back(tmpl[i++]);
      continue;
    }
    const std::size_t close = tmpl.find('}', i);
    const std::string slot = tmpl.substr(i + 1, close - i - 1);
    if (slot == "side") out += pick(kSides, rng);
    else if (slot == "lobe") out += pick(kLobes, rng);
    else if (slot == "sev") out += pick(kSeverity, rng);
    else if (slot == "ordinal") out += pick(kOrdinals, rng);
    else if (slot == "size") out += std::to_string(uniform_int(rng, 3, 40));
    else throw DataError("unknown template slot {" + slot + "}");
    i = close + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string zero_pad(std::uint64_t value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

std::vector<double> default_prevalences(Schema schema) {
  if (schema == Schema::kMimic14) {
    return {0.20, 0.22, 0.08, 0.15, 0.06, 0.05, 0.07, 0.24, 0.15, 0.22, 0.04, 0.10, 0.05, 0.25};
  }
  return {0.12, 0.28, 0.10, 0.07, 0.25, 0.08, 0.15, 0.20, 0.18, 0.30,
          0.22, 0.17, 0.10, 0.06, 0.09, 0.08, 0.07, 0.05};
}

std::vector<ReportRecord> generate_synthetic_corpus(const SyntheticOptions& options) {
  if (options.n_patients < 10) throw ContractError("synthetic corpus needs at least 10 patients");
  if (options.min_reports == 0 || options.min_reports > options.max_reports) {
    throw ContractError("synthetic corpus: invalid reports-per-patient range");
  }
  const auto& schema = schema_info(options.schema);
  const auto& texts = label_texts(options.schema);
  const std::size_t n_labels = schema.labels.size();
  const auto prevalences =
      options.prevalences.empty() ? default_prevalences(options.schema) : options.prevalences;
  if (prevalences.size() != n_labels) {
    throw ContractError("synthetic corpus: expected " + std::to_string(n_labels) + " prevalences");
  }
  const bool has_uncertain = options.schema == Schema::kMimic14;

  Rng rng = make_rng(derive_seed(options.seed, {0x5EED}));
  std::vector<ReportRecord> out;
  for (std::size_t p = 0; p < options.n_patients; ++p) {
    const std::string patient = "p" + zero_pad(10000000 + (rng() % 90000000), 8);
    const std::string surname = pick(kSurnames, rng);
    const std::size_t n_reports = uniform_int(rng, options.min_reports, options.max_reports);
    for (std::size_t r = 0; r < n_reports; ++r) {
      ReportRecord rec;
      rec.patient_id = patient;
      rec.report_id = "s" + zero_pad(p, 6) + "-" + std::to_string(r);
      rec.raw_labels.resize(n_labels);
      std::vector<std::string> sentences;
      std::vector<std::string> impressions;
      for (std::size_t l = 0; l < n_labels; ++l) {
        const double u = uniform01(rng);
        int code = 0;
        if (u < prevalences[l]) {
          code = 1;
        } else if (has_uncertain) {
          const double v = uniform01(rng);
          if (v < options.uncertain_rate) code = -1;
          else if (v < options.uncertain_rate + options.no_data_rate) code = 2;
        }
        rec.raw_labels[l] = code;
        if (code == 1) {
          const auto& pool = texts[l].positive;
          const std::size_t k = std::min<std::size_t>(uniform_int(rng, 2, 4), pool.size());
          std::vector<std::size_t> order(pool.size());
          std::iota(order.begin(), order.end(), 0);
          for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
          for (std::size_t i = 0; i < k; ++i) sentences.push_back(fill_template(pool[order[i]], rng));
          impressions.push_back(texts[l].impression);
        } else if (code == -1 && !texts[l].hedge.empty()) {
          sentences.push_back(fill_template(texts[l].hedge, rng));
        }
      }
      const std::size_t n_distract = uniform_int(rng, 1, 2);
      for (std::size_t i = 0; i < n_distract; ++i) sentences.push_back(pick(distractors(options.schema), rng));
      sentences.push_back("marker " + pick(kStations, rng) + " " +
                          std::to_string(uniform_int(rng, 10, 99)) + " mm");
      for (std::size_t i = sentences.size(); i > 1; --i) std::swap(sentences[i - 1], sentences[rng() % i]);
      rec.findings = join(sentences, " . ") + " .";
      if (impressions.empty()) impressions.push_back("no interval change");
      impressions.push_back("follow up dr " + surname + " " +
                            std::to_string(uniform_int(rng, 2, 12)) + " weeks");
      rec.impression = join(impressions, " . ") + " .";
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation

std::string record_to_json(const ReportRecord& record) {
  nlohmann::ordered_json j;
  j["patient_id"] = record.patient_id;
  j["report_id"] = record.report_id;
  j["findings"] = record.findings;
  j["impression"] = record.impression;
  j["raw_labels"] = record.raw_labels;
  return j.dump();
}

ReportRecord record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed corpus line: ") + e.what());
  }
  ReportRecord r;
  try {
    r.patient_id = j.at("patient_id").get<std::string>();
    r.report_id = j.at("report_id").get<std::string>();
    r.findings = j.at("findings").get<std::string>();
    r.impression = j.at("impression").get<std::string>();
    r.raw_labels = j.at("raw_labels").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("corpus record is missing a field: ") + e.what());
  }
  return r;
}

std::string corpus_to_jsonl(std::span<const ReportRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r);
    out += '\n';
  }
  return out;
}

std::vector<ReportRecord> corpus_from_jsonl(const std::string& text) {
  std::vector<ReportRecord> out;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(line));
    if (!ids.insert(out.back().report_id).second) {
      throw DataError("duplicate report_id " + out.back().report_id);
    }
  }
  if (!out.empty()) {
    const std::size_t width = out.front().raw_labels.size();
    for (const auto& r : out) {
      if (r.raw_labels.size() != width) throw DataError("records disagree on label count");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Examples

std::string model_text(const AggregatedText& text) {
  if (text.impression.empty()) return text.findings;
  if (text.findings.empty()) return text.impression;
  return text.findings + " " + text.impression;
}

namespace {

std::map<std::string, std::vector<ReportRecord>> group_split(std::span<const ReportRecord> records,
                                                             const SplitManifest& manifest,
                                                             const std::string& split) {
  if (!manifest.reports.count(split)) throw ConfigError("manifest has no split '" + split + "'");
  std::map<std::string, std::vector<ReportRecord>> by_patient;
  for (const auto& r : records) {
    auto it = manifest.patient_split.find(r.patient_id);
    if (it == manifest.patient_split.end()) {
      throw DataError("patient " + r.patient_id + " is not in the manifest");
    }
    if (it->second == split) by_patient[r.patient_id].push_back(r);
  }
  return by_patient;
}

}  // namespace

std::vector<Example> build_examples(std::span<const ReportRecord> records,
                                    const SplitManifest& manifest, const std::string& split,
                                    const Vocabulary& vocab, std::size_t max_seq_len) {
  std::vector<Example> out;
  for (const auto& [patient, recs] : group_split(records, manifest, split)) {
    Example ex;
    ex.patient_id = patient;
    const std::size_t width = recs.front().raw_labels.size();
    ex.labels.assign(width, 0.0);
    for (const auto& r : recs) {
      ex.report_ids.push_back(r.report_id);
      const auto bits = normalize_labels(r.raw_labels);
      for (std::size_t l = 0; l < width; ++l)
        if (bits[l]) ex.labels[l] = 1.0;
    }
    std::sort(ex.report_ids.begin(), ex.report_ids.end());
    ex.text = model_text(aggregate_patient_text(recs));
    ex.tokens = tokenize(vocab, ex.text, max_seq_len);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::string> split_texts(std::span<const ReportRecord> records,
                                     const SplitManifest& manifest, const std::string& split) {
  std::vector<std::string> out;
  for (const auto& [patient, recs] : group_split(records, manifest, split)) {
    out.push_back(model_text(aggregate_patient_text(recs)));
  }
  return out;
}

}  // namespace dplora
