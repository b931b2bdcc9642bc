#include "adbench/cohort.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace adbench::cohort {

using nlohmann::json;

Dx parse_dx(const std::string& code) {
  if (code == "CN") return Dx::CN;
  if (code == "SMC") return Dx::SMC;
  if (code == "EMCI") return Dx::EMCI;
  if (code == "MCI") return Dx::MCI;
  if (code == "LMCI") return Dx::LMCI;
  if (code == "AD") return Dx::AD;
  throw Error(msg("unknown diagnosis code '", code, "'"));
}

std::string to_string(Dx d) {
  switch (d) {
    case Dx::CN: return "CN";
    case Dx::SMC: return "SMC";
    case Dx::EMCI: return "EMCI";
    case Dx::MCI: return "MCI";
    case Dx::LMCI: return "LMCI";
    case Dx::AD: return "AD";
  }
  return "?";
}

std::string to_string(CanonicalDx d) {
  switch (d) {
    case CanonicalDx::CN: return "CN";
    case CanonicalDx::MCI: return "MCI";
    case CanonicalDx::AD: return "AD";
  }
  return "?";
}

std::optional<CanonicalDx> normalize_diagnosis(Dx raw) {
  switch (raw) {
    case Dx::CN: return CanonicalDx::CN;
    case Dx::SMC: return std::nullopt;
    case Dx::EMCI:
    case Dx::MCI:
    case Dx::LMCI: return CanonicalDx::MCI;
    case Dx::AD: return CanonicalDx::AD;
  }
  throw Error("unreachable diagnosis value");
}

namespace {

void validate_date(const std::string& d) {
  bool ok = d.size() == 10 && d[4] == '-' && d[7] == '-';
  if (ok)
    for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
      ok = ok && std::isdigit(static_cast<unsigned char>(d[i]));
  if (!ok)
    throw FormatError(msg("invalid ISO-8601 date '", d, "' (expected YYYY-MM-DD)"));
}

std::vector<VisitRecord> sorted_by_date(std::vector<VisitRecord> visits) {
  std::stable_sort(visits.begin(), visits.end(),
                   [](const VisitRecord& a, const VisitRecord& b) {
                     if (a.acquisition_date != b.acquisition_date)
                       return a.acquisition_date < b.acquisition_date;
                     return a.scan_id < b.scan_id;
                   });
  return visits;
}

struct CanonicalVisit {
  VisitRecord visit;
  CanonicalDx dx;
};

std::vector<CanonicalVisit> canonical_visits(const std::vector<VisitRecord>& visits) {
  std::vector<CanonicalVisit> out;
  for (const auto& v : sorted_by_date(visits)) {
    validate_date(v.acquisition_date);
    if (auto c = normalize_diagnosis(v.diagnosis)) out.push_back({v, *c});
  }
  return out;
}

}  // namespace

Visit953Result label_visit953(const std::vector<VisitRecord>& visits) {
  if (visits.empty()) throw Error("label_visit953: empty visit list");
  const auto canon = canonical_visits(visits);

  Visit953Result res;
  if (canon.empty()) {
    res.decision = Visit953Decision::Excluded;
    res.reason = "no canonical visits after dropping SMC";
    return res;
  }

  // AD occurrence anywhere makes the subject AD (converter rule).
  const CanonicalVisit* latest_ad = nullptr;
  bool seen_ad = false;
  for (const auto& cv : canon) {
    if (cv.dx == CanonicalDx::AD) {
      seen_ad = true;
      // strict comparison keeps the earlier visit on date ties
      if (!latest_ad || cv.visit.acquisition_date > latest_ad->visit.acquisition_date)
        latest_ad = &cv;
    } else if (seen_ad) {
      res.ad_reversal_flag = true;
    }
  }
  if (latest_ad) {
    res.decision = Visit953Decision::AD;
    res.scan_id = latest_ad->visit.scan_id;
    res.reason = "AD diagnosis present; latest AD-labeled scan selected";
    return res;
  }

  if (canon.front().dx == CanonicalDx::CN) {
    res.decision = Visit953Decision::NonAD;
    res.scan_id = canon.front().visit.scan_id;  // earliest CN by sort order
    res.reason = "CN-origin without AD conversion; earliest CN-labeled scan selected";
    return res;
  }

  res.decision = Visit953Decision::Excluded;
  res.reason = "MCI trajectory that neither converted to AD nor originated from CN";
  return res;
}

CanonicalDx last_visit_label(const std::vector<VisitRecord>& visits) {
  if (visits.empty()) throw Error("last_visit_label: empty visit list");
  const auto canon = canonical_visits(visits);
  if (canon.empty())
    throw Error(msg("last_visit_label: subject '", visits.front().subject_id,
                    "' has no canonical visits"));
  return canon.back().dx;
}

Labeling parse_labeling(const std::string& name) {
  if (name == "visit953") return Labeling::Visit953;
  if (name == "last") return Labeling::Last;
  throw ConfigError(msg("unknown labeling strategy '", name,
                        "' (expected visit953 or last)"));
}

std::string to_string(Labeling l) {
  return l == Labeling::Visit953 ? "visit953" : "last";
}

LabelingOutcome apply_labeling(const std::vector<VisitRecord>& visits,
                               Labeling strategy) {
  LabelingOutcome out;
  const auto groups = group_by_subject(visits);
  if (strategy == Labeling::Visit953) {
    out.class_names = {"NonAD", "AD"};
    out.positive_class = 1;
    for (const auto& [sid, subject_visits] : groups) {
      const Visit953Result r = label_visit953(subject_visits);
      json a;
      a["subject_id"] = sid;
      a["strategy"] = "visit953";
      a["reason"] = r.reason;
      if (r.ad_reversal_flag) a["flags"] = {"ad_followed_by_non_ad"};
      switch (r.decision) {
        case Visit953Decision::Excluded:
          a["decision"] = "excluded";
          break;
        case Visit953Decision::AD:
        case Visit953Decision::NonAD: {
          a["decision"] = r.decision == Visit953Decision::AD ? "AD" : "NonAD";
          a["scan_id"] = r.scan_id;
          for (const auto& v : subject_visits)
            if (v.scan_id == r.scan_id) {
              out.samples.push_back({sid, v.scan_id, v.acquisition_date,
                                     v.volume_path,
                                     r.decision == Visit953Decision::AD ? 1 : 0});
              break;
            }
          break;
        }
      }
      out.audit_lines.push_back(a.dump());
    }
  } else {
    out.class_names = {"CN", "MCI", "AD"};
    out.positive_class = 2;
    for (const auto& [sid, subject_visits] : groups) {
      const auto canon = canonical_visits(subject_visits);
      json a;
      a["subject_id"] = sid;
      a["strategy"] = "last";
      if (canon.empty()) {
        a["decision"] = "excluded";
        a["reason"] = "no canonical visits after dropping SMC";
        out.audit_lines.push_back(a.dump());
        continue;
      }
      const CanonicalDx lbl = canon.back().dx;
      a["decision"] = to_string(lbl);
      a["reason"] = "diagnosis at final recorded visit applied to all scans";
      a["scan_count"] = canon.size();
      out.audit_lines.push_back(a.dump());
      for (const auto& cv : canon)
        out.samples.push_back({sid, cv.visit.scan_id, cv.visit.acquisition_date,
                               cv.visit.volume_path, static_cast<int>(lbl)});
    }
  }
  return out;
}

Selection parse_selection(const std::string& name) {
  if (name == "all") return Selection::All;
  if (name == "first") return Selection::First;
  if (name == "first_w_train" || name == "first_with_train")
    return Selection::FirstWithTrain;
  throw ConfigError(msg("unknown selection strategy '", name,
                        "' (expected all, first or first_w_train)"));
}

std::string to_string(Selection s) {
  switch (s) {
    case Selection::All: return "all";
    case Selection::First: return "first";
    case Selection::FirstWithTrain: return "first_w_train";
  }
  return "?";
}

std::vector<LabeledSample> first_scan_per_subject(std::vector<LabeledSample> samples) {
  std::stable_sort(samples.begin(), samples.end(),
                   [](const LabeledSample& a, const LabeledSample& b) {
                     if (a.subject_id != b.subject_id) return a.subject_id < b.subject_id;
                     if (a.acquisition_date != b.acquisition_date)
                       return a.acquisition_date < b.acquisition_date;
                     return a.scan_id < b.scan_id;
                   });
  std::vector<LabeledSample> out;
  for (const auto& s : samples)
    if (out.empty() || out.back().subject_id != s.subject_id) out.push_back(s);
  return out;
}

SplitPlan stratified_subject_kfold(
    const std::vector<std::pair<std::string, int>>& subject_labels, int k,
    std::uint64_t seed) {
  if (k < 2) throw ConfigError(msg("k-fold requires k >= 2, got ", k));
  std::map<int, std::vector<std::string>> by_class;
  std::set<std::string> seen;
  for (const auto& [sid, label] : subject_labels) {
    if (!seen.insert(sid).second)
      throw Error(msg("duplicate subject '", sid, "' in k-fold input"));
    by_class[label].push_back(sid);
  }
  for (const auto& [label, subjects] : by_class)
    if (subjects.size() < static_cast<std::size_t>(k))
      throw Error(msg("class ", label, " has ", subjects.size(),
                      " subjects, fewer than k=", k));

  SplitPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.fold_subjects.assign(static_cast<std::size_t>(k), {});
  Rng rng = make_rng(mix_seed(seed, 0x6b666f6cULL));
  std::size_t next_fold = 0;  // deal position carries across classes
  for (auto& [label, subjects] : by_class) {
    std::sort(subjects.begin(), subjects.end());
    std::shuffle(subjects.begin(), subjects.end(), rng);
    for (const auto& sid : subjects) {
      plan.fold_subjects[next_fold].push_back(sid);
      next_fold = (next_fold + 1) % static_cast<std::size_t>(k);
    }
  }
  return plan;
}

FoldSplit make_fold_split(const LabelingOutcome& labeled, const SplitPlan& plan,
                          int fold, Selection sel) {
  if (fold < 0 || fold >= plan.k)
    throw ConfigError(msg("fold ", fold, " out of range [0,", plan.k, ")"));
  const std::size_t test_fold = static_cast<std::size_t>(fold);
  const std::size_t val_fold = static_cast<std::size_t>((fold + 1) % plan.k);

  std::map<std::string, std::size_t> fold_of;
  for (std::size_t f = 0; f < plan.fold_subjects.size(); ++f)
    for (const auto& sid : plan.fold_subjects[f]) fold_of[sid] = f;

  FoldSplit split;
  for (const auto& s : labeled.samples) {
    auto it = fold_of.find(s.subject_id);
    if (it == fold_of.end()) continue;  // excluded subjects are not in the plan
    if (it->second == test_fold)
      split.test.push_back(s);
    else if (it->second == val_fold)
      split.val.push_back(s);
    else
      split.train.push_back(s);
  }
  if (sel == Selection::First || sel == Selection::FirstWithTrain) {
    split.val = first_scan_per_subject(std::move(split.val));
    split.test = first_scan_per_subject(std::move(split.test));
  }
  if (sel == Selection::FirstWithTrain)
    split.train = first_scan_per_subject(std::move(split.train));
  return split;
}

std::vector<double> class_weights(const std::vector<std::size_t>& counts) {
  if (counts.empty()) throw ConfigError("class_weights: no counts");
  std::size_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0)
      throw Error(msg("class_weights: class ", i, " has zero samples"));
    total += counts[i];
  }
  std::vector<double> w(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    w[i] = static_cast<double>(total) /
           (static_cast<double>(counts.size()) * static_cast<double>(counts[i]));
  return w;
}

static const char* kManifestHeader =
    "subject_id,scan_id,acquisition_date,diagnosis,volume_path";

std::vector<VisitRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open manifest ", path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(msg("empty manifest ", path));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw FormatError(msg("manifest ", path, ": unexpected header '", line,
                          "', expected '", kManifestHeader, "'"));
  std::vector<VisitRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5)
      throw FormatError(msg("manifest ", path, " line ", lineno, ": expected 5 "
                            "fields, got ", fields.size()));
    VisitRecord v;
    v.subject_id = fields[0];
    v.scan_id = fields[1];
    v.acquisition_date = fields[2];
    validate_date(v.acquisition_date);
    v.diagnosis = parse_dx(fields[3]);
    v.volume_path = fields[4];
    out.push_back(std::move(v));
  }
  return out;
}

void save_manifest(const std::vector<VisitRecord>& visits, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(msg("cannot write manifest ", path));
  out << kManifestHeader << "\n";
  for (const auto& v : visits)
    out << v.subject_id << "," << v.scan_id << "," << v.acquisition_date << ","
        << to_string(v.diagnosis) << "," << v.volume_path << "\n";
}

void write_audit_log(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(msg("cannot write audit log ", path));
  for (const auto& l : lines) out << l << "\n";
}

std::map<std::string, std::vector<VisitRecord>> group_by_subject(
    const std::vector<VisitRecord>& visits) {
  std::map<std::string, std::vector<VisitRecord>> groups;
  for (const auto& v : visits) groups[v.subject_id].push_back(v);
  for (auto& [sid, vs] : groups) vs = sorted_by_date(std::move(vs));
  return groups;
}

}  // namespace adbench::cohort
