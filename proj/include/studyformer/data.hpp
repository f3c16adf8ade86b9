#pragma once

// Studies, manifests, study-level label aggregation and date-based splitting.
//
// Manifest file (UTF-8, tab separated):
//   labels <TAB> name_1 <TAB> ... <TAB> name_L
//   study_id <TAB> YYYY-MM-DD <TAB> view;view;... <TAB> l,l,...;l,l,...;...
// View paths are relative to the manifest's directory unless absolute. Each
// ';'-separated label group is the 0/1 vector of the matching view.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/rng.hpp"

namespace studyformer {

using LabelVector = std::vector<std::uint8_t>;
using LabelMatrix = std::vector<LabelVector>;  // views x labels

// Column-wise maximum: a study carries a label if any of its views does.
inline LabelVector aggregate_study_labels(const LabelMatrix& view_labels) {
  if (view_labels.empty() || view_labels.front().empty()) {
    throw ContractError("aggregate_study_labels: empty label matrix");
  }
  LabelVector out(view_labels.front().size(), 0);
  for (const auto& row : view_labels) {
    if (row.size() != out.size()) throw ContractError("aggregate_study_labels: ragged label matrix");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] > 1) throw ContractError("aggregate_study_labels: labels must be 0 or 1");
      out[i] = std::max(out[i], row[i]);
    }
  }
  return out;
}

using Date = std::chrono::year_month_day;

inline Date parse_date(const std::string& text) {
  int y = 0;
  unsigned m = 0, d = 0;
  char dash1 = 0, dash2 = 0;
  std::istringstream in(text);
  if (!(in >> y >> dash1 >> m >> dash2 >> d) || dash1 != '-' || dash2 != '-' || !in.eof()) {
    throw ValidationError("invalid ISO-8601 date '" + text + "'");
  }
  const Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw ValidationError("invalid calendar date '" + text + "'");
  return date;
}

inline std::string format_date(const Date& date) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(date.year()),
                static_cast<unsigned>(date.month()), static_cast<unsigned>(date.day()));
  return buf;
}

struct Study {
  std::string id;
  Date date{};
  std::vector<std::string> views;  // as written in the manifest
  LabelMatrix view_labels;
  LabelVector labels;  // aggregate_study_labels(view_labels)

  std::size_t n_views() const { return views.size(); }
};

struct Manifest {
  std::vector<std::string> label_names;
  std::vector<Study> studies;
  std::filesystem::path root;  // base directory for relative view paths

  std::filesystem::path view_path(const Study& study, std::size_t k) const {
    const std::filesystem::path p(study.views.at(k));
    return p.is_absolute() ? p : root / p;
  }
};

namespace detail {

inline std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!text.empty() && text.back() == sep) out.emplace_back();
  return out;
}

}  // namespace detail

// Parses and validates manifest text. When check_files is set every view path
// must exist; all missing paths are listed in one error.
inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& root, bool check_files = true) {
  Manifest m;
  m.root = root;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest: missing header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split(line, '\t');
  if (header.empty() || header.front() != "labels" || header.size() < 2) {
    throw ValidationError("manifest: header must be 'labels<TAB>name...'");
  }
  m.label_names.assign(header.begin() + 1, header.end());
  const std::size_t n_labels = m.label_names.size();

  std::unordered_set<std::string> ids;
  std::vector<std::string> missing;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split(line, '\t');
    const std::string where = "manifest line " + std::to_string(line_no);
    if (fields.size() != 4) throw ValidationError(where + ": expected 4 tab-separated fields");
    Study s;
    s.id = fields[0];
    if (s.id.empty()) throw ValidationError(where + ": empty study id");
    if (!ids.insert(s.id).second) throw ValidationError("manifest: duplicate study id '" + s.id + "'");
    s.date = parse_date(fields[1]);
    s.views = detail::split(fields[2], ';');
    const auto groups = detail::split(fields[3], ';');
    if (s.views.empty() || groups.size() != s.views.size()) {
      throw ValidationError(where + " (study '" + s.id + "'): " + std::to_string(s.views.size()) + " views but " +
                            std::to_string(groups.size()) + " label groups");
    }
    for (const auto& group : groups) {
      const auto values = detail::split(group, ',');
      if (values.size() != n_labels) {
        throw ValidationError(where + " (study '" + s.id + "'): label vector of length " +
                              std::to_string(values.size()) + ", expected " + std::to_string(n_labels));
      }
      LabelVector row;
      for (const auto& v : values) {
        if (v != "0" && v != "1") throw ValidationError(where + ": label values must be 0 or 1, got '" + v + "'");
        row.push_back(v == "1" ? 1 : 0);
      }
      s.view_labels.push_back(std::move(row));
    }
    s.labels = aggregate_study_labels(s.view_labels);
    m.studies.push_back(std::move(s));
    if (check_files) {
      const auto& st = m.studies.back();
      for (std::size_t k = 0; k < st.n_views(); ++k) {
        const auto p = m.view_path(st, k);
        if (!std::filesystem::exists(p)) missing.push_back(p.string());
      }
    }
  }
  if (m.studies.empty()) throw ValidationError("manifest: no studies");
  if (!missing.empty()) {
    std::string msg = "manifest: missing view files:";
    for (const auto& p : missing) msg += " " + p;
    throw ValidationError(msg);
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), check_files);
}

inline void write_manifest(std::ostream& out, const Manifest& m) {
  out << "labels";
  for (const auto& name : m.label_names) out << '\t' << name;
  out << '\n';
  for (const auto& s : m.studies) {
    out << s.id << '\t' << format_date(s.date) << '\t';
    for (std::size_t k = 0; k < s.views.size(); ++k) out << (k ? ";" : "") << s.views[k];
    out << '\t';
    for (std::size_t k = 0; k < s.view_labels.size(); ++k) {
      if (k) out << ';';
      for (std::size_t i = 0; i < s.view_labels[k].size(); ++i) out << (i ? "," : "") << int(s.view_labels[k][i]);
    }
    out << '\n';
  }
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  write_manifest(out, m);
}

inline std::uint64_t manifest_hash(const Manifest& m) {
  std::uint64_t h = fnv1a("manifest");
  for (const auto& s : m.studies) h = fnv1a(s.id + '\n', h);
  return h;
}

struct ManifestSplit {
  Manifest train, val, test;
  std::vector<std::string> warnings;
};

// Studies dated before `cutoff` train; the rest are shuffled (seeded by the
// manifest hash and `seed`) and divided into validation and test, each keeping
// manifest order. Studies are never divided across partitions.
inline ManifestSplit split_by_study(const Manifest& m, const Date& cutoff, double val_fraction,
                                   std::uint64_t seed = 0) {
  if (m.studies.empty()) throw ContractError("split_by_study: empty manifest");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ContractError("split_by_study: val_fraction must lie in (0, 1)");
  }
  ManifestSplit out;
  for (Manifest* part : {&out.train, &out.val, &out.test}) {
    part->label_names = m.label_names;
    part->root = m.root;
  }
  std::vector<std::size_t> later;
  for (std::size_t i = 0; i < m.studies.size(); ++i) {
    if (m.studies[i].date < cutoff) {
      out.train.studies.push_back(m.studies[i]);
    } else {
      later.push_back(i);
    }
  }
  if (later.empty()) out.warnings.push_back("all studies precede the cutoff; validation and test are empty");
  if (out.train.studies.empty()) out.warnings.push_back("no study precedes the cutoff; training set is empty");

  std::vector<std::size_t> shuffled = later;
  Rng rng(derive_seed(seed ^ manifest_hash(m), "split"));
  std::shuffle(shuffled.begin(), shuffled.end(), rng.engine());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(later.size())));
  std::vector<char> is_val(m.studies.size(), 0);
  for (std::size_t k = 0; k < n_val; ++k) is_val[shuffled[k]] = 1;
  for (std::size_t i : later) (is_val[i] ? out.val : out.test).studies.push_back(m.studies[i]);
  return out;
}

}  // namespace studyformer
