#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pathmix/errors.hpp"
#include "pathmix/mvn.hpp"
#include "pathmix/rng.hpp"

namespace pathmix {

struct CourseInfo {
  std::string course_id;
  std::string display_name;
  std::string subject;
};

// Ordered course catalog; the position of a course is its column in every
// enrollment tensor built against this vocabulary.
class CourseVocabulary {
 public:
  CourseVocabulary() = default;

  explicit CourseVocabulary(std::vector<CourseInfo> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  int add(CourseInfo info) {
    if (info.course_id.empty()) throw DataError("vocabulary: empty course_id");
    if (info.subject.empty()) throw DataError("vocabulary: empty subject for " + info.course_id);
    if (index_.count(info.course_id)) throw DataError("vocabulary: duplicate course_id " + info.course_id);
    const int pos = static_cast<int>(entries_.size());
    index_.emplace(info.course_id, pos);
    entries_.push_back(std::move(info));
    return pos;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  const CourseInfo& entry(int j) const { return entries_.at(j); }
  const std::vector<CourseInfo>& entries() const { return entries_; }

  int find(const std::string& course_id) const {
    auto it = index_.find(course_id);
    return it == index_.end() ? -1 : it->second;
  }

  // Stable 64-bit FNV-1a digest of the full entry list; persisted with
  // trained models so column meaning can be checked at load time.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const std::string& s, char sep) {
      for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
      }
      h ^= static_cast<unsigned char>(sep);
      h *= 1099511628211ull;
    };
    for (const auto& e : entries_) {
      mix(e.course_id, '\x1f');
      mix(e.display_name, '\x1f');
      mix(e.subject, '\x1e');
    }
    return h;
  }

  bool operator==(const CourseVocabulary& other) const {
    if (size() != other.size()) return false;
    for (int j = 0; j < size(); ++j) {
      const auto& a = entries_[j];
      const auto& b = other.entries_[j];
      if (a.course_id != b.course_id || a.display_name != b.display_name || a.subject != b.subject)
        return false;
    }
    return true;
  }

 private:
  std::vector<CourseInfo> entries_;
  std::unordered_map<std::string, int> index_;
};

// One timestep's enrollments as a sign pattern the Gaussian machinery can
// query directly.
using BinaryRecord = std::vector<BinaryPattern>;

// N students x T timesteps x M courses of {0,1} indicators.
class Cohort {
 public:
  Cohort(CourseVocabulary vocab, int timesteps, std::vector<std::string> student_ids)
      : vocab_(std::move(vocab)), timesteps_(timesteps), student_ids_(std::move(student_ids)) {
    if (timesteps_ < 1) throw DataError("cohort: timestep count must be >= 1");
    std::unordered_set<std::string> seen;
    for (const auto& id : student_ids_) {
      if (!seen.insert(id).second) throw DataError("cohort: duplicate student_id " + id);
    }
    data_.assign(static_cast<std::size_t>(student_ids_.size()) * timesteps_ * vocab_.size(), 0);
  }

  int num_students() const { return static_cast<int>(student_ids_.size()); }
  int timesteps() const { return timesteps_; }
  int num_courses() const { return vocab_.size(); }
  const CourseVocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& student_ids() const { return student_ids_; }

  std::uint8_t operator()(int student, int t, int course) const { return data_[offset(student, t, course)]; }
  void set(int student, int t, int course, bool taken) { data_[offset(student, t, course)] = taken ? 1 : 0; }

  BinaryRecord record(int student) const {
    BinaryRecord rec(timesteps_);
    for (int t = 0; t < timesteps_; ++t) {
      rec[t].bits.resize(num_courses());
      for (int j = 0; j < num_courses(); ++j) rec[t].bits[j] = (*this)(student, t, j);
    }
    return rec;
  }

  int student_total(int student) const {
    int total = 0;
    for (int t = 0; t < timesteps_; ++t) total += student_timestep_count(student, t);
    return total;
  }

  int student_timestep_count(int student, int t) const {
    int n = 0;
    for (int j = 0; j < num_courses(); ++j) n += (*this)(student, t, j);
    return n;
  }

  long long total_enrollments() const {
    return std::accumulate(data_.begin(), data_.end(), 0ll);
  }

  Cohort subset(const std::vector<int>& rows) const {
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (int r : rows) ids.push_back(student_ids_.at(r));
    Cohort out(vocab_, timesteps_, std::move(ids));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int t = 0; t < timesteps_; ++t)
        for (int j = 0; j < num_courses(); ++j)
          out.set(static_cast<int>(i), t, j, (*this)(rows[i], t, j) != 0);
    return out;
  }

 private:
  std::size_t offset(int student, int t, int course) const {
    return (static_cast<std::size_t>(student) * timesteps_ + t) * vocab_.size() + course;
  }

  CourseVocabulary vocab_;
  int timesteps_;
  std::vector<std::string> student_ids_;
  std::vector<std::uint8_t> data_;
};

// {0,1} mapped to {-1,+1}, one dense N x M matrix per timestep so weighted
// moments reduce to matrix products.
struct RelaxedCohort {
  std::vector<MatrixXd> by_timestep;

  int num_students() const { return by_timestep.empty() ? 0 : static_cast<int>(by_timestep[0].rows()); }
  int timesteps() const { return static_cast<int>(by_timestep.size()); }
  int num_courses() const { return by_timestep.empty() ? 0 : static_cast<int>(by_timestep[0].cols()); }
};

inline RelaxedCohort shift_to_pm1(const Cohort& c) {
  RelaxedCohort out;
  out.by_timestep.resize(c.timesteps());
  for (int t = 0; t < c.timesteps(); ++t) {
    MatrixXd& x = out.by_timestep[t];
    x.resize(c.num_students(), c.num_courses());
    for (int i = 0; i < c.num_students(); ++i)
      for (int j = 0; j < c.num_courses(); ++j) x(i, j) = c(i, t, j) ? 1.0 : -1.0;
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace detail

inline constexpr const char* kTranscriptHeader = "student_id,timestep,course_id,subject";

// Long-format transcript ingestion. Vocabulary and student order follow
// first appearance; duplicate (student, timestep, course) rows collapse.
inline Cohort load_transcripts_csv(std::istream& in, int timestep_count) {
  if (timestep_count < 1) throw DataError("load_transcripts_csv: timestep count must be >= 1");
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_transcripts_csv: empty input");
  {
    std::string header = line;
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != kTranscriptHeader)
      throw DataError("load_transcripts_csv: line 1: expected header '" + std::string(kTranscriptHeader) + "'");
  }

  struct Row {
    int student;
    int t;
    int course;
  };
  std::vector<Row> rows;
  CourseVocabulary vocab;
  std::vector<std::string> student_ids;
  std::unordered_map<std::string, int> student_index;

  long long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 4)
      throw DataError("load_transcripts_csv: line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(fields.size()));
    const std::string& sid = fields[0];
    if (sid.empty()) throw DataError("load_transcripts_csv: line " + std::to_string(line_no) + ": empty student_id");
    int t = 0;
    try {
      std::size_t used = 0;
      t = std::stoi(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError("load_transcripts_csv: line " + std::to_string(line_no) + ": timestep '" + fields[1] +
                      "' is not an integer");
    }
    if (t < 0 || t >= timestep_count)
      throw DataError("load_transcripts_csv: line " + std::to_string(line_no) + ": timestep " + std::to_string(t) +
                      " outside 0.." + std::to_string(timestep_count - 1));
    int course = vocab.find(fields[2]);
    if (course < 0) {
      if (fields[3].empty())
        throw DataError("load_transcripts_csv: line " + std::to_string(line_no) + ": empty subject");
      course = vocab.add(CourseInfo{fields[2], fields[2], fields[3]});
    }
    auto [it, fresh] = student_index.try_emplace(sid, static_cast<int>(student_ids.size()));
    if (fresh) student_ids.push_back(sid);
    rows.push_back(Row{it->second, t, course});
  }

  Cohort cohort(std::move(vocab), timestep_count, std::move(student_ids));
  for (const Row& r : rows) cohort.set(r.student, r.t, r.course, true);
  return cohort;
}

inline void save_transcripts_csv(const Cohort& c, std::ostream& out) {
  out << kTranscriptHeader << '\n';
  for (int i = 0; i < c.num_students(); ++i)
    for (int t = 0; t < c.timesteps(); ++t)
      for (int j = 0; j < c.num_courses(); ++j)
        if (c(i, t, j)) {
          const auto& e = c.vocab().entry(j);
          out << c.student_ids()[i] << ',' << t << ',' << e.course_id << ',' << e.subject << '\n';
        }
}

// Keep students meeting a total-enrollment floor and a per-timestep floor at
// every timestep.
inline Cohort filter_cohort(const Cohort& c, int min_total_courses, int min_per_timestep) {
  if (min_total_courses < 0 || min_per_timestep < 0) throw DataError("filter_cohort: thresholds must be >= 0");
  std::vector<int> keep;
  for (int i = 0; i < c.num_students(); ++i) {
    if (c.student_total(i) < min_total_courses) continue;
    bool ok = true;
    for (int t = 0; t < c.timesteps() && ok; ++t)
      if (c.student_timestep_count(i, t) < min_per_timestep) ok = false;
    if (ok) keep.push_back(i);
  }
  return c.subset(keep);
}

// Disjoint (train, holdout) partition by student; holdout gets
// round(N * fraction) students, chosen by a seeded shuffle.
inline std::pair<Cohort, Cohort> split_cohort(const Cohort& c, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction > 0.0) || !(holdout_fraction < 1.0))
    throw DataError("split_cohort: fraction must be in (0,1)");
  const int n = c.num_students();
  if (n < 2) throw DataError("split_cohort: need at least 2 students");
  const int holdout = static_cast<int>(std::llround(n * holdout_fraction));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> hold(order.begin(), order.begin() + holdout);
  std::vector<int> train(order.begin() + holdout, order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());
  return {c.subset(train), c.subset(hold)};
}

struct NormalFit {
  double mean = 0.0;
  double sd = 0.0;
};

// Descriptive summary: per-timestep per-subject enrollment counts plus the
// per-student total-course histogram with a normal fit.
struct CohortSummary {
  std::vector<std::string> subjects;                 // first-appearance order
  std::vector<std::vector<long long>> subject_counts;  // [subject][t]
  int histogram_min = 0;
  std::vector<long long> histogram;                  // one bin per total value
  NormalFit normal_fit;
  long long total_enrollments = 0;
};

inline CohortSummary summarize(const Cohort& c) {
  CohortSummary s;
  std::unordered_map<std::string, int> subject_index;
  for (int j = 0; j < c.num_courses(); ++j) {
    const std::string& subj = c.vocab().entry(j).subject;
    if (subject_index.try_emplace(subj, static_cast<int>(s.subjects.size())).second)
      s.subjects.push_back(subj);
  }
  s.subject_counts.assign(s.subjects.size(), std::vector<long long>(c.timesteps(), 0));
  for (int i = 0; i < c.num_students(); ++i)
    for (int t = 0; t < c.timesteps(); ++t)
      for (int j = 0; j < c.num_courses(); ++j)
        if (c(i, t, j)) ++s.subject_counts[subject_index[c.vocab().entry(j).subject]][t];

  std::vector<int> totals(c.num_students());
  for (int i = 0; i < c.num_students(); ++i) totals[i] = c.student_total(i);
  if (!totals.empty()) {
    const auto [lo, hi] = std::minmax_element(totals.begin(), totals.end());
    s.histogram_min = *lo;
    s.histogram.assign(*hi - *lo + 1, 0);
    for (int v : totals) ++s.histogram[v - *lo];
    const double n = static_cast<double>(totals.size());
    const double mean = std::accumulate(totals.begin(), totals.end(), 0.0) / n;
    double ss = 0.0;
    for (int v : totals) ss += (v - mean) * (v - mean);
    s.normal_fit = NormalFit{mean, totals.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
  }
  s.total_enrollments = c.total_enrollments();
  return s;
}

// Placeholder catalog for synthesized cohorts: five courses per subject.
inline CourseVocabulary make_synthetic_vocabulary(int num_courses) {
  std::vector<CourseInfo> entries;
  entries.reserve(num_courses);
  for (int j = 0; j < num_courses; ++j) {
    char id[16];
    std::snprintf(id, sizeof(id), "c%03d", j);
    entries.push_back(CourseInfo{id, std::string("course ") + std::to_string(j), "S" + std::to_string(j / 5)});
  }
  return CourseVocabulary(std::move(entries));
}

}  // namespace pathmix
