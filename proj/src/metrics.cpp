#include "visreview/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "visreview/error.hpp"
#include "visreview/serialize.hpp"

namespace vr {

double topk_accuracy(std::span<const PredictionRecord> records, std::size_t k, LabelField field, int score_low) {
  if (records.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : records) {
    const auto& probs = field == LabelField::product_class ? r.class_probs : r.score_probs;
    if (k == 0 || k > probs.size()) {
      fail(ErrorCode::InvalidK, "k = " + std::to_string(k) + " with " + std::to_string(probs.size()) + " labels");
    }
    const long label = field == LabelField::product_class ? static_cast<long>(r.true_class)
                                                          : static_cast<long>(r.true_score - score_low);
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
      fail(ErrorCode::LabelOutOfRange, "true label outside the probability vector");
    }
    const auto t = static_cast<std::size_t>(label);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      if (probs[j] > probs[t] || (probs[j] == probs[t] && j < t)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double relaxed_accuracy(std::span<const PredictionRecord> records, int gamma) {
  if (gamma < 0) fail(ErrorCode::InvalidArgument, "gamma must be non-negative");
  if (records.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : records) {
    if (std::abs(r.true_score - r.predicted_score) <= gamma) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double exact_score_accuracy(std::span<const PredictionRecord> records) { return relaxed_accuracy(records, 0); }

double class_accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) return 0.0;
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [](const PredictionRecord& r) { return r.true_class == r.predicted_class; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

void finalize_summary(ClassSummary& summary) {
  double acc = 0.0, relaxed = 0.0;
  std::size_t present = 0;
  summary.empty_classes = 0;
  summary.min_accuracy = 1.0;
  summary.max_accuracy = 0.0;
  for (const auto& row : summary.rows) {
    if (row.empty) {
      ++summary.empty_classes;
      continue;
    }
    ++present;
    acc += row.accuracy;
    relaxed += row.relaxed_accuracy;
    summary.min_accuracy = std::min(summary.min_accuracy, row.accuracy);
    summary.max_accuracy = std::max(summary.max_accuracy, row.accuracy);
  }
  if (present == 0) {
    summary.min_accuracy = summary.max_accuracy = 0.0;
    summary.mean_accuracy = summary.mean_relaxed_accuracy = 0.0;
    return;
  }
  summary.mean_accuracy = acc / static_cast<double>(present);
  summary.mean_relaxed_accuracy = relaxed / static_cast<double>(present);
}

ClassSummary per_class_summary(std::span<const PredictionRecord> records, std::size_t n_classes, int gamma) {
  if (gamma < 0) fail(ErrorCode::InvalidArgument, "gamma must be non-negative");
  std::vector<std::size_t> count(n_classes, 0), exact(n_classes, 0), near(n_classes, 0);
  for (const auto& r : records) {
    if (r.true_class >= n_classes) fail(ErrorCode::LabelOutOfRange, "record class outside the summary range");
    ++count[r.true_class];
    const int diff = std::abs(r.true_score - r.predicted_score);
    if (diff == 0) ++exact[r.true_class];
    if (diff <= gamma) ++near[r.true_class];
  }
  ClassSummary summary;
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassRow row;
    row.product_class = c;
    row.name = "class_" + std::to_string(c);
    row.count = count[c];
    row.empty = count[c] == 0;
    if (!row.empty) {
      row.accuracy = static_cast<double>(exact[c]) / static_cast<double>(count[c]);
      row.relaxed_accuracy = static_cast<double>(near[c]) / static_cast<double>(count[c]);
    }
    summary.rows.push_back(row);
  }
  finalize_summary(summary);
  return summary;
}

double improvement_ratio(double new_value, double baseline) {
  if (!(baseline > 0.0)) fail(ErrorCode::ZeroBaseline, "improvement ratio needs a positive baseline");
  return (new_value - baseline) / baseline;
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const PredictionRecord> records,
                                                       std::size_t n_classes) {
  std::vector<std::vector<std::size_t>> m(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (const auto& r : records) {
    if (r.true_class >= n_classes || r.predicted_class >= n_classes) {
      fail(ErrorCode::LabelOutOfRange, "record class outside the confusion matrix");
    }
    ++m[r.true_class][r.predicted_class];
  }
  return m;
}

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

std::optional<double> round4(const std::optional<double>& v) {
  if (!v) return std::nullopt;
  return round4(*v);
}

}  // namespace

std::string format_fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", round4(v) + 0.0);
  return buf;
}

MetricsReport rounded(const MetricsReport& report) {
  MetricsReport r = report;
  r.top1 = round4(r.top1);
  r.top5 = round4(r.top5);
  for (auto& row : r.lower.rows) {
    row.accuracy = round4(row.accuracy);
    row.relaxed_accuracy = round4(row.relaxed_accuracy);
  }
  r.lower.mean_accuracy = round4(r.lower.mean_accuracy);
  r.lower.mean_relaxed_accuracy = round4(r.lower.mean_relaxed_accuracy);
  r.lower.min_accuracy = round4(r.lower.min_accuracy);
  r.lower.max_accuracy = round4(r.lower.max_accuracy);
  r.hierarchical_accuracy = round4(r.hierarchical_accuracy);
  r.hierarchical_relaxed_accuracy = round4(r.hierarchical_relaxed_accuracy);
  r.combined_accuracy = round4(r.combined_accuracy);
  r.flat_accuracy = round4(r.flat_accuracy);
  r.flat_relaxed_accuracy = round4(r.flat_relaxed_accuracy);
  r.improvement = round4(r.improvement);
  return r;
}

std::string report_json(const MetricsReport& input) {
  const MetricsReport r = rounded(input);
  // ordered_json keeps keys in insertion order, which fixes the byte layout
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (const auto& row : r.lower.rows) {
    classes.push_back({{"class", row.product_class},
                       {"name", row.name},
                       {"count", row.count},
                       {"accuracy", row.accuracy},
                       {"relaxed_accuracy", row.relaxed_accuracy},
                       {"empty", row.empty}});
  }
  auto optional_value = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    if (v) return *v;
    return nullptr;
  };
  nlohmann::ordered_json j;
  j["kind"] = r.kind;
  j["samples"] = r.samples;
  j["gamma"] = r.gamma;
  j["top1"] = r.top1;
  j["top5"] = r.top5;
  j["mean_accuracy"] = r.lower.mean_accuracy;
  j["mean_relaxed_accuracy"] = r.lower.mean_relaxed_accuracy;
  j["min_class_accuracy"] = r.lower.min_accuracy;
  j["max_class_accuracy"] = r.lower.max_accuracy;
  j["hierarchical_accuracy"] = r.hierarchical_accuracy;
  j["hierarchical_relaxed_accuracy"] = r.hierarchical_relaxed_accuracy;
  j["combined_accuracy"] = r.combined_accuracy;
  j["flat_accuracy"] = optional_value(r.flat_accuracy);
  j["flat_relaxed_accuracy"] = optional_value(r.flat_relaxed_accuracy);
  j["improvement"] = optional_value(r.improvement);
  j["classes"] = classes;
  j["confusion"] = r.confusion;
  return j.dump(2) + "\n";
}

std::string report_csv(const MetricsReport& input) {
  const MetricsReport r = rounded(input);
  std::string out = "class,accuracy,relaxed_accuracy\n";
  for (const auto& row : r.lower.rows) {
    out += row.name + "," + (row.empty ? "" : format_fixed4(row.accuracy)) + "," +
           (row.empty ? "" : format_fixed4(row.relaxed_accuracy)) + "\n";
  }
  out += "mean," + format_fixed4(r.lower.mean_accuracy) + "," + format_fixed4(r.lower.mean_relaxed_accuracy) + "\n";
  return out;
}

std::string classes_csv(const MetricsReport& input) {
  const MetricsReport r = rounded(input);
  std::string out = "class_name,accuracy,relaxed_accuracy\n";
  for (const auto& row : r.lower.rows) {
    if (row.empty) continue;
    out += row.name + "," + format_fixed4(row.accuracy) + "," + format_fixed4(row.relaxed_accuracy) + "\n";
  }
  return out;
}

std::string confusion_csv(const MetricsReport& r) {
  std::string out = "true\\predicted";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) out += ",class_" + std::to_string(c);
  out += "\n";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    out += "class_" + std::to_string(c);
    for (auto v : r.confusion[c]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

void emit_report(const MetricsReport& report, const std::filesystem::path& dir, ReportFormat format) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create report directory " + dir.string());
  if (format == ReportFormat::json) {
    write_file(dir / "report.json", report_json(report));
    return;
  }
  write_file(dir / "report.csv", report_csv(report));
  write_file(dir / "classes.csv", classes_csv(report));
  write_file(dir / "confusion.csv", confusion_csv(report));
}

MetricsReport parse_report_json(const std::string& text) {
  MetricsReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    auto optional_value = [&](const char* key) -> std::optional<double> {
      if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
      return j.at(key).get<double>();
    };
    r.kind = j.at("kind").get<std::string>();
    r.samples = j.at("samples").get<std::size_t>();
    r.gamma = j.at("gamma").get<int>();
    r.top1 = j.at("top1").get<double>();
    r.top5 = j.at("top5").get<double>();
    r.lower.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.lower.mean_relaxed_accuracy = j.at("mean_relaxed_accuracy").get<double>();
    r.lower.min_accuracy = j.at("min_class_accuracy").get<double>();
    r.lower.max_accuracy = j.at("max_class_accuracy").get<double>();
    r.hierarchical_accuracy = j.at("hierarchical_accuracy").get<double>();
    r.hierarchical_relaxed_accuracy = j.at("hierarchical_relaxed_accuracy").get<double>();
    r.combined_accuracy = j.at("combined_accuracy").get<double>();
    r.flat_accuracy = optional_value("flat_accuracy");
    r.flat_relaxed_accuracy = optional_value("flat_relaxed_accuracy");
    r.improvement = optional_value("improvement");
    for (const auto& c : j.at("classes")) {
      ClassRow row;
      row.product_class = c.at("class").get<std::size_t>();
      row.name = c.at("name").get<std::string>();
      row.count = c.at("count").get<std::size_t>();
      row.accuracy = c.at("accuracy").get<double>();
      row.relaxed_accuracy = c.at("relaxed_accuracy").get<double>();
      row.empty = c.at("empty").get<bool>();
      if (row.empty) ++r.lower.empty_classes;
      r.lower.rows.push_back(row);
    }
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptManifest, "malformed report: " + std::string(e.what()));
  }
  return r;
}

MetricsReport read_report(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "report.json" : dir;
  return parse_report_json(read_file(path));
}

std::vector<ClassRow> parse_class_table_csv(const std::string& text) {
  std::vector<ClassRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "class,accuracy,relaxed_accuracy" && line != "class_name,accuracy,relaxed_accuracy") {
    fail(ErrorCode::CorruptManifest, "unexpected class table header '" + line + "'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, acc, relaxed;
    std::getline(fields, name, ',');
    std::getline(fields, acc, ',');
    std::getline(fields, relaxed, ',');
    if (name == "mean") continue;
    ClassRow row;
    row.name = name;
    if (name.rfind("class_", 0) == 0) row.product_class = std::stoul(name.substr(6));
    row.empty = acc.empty();
    if (!row.empty) {
      row.accuracy = std::stod(acc);
      row.relaxed_accuracy = std::stod(relaxed);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_report(const MetricsReport& input) {
  const MetricsReport r = rounded(input);
  std::ostringstream out;
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * v);
    return std::string(buf);
  };
  out << "report kind: " << r.kind << "   samples: " << r.samples << "   gamma: " << r.gamma << "\n\n";
  out << "Higher-level model\n";
  out << "  top-1 accuracy              " << pct(r.top1) << "\n";
  out << "  top-5 accuracy              " << pct(r.top5) << "\n\n";
  out << "Lower-level models (ground-truth routing)\n";
  out << "  class         accuracy   relaxed\n";
  for (const auto& row : r.lower.rows) {
    char line[128];
    if (row.empty) {
      std::snprintf(line, sizeof line, "  %-12s  %8s   %7s\n", row.name.c_str(), "-", "-");
    } else {
      std::snprintf(line, sizeof line, "  %-12s  %8s  %8s\n", row.name.c_str(), pct(row.accuracy).c_str(),
                    pct(row.relaxed_accuracy).c_str());
    }
    out << line;
  }
  out << "  mean          " << pct(r.lower.mean_accuracy) << "   " << pct(r.lower.mean_relaxed_accuracy) << "\n";
  out << "  highest       " << pct(r.lower.max_accuracy) << "\n";
  out << "  lowest        " << pct(r.lower.min_accuracy) << "\n\n";
  out << "Hierarchical architecture\n";
  out << "  end-to-end accuracy         " << pct(r.hierarchical_accuracy) << "\n";
  out << "  end-to-end relaxed accuracy " << pct(r.hierarchical_relaxed_accuracy) << "\n";
  out << "  top-1 x mean lower accuracy " << pct(r.combined_accuracy) << "\n";
  if (r.flat_accuracy) {
    out << "\nSingle-level (no hierarchy)\n";
    out << "  accuracy                    " << pct(*r.flat_accuracy) << "\n";
    if (r.flat_relaxed_accuracy) out << "  relaxed accuracy            " << pct(*r.flat_relaxed_accuracy) << "\n";
    if (r.improvement) out << "  hierarchical improvement    " << pct(*r.improvement) << "\n";
  }
  return out.str();
}

}  // namespace vr
