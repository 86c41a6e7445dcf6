#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vr {

struct PredictionRecord {
  std::uint64_t sample_id = 0;
  std::size_t true_class = 0;
  std::size_t predicted_class = 0;
  std::vector<double> class_probs;
  int true_score = 1;
  int predicted_score = 1;
  std::vector<double> score_probs;
};

enum class LabelField { product_class, score };

/// Fraction of records whose true label ranks among the k most probable;
/// equal probabilities rank the lower index first.
double topk_accuracy(std::span<const PredictionRecord> records, std::size_t k, LabelField field, int score_low = 1);

/// Fraction of records with |true_score - predicted_score| <= gamma.
double relaxed_accuracy(std::span<const PredictionRecord> records, int gamma);
double exact_score_accuracy(std::span<const PredictionRecord> records);
double class_accuracy(std::span<const PredictionRecord> records);

struct ClassRow {
  std::size_t product_class = 0;
  std::string name;
  std::size_t count = 0;
  double accuracy = 0.0;
  double relaxed_accuracy = 0.0;
  bool empty = false;
};

struct ClassSummary {
  std::vector<ClassRow> rows;
  double mean_accuracy = 0.0;  // unweighted over non-empty classes
  double mean_relaxed_accuracy = 0.0;
  double min_accuracy = 0.0;
  double max_accuracy = 0.0;
  std::size_t empty_classes = 0;
};

/// Per-class score accuracy grouped by true class. Classes without records
/// are flagged and left out of the means.
ClassSummary per_class_summary(std::span<const PredictionRecord> records, std::size_t n_classes, int gamma = 1);
/// Recomputes means and extremes from the rows.
void finalize_summary(ClassSummary& summary);

/// (new - baseline) / baseline
double improvement_ratio(double new_value, double baseline);

/// Row-major n x n counts, rows = true class.
std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const PredictionRecord> records, std::size_t n_classes);

struct MetricsReport {
  std::string kind = "eval";
  std::size_t samples = 0;
  int gamma = 1;
  double top1 = 0.0;
  double top5 = 0.0;
  ClassSummary lower;  // per-class score accuracy with ground-truth routing
  double hierarchical_accuracy = 0.0;
  double hierarchical_relaxed_accuracy = 0.0;
  double combined_accuracy = 0.0;  // top1 x mean lower accuracy
  std::optional<double> flat_accuracy;
  std::optional<double> flat_relaxed_accuracy;
  std::optional<double> improvement;
  std::vector<std::vector<std::size_t>> confusion;
};

/// Every real value rounded to the 4 decimals that emission keeps.
MetricsReport rounded(const MetricsReport& report);

enum class ReportFormat { csv, json };

/// json: report.json. csv: report.csv (class,accuracy,relaxed_accuracy with a
/// trailing mean row), classes.csv (class_name,accuracy,relaxed_accuracy) and
/// confusion.csv. Output bytes depend only on the report.
void emit_report(const MetricsReport& report, const std::filesystem::path& dir, ReportFormat format);
std::string report_json(const MetricsReport& report);
std::string report_csv(const MetricsReport& report);
std::string classes_csv(const MetricsReport& report);
std::string confusion_csv(const MetricsReport& report);

MetricsReport parse_report_json(const std::string& text);
MetricsReport read_report(const std::filesystem::path& dir);
/// Rows of a report.csv / classes.csv file (mean row excluded).
std::vector<ClassRow> parse_class_table_csv(const std::string& text);

/// Human-readable tables for the `report` subcommand.
std::string format_report(const MetricsReport& report);

std::string format_fixed4(double v);

}  // namespace vr
