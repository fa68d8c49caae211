// flexit/metrics.h
//
// Token error rate with S/I/D breakdown, the per-experiment report row and
// its CSV / SVG renderings.

#ifndef FLEXIT_METRICS_H_
#define FLEXIT_METRICS_H_

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flexit {

enum class EditKind { kMatch, kSubstitution, kInsertion, kDeletion };

struct EditOp {
  EditKind kind;
  int ref_index;  // -1 for insertions
  int hyp_index;  // -1 for deletions
};

// Minimal unit-cost alignment. Among equal-cost alignments the backtrace
// prefers, at each step from the end, match/substitution, then insertion,
// then deletion. Ops are returned in sequence order.
std::vector<EditOp> AlignTokens(std::span<const int> ref, std::span<const int> hyp);

struct WerBreakdown {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int ref_length = 0;

  int errors() const { return substitutions + insertions + deletions; }
  double wer() const;  // percent
  double del() const;  // percent
  WerBreakdown& operator+=(const WerBreakdown& o);
};

// Throws std::invalid_argument on an empty reference.
WerBreakdown Wer(std::span<const int> ref, std::span<const int> hyp);

// One report row; an absent metric is an empty CSV cell.
struct ReportRow {
  std::string experiment;
  std::string emf_ctx_ms;  // "120", "120/600" or "random"
  double br_vcmd_ms = 0;
  double br_dict_ms = 0;
  bool domain_vec = false;
  std::optional<double> dict_wer;
  std::optional<double> vcmd_wer;
  std::optional<double> vcmd_del;
  std::optional<double> avg_fd_ms;
  std::optional<double> l_avg_ms;
  std::optional<double> rtf;

  bool operator==(const ReportRow&) const = default;
};

inline constexpr std::array<std::string_view, 11> kReportColumns = {
    "experiment", "emf_ctx_ms", "br_vcmd_ms", "br_dict_ms", "domain_vec", "dict_wer",
    "vcmd_wer",   "vcmd_del",   "avg_fd_ms",  "l_avg_ms",   "rtf"};

// Shortest decimal that parses back to the same double.
std::string FormatNumber(double v);

std::string ReportCsv(std::span<const ReportRow> rows);
// Throws std::invalid_argument if the header differs from kReportColumns or
// a row has the wrong cell count or an unparsable value.
std::vector<ReportRow> ParseReportCsv(std::string_view text);

// Two scatter panels: (avg_fd_ms, dict_wer) and (rtf, dict_wer), points
// labelled with the experiment name. Rows missing a coordinate are skipped.
std::string ReportSvg(std::span<const ReportRow> rows);

void WriteTextFile(const std::filesystem::path& path, std::string_view text);
std::string ReadTextFile(const std::filesystem::path& path);

}  // namespace flexit

#endif  // FLEXIT_METRICS_H_
