// flexit/metrics.cc

#include "flexit/metrics.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace flexit {

std::vector<EditOp> AlignTokens(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto D = [&](std::size_t i, std::size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) D(i, 0) = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) D(0, j) = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int diag = D(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      D(i, j) = std::min({diag, D(i, j - 1) + 1, D(i - 1, j) + 1});
    }
  }
  std::vector<EditOp> ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (D(i, j) == D(i - 1, j - 1) + (same ? 0 : 1)) {
        ops.push_back({same ? EditKind::kMatch : EditKind::kSubstitution, static_cast<int>(i - 1),
                       static_cast<int>(j - 1)});
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && D(i, j) == D(i, j - 1) + 1) {
      ops.push_back({EditKind::kInsertion, -1, static_cast<int>(j - 1)});
      --j;
      continue;
    }
    ops.push_back({EditKind::kDeletion, static_cast<int>(i - 1), -1});
    --i;
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

double WerBreakdown::wer() const {
  return ref_length == 0 ? 0.0 : 100.0 * errors() / ref_length;
}

double WerBreakdown::del() const {
  return ref_length == 0 ? 0.0 : 100.0 * deletions / ref_length;
}

WerBreakdown& WerBreakdown::operator+=(const WerBreakdown& o) {
  substitutions += o.substitutions;
  insertions += o.insertions;
  deletions += o.deletions;
  ref_length += o.ref_length;
  return *this;
}

WerBreakdown Wer(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) throw std::invalid_argument("Wer: empty reference");
  WerBreakdown w;
  w.ref_length = static_cast<int>(ref.size());
  for (const EditOp& op : AlignTokens(ref, hyp)) {
    switch (op.kind) {
      case EditKind::kSubstitution: ++w.substitutions; break;
      case EditKind::kInsertion: ++w.insertions; break;
      case EditKind::kDeletion: ++w.deletions; break;
      case EditKind::kMatch: break;
    }
  }
  return w;
}

std::string FormatNumber(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

double ParseNumber(std::string_view s, std::string_view column) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("report: column " + std::string(column) + ": bad number '" +
                                std::string(s) + "'");
  }
  return v;
}

std::string Cell(const std::optional<double>& v) { return v ? FormatNumber(*v) : std::string(); }

void CheckText(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) {
    throw std::invalid_argument("report: field '" + s + "' contains a separator");
  }
}

std::vector<std::string_view> SplitCommas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = line.find(',', start);
    if (p == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, p - start));
    start = p + 1;
  }
}

}  // namespace

std::string ReportCsv(std::span<const ReportRow> rows) {
  std::string out;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) {
    if (i) out += ',';
    out += kReportColumns[i];
  }
  out += '\n';
  for (const ReportRow& r : rows) {
    CheckText(r.experiment);
    CheckText(r.emf_ctx_ms);
    out += r.experiment + ',' + r.emf_ctx_ms + ',' + FormatNumber(r.br_vcmd_ms) + ',' +
           FormatNumber(r.br_dict_ms) + ',' + (r.domain_vec ? "1" : "0") + ',' + Cell(r.dict_wer) +
           ',' + Cell(r.vcmd_wer) + ',' + Cell(r.vcmd_del) + ',' + Cell(r.avg_fd_ms) + ',' +
           Cell(r.l_avg_ms) + ',' + Cell(r.rtf) + '\n';
  }
  return out;
}

std::vector<ReportRow> ParseReportCsv(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t p = text.find('\n', start);
    if (p == std::string_view::npos) p = text.size();
    std::string_view line = text.substr(start, p - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = p + 1;
  }
  if (lines.empty()) throw std::invalid_argument("report: missing header");
  const auto header = SplitCommas(lines[0]);
  if (!std::equal(header.begin(), header.end(), kReportColumns.begin(), kReportColumns.end())) {
    throw std::invalid_argument("report: header '" + std::string(lines[0]) +
                                "' does not match the report schema");
  }
  std::vector<ReportRow> rows;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto c = SplitCommas(lines[li]);
    if (c.size() != kReportColumns.size()) {
      throw std::invalid_argument("report: line " + std::to_string(li + 1) + " has " +
                                  std::to_string(c.size()) + " cells, expected " +
                                  std::to_string(kReportColumns.size()));
    }
    auto opt = [&](std::size_t k) -> std::optional<double> {
      if (c[k].empty()) return std::nullopt;
      return ParseNumber(c[k], kReportColumns[k]);
    };
    ReportRow r;
    r.experiment = std::string(c[0]);
    r.emf_ctx_ms = std::string(c[1]);
    r.br_vcmd_ms = ParseNumber(c[2], kReportColumns[2]);
    r.br_dict_ms = ParseNumber(c[3], kReportColumns[3]);
    if (c[4] != "0" && c[4] != "1") {
      throw std::invalid_argument("report: domain_vec must be 0 or 1, got '" + std::string(c[4]) + "'");
    }
    r.domain_vec = c[4] == "1";
    r.dict_wer = opt(5);
    r.vcmd_wer = opt(6);
    r.vcmd_del = opt(7);
    r.avg_fd_ms = opt(8);
    r.l_avg_ms = opt(9);
    r.rtf = opt(10);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

struct Panel {
  double x0, y0, w, h;  // pixel box of the plotting area
  std::string x_label;
};

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void Add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void Finish() {
    if (lo > hi) {
      lo = 0;
      hi = 1;
    } else if (lo == hi) {
      lo -= 0.5;
      hi += 0.5;
    } else {
      const double pad = 0.08 * (hi - lo);
      lo -= pad;
      hi += pad;
    }
  }
};

std::string Px(double v) {
  return FormatNumber(std::round(v * 10.0) / 10.0);
}

std::string EscapeXml(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

void DrawPanel(std::ostringstream& svg, const Panel& p, std::span<const ReportRow> rows,
               std::optional<double> ReportRow::*x_field) {
  Range xr, yr;
  for (const ReportRow& r : rows) {
    if ((r.*x_field) && r.dict_wer) {
      xr.Add(*(r.*x_field));
      yr.Add(*r.dict_wer);
    }
  }
  xr.Finish();
  yr.Finish();
  auto sx = [&](double v) { return p.x0 + (v - xr.lo) / (xr.hi - xr.lo) * p.w; };
  auto sy = [&](double v) { return p.y0 + p.h - (v - yr.lo) / (yr.hi - yr.lo) * p.h; };

  svg << "<g>\n";
  svg << "<rect x=\"" << Px(p.x0) << "\" y=\"" << Px(p.y0) << "\" width=\"" << Px(p.w)
      << "\" height=\"" << Px(p.h) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = xr.lo + (xr.hi - xr.lo) * k / 4.0;
    const double fy = yr.lo + (yr.hi - yr.lo) * k / 4.0;
    svg << "<text x=\"" << Px(sx(fx)) << "\" y=\"" << Px(p.y0 + p.h + 16)
        << "\" font-size=\"10\" text-anchor=\"middle\">" << FormatNumber(std::round(fx * 100) / 100)
        << "</text>\n";
    svg << "<text x=\"" << Px(p.x0 - 6) << "\" y=\"" << Px(sy(fy) + 3)
        << "\" font-size=\"10\" text-anchor=\"end\">" << FormatNumber(std::round(fy * 100) / 100)
        << "</text>\n";
  }
  svg << "<text x=\"" << Px(p.x0 + p.w / 2) << "\" y=\"" << Px(p.y0 + p.h + 34)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << p.x_label << "</text>\n";
  svg << "<text x=\"" << Px(p.x0 - 42) << "\" y=\"" << Px(p.y0 + p.h / 2)
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 " << Px(p.x0 - 42)
      << ' ' << Px(p.y0 + p.h / 2) << ")\">dict_wer</text>\n";
  for (const ReportRow& r : rows) {
    if (!(r.*x_field) || !r.dict_wer) continue;
    const double cx = sx(*(r.*x_field));
    const double cy = sy(*r.dict_wer);
    svg << "<circle cx=\"" << Px(cx) << "\" cy=\"" << Px(cy) << "\" r=\"4\" fill=\"steelblue\"/>\n";
    svg << "<text x=\"" << Px(cx + 6) << "\" y=\"" << Px(cy - 6) << "\" font-size=\"11\">"
        << EscapeXml(r.experiment) << "</text>\n";
  }
  svg << "</g>\n";
}

}  // namespace

std::string ReportSvg(std::span<const ReportRow> rows) {
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"960\" height=\"420\" "
         "viewBox=\"0 0 960 420\">\n";
  svg << "<rect width=\"960\" height=\"420\" fill=\"white\"/>\n";
  DrawPanel(svg, {70, 30, 380, 320, "avg_fd_ms"}, rows, &ReportRow::avg_fd_ms);
  DrawPanel(svg, {550, 30, 380, 320, "rtf"}, rows, &ReportRow::rtf);
  svg << "</svg>\n";
  return svg.str();
}

void WriteTextFile(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string ReadTextFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace flexit
