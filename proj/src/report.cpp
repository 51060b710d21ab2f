#include "blto/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "blto/common.hpp"
#include "blto/runner.hpp"

namespace blto {

namespace fs = std::filesystem;

namespace {

bool is_run_dir(const fs::path& dir) {
  return fs::is_regular_file(dir / "metrics.jsonl") && fs::is_regular_file(dir / "summary.json");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Renders one panel of line plots at (ox, oy) with size w x h.
void panel(std::ostringstream& svg, double ox, double oy, double w, double h, const std::string& title,
           const std::vector<Series>& series) {
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  const double l = ox + 50, r = ox + w - 10, t = oy + 25, b = oy + h - 30;
  auto px = [&](double x) { return l + (x - xmin) / (xmax - xmin) * (r - l); };
  auto py = [&](double y) { return b - (y - ymin) / (ymax - ymin) * (b - t); };

  svg << "<text x=\"" << (l + r) / 2 << "\" y=\"" << oy + 15 << "\" text-anchor=\"middle\">" << title << "</text>\n";
  svg << "<rect x=\"" << l << "\" y=\"" << t << "\" width=\"" << r - l << "\" height=\"" << b - t
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    char ylab[32], xlab[32];
    std::snprintf(ylab, sizeof ylab, "%.3g", yv);
    std::snprintf(xlab, sizeof xlab, "%.0f", xv);
    svg << "<text x=\"" << l - 4 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << ylab
        << "</text>\n";
    svg << "<text x=\"" << px(xv) << "\" y=\"" << b + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << xlab
        << "</text>\n";
  }
  svg << "<text x=\"" << (l + r) / 2 << "\" y=\"" << b + 27 << "\" text-anchor=\"middle\" font-size=\"11\">epoch</text>\n";
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    svg << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[si % 8] << "\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i])) svg << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << l + 6 << "\" y=\"" << t + 14 + 13 * si << "\" font-size=\"10\" fill=\"" << kPalette[si % 8]
        << "\">" << s.label << "</text>\n";
  }
}

std::string two_panel_svg(const std::vector<RunLedger>& runs, const std::string& left_title,
                          const std::function<double(const MetricsRecord&)>& left, const std::string& right_title,
                          const std::function<double(const MetricsRecord&)>& right) {
  std::vector<Series> ls, rs;
  for (const auto& run : runs) {
    Series a{run.run_id, {}, {}}, b{run.run_id, {}, {}};
    for (const auto& rec : run.records) {
      a.x.push_back(static_cast<double>(rec.epoch));
      a.y.push_back(left(rec));
      b.x.push_back(static_cast<double>(rec.epoch));
      b.y.push_back(right(rec));
    }
    ls.push_back(std::move(a));
    rs.push_back(std::move(b));
  }
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"960\" height=\"340\" font-family=\"sans-serif\" "
         "font-size=\"12\">\n<rect width=\"960\" height=\"340\" fill=\"white\"/>\n";
  panel(svg, 0, 0, 480, 340, left_title, ls);
  panel(svg, 480, 0, 480, 340, right_title, rs);
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

RunLedger load_run(const fs::path& dir) {
  std::ifstream in(dir / "summary.json");
  auto summary = nlohmann::json::parse(in, nullptr, false);
  if (summary.is_discarded()) throw std::runtime_error((dir / "summary.json").string() + ": not valid JSON");
  RunLedger run;
  run.run_id = summary.value("run_id", dir.filename().string());
  run.attack = summary.value("attack", std::string("?"));
  run.method = summary.value("method", std::string("?"));
  for (const auto& row : read_jsonl(dir / "metrics.jsonl")) run.records.push_back(MetricsRecord::from_json(row));
  return run;
}

std::vector<fs::path> find_runs(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) return out;
  if (is_run_dir(root)) out.push_back(root);
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_directory() && is_run_dir(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ReportResult write_report(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  ReportResult result;
  std::map<std::string, RunLedger> runs;
  for (const auto& in : inputs) {
    const auto dirs = find_runs(in);
    if (dirs.empty()) result.missing.push_back(in);
    for (const auto& d : dirs) {
      auto run = load_run(d);
      if (run.records.empty()) {
        result.missing.push_back(d);
        continue;
      }
      runs.emplace(run.run_id, std::move(run));
    }
  }
  if (runs.empty()) throw ArgumentError("no completed ledgers found in the given run directories");

  std::vector<RunLedger> ordered;
  for (auto& [id, run] : runs) ordered.push_back(run);
  std::stable_sort(ordered.begin(), ordered.end(), [](const RunLedger& a, const RunLedger& b) {
    return std::tie(a.attack, a.method, a.run_id) < std::tie(b.attack, b.method, b.run_id);
  });

  // Assemble everything first so a failure leaves no partial report.
  std::vector<std::pair<fs::path, std::string>> files;
  std::ostringstream summary;
  summary << "attack,method,BA,ASR\n";
  for (const auto& run : ordered) {
    std::ostringstream curve;
    curve << "epoch,BA,ASR,ASR_incl_target,S_N,alignment,uniformity\n";
    for (const auto& r : run.records) {
      curve << r.epoch << ',' << fmt(r.ba) << ',' << fmt(r.asr) << ',' << fmt(r.asr_incl_target) << ',' << fmt(r.s_n)
            << ',' << fmt(r.alignment) << ',' << fmt(r.uniformity) << '\n';
    }
    files.emplace_back(fs::path("curves") / (run.run_id + ".csv"), curve.str());
    const auto& last = run.records.back();
    summary << run.attack << ',' << run.method << ',' << fmt(last.ba) << ',' << fmt(last.asr) << '\n';
    result.runs.push_back(run.run_id);
  }
  files.emplace_back("summary.csv", summary.str());
  files.emplace_back("sn_asr.svg", two_panel_svg(
                                       ordered, "normalized similarity S_N", [](const MetricsRecord& r) { return r.s_n; },
                                       "attack success rate", [](const MetricsRecord& r) { return r.asr; }));
  files.emplace_back("align_uniform.svg",
                     two_panel_svg(
                         ordered, "alignment (backdoored data)", [](const MetricsRecord& r) { return r.alignment; },
                         "uniformity (backdoored data)", [](const MetricsRecord& r) { return r.uniformity; }));

  fs::create_directories(out_dir / "curves");
  for (const auto& [rel, text] : files) {
    const fs::path target = out_dir / rel;
    const fs::path tmp = target.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
      out << text;
    }
    fs::rename(tmp, target);
    result.files.push_back(target);
  }
  return result;
}

}  // namespace blto
