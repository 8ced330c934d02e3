#include "dalip/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dalip/twintower.hpp"  // format_double

namespace dalip {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

// Chart geometry (user units; the viewBox is fixed).
constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 64, kRight = 616, kTop = 40, kBottom = 372;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
constexpr size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

struct Range {
  double lo = 0, hi = 1;
};

Range padded_range(double lo, double hi) {
  if (!(lo <= hi)) return {0.0, 1.0};
  if (lo == hi) {
    const double pad = lo == 0.0 ? 0.5 : std::abs(lo) * 0.1;
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

// Tick label: shortest decimal of a value rounded to 6 significant digits,
// so axis text stays short and still deterministic.
std::string tick_label(double v) {
  if (v == 0.0) return "0";
  const double scale = std::pow(10.0, 5 - std::floor(std::log10(std::abs(v))));
  return format_double(std::round(v * scale) / scale);
}

}  // namespace

Index CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<Index>(i);
  throw ParseError("metrics CSV: no column named '" + name + "'");
}

CsvTable read_numeric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("metrics CSV: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("metrics CSV: " + path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  CsvTable table;
  table.columns = split_fields(line);
  if (table.columns.empty() || table.columns.front().empty())
    throw ParseError("metrics CSV line 1: missing header");

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != table.columns.size())
      throw ParseError("metrics CSV line " + std::to_string(line_no) + ": expected " +
                       std::to_string(table.columns.size()) + " fields, got " +
                       std::to_string(fields.size()));
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& field : fields) {
      double v = 0;
      const char* begin = field.data();
      auto [ptr, ec] = std::from_chars(begin, begin + field.size(), v);
      if (ec != std::errc{} || ptr != begin + field.size())
        throw ParseError("metrics CSV line " + std::to_string(line_no) + ": bad number '" +
                         field + "'");
      row.push_back(v);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string render_svg(const ChartSpec& chart) {
  for (const auto& s : chart.series)
    if (s.x.size() != s.y.size())
      throw ShapeError("chart series '" + s.label + "': x and y lengths differ");

  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  bool any = false;
  for (const auto& s : chart.series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        throw NumericError("chart series '" + s.label + "': non-finite point");
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
      any = true;
    }
  }
  const Range xr = any ? padded_range(x_lo, x_hi) : Range{0.0, 1.0};
  const Range yr = any ? padded_range(y_lo, y_hi) : Range{0.0, 1.0};
  const auto sx = [&](double v) {
    return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * (kRight - kLeft);
  };
  const auto sy = [&](double v) {
    return kBottom - (v - yr.lo) / (yr.hi - yr.lo) * (kBottom - kTop);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kWidth << ' ' << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"20\" text-anchor=\"middle\" "
      << "font-size=\"15\">" << chart.title << "</text>\n";

  // Axes with five ticks per side.
  svg << "<g stroke=\"black\" fill=\"none\">\n";
  svg << "<polyline points=\"" << kLeft << ',' << kTop << ' ' << kLeft << ',' << kBottom << ' '
      << kRight << ',' << kBottom << "\"/>\n</g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    const double fy = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    svg << "<line x1=\"" << format_double(sx(fx)) << "\" y1=\"" << kBottom << "\" x2=\""
        << format_double(sx(fx)) << "\" y2=\"" << kBottom + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << format_double(sx(fx)) << "\" y=\"" << kBottom + 18
        << "\" text-anchor=\"middle\">" << tick_label(fx) << "</text>\n";
    svg << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << format_double(sy(fy)) << "\" x2=\""
        << kLeft << "\" y2=\"" << format_double(sy(fy)) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << format_double(sy(fy) + 4)
        << "\" text-anchor=\"end\">" << tick_label(fy) << "</text>\n";
  }
  svg << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kHeight - 8
      << "\" text-anchor=\"middle\">" << chart.x_label << "</text>\n";
  svg << "<text x=\"16\" y=\"" << (kTop + kBottom) / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (kTop + kBottom) / 2 << ")\">"
      << chart.y_label << "</text>\n";

  // Series polylines and a legend row per series.
  for (size_t s = 0; s < chart.series.size(); ++s) {
    const auto& series = chart.series[s];
    const char* color = kPalette[s % kPaletteSize];
    if (!series.x.empty()) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < series.x.size(); ++i) {
        if (i) svg << ' ';
        svg << format_double(sx(series.x[i])) << ',' << format_double(sy(series.y[i]));
      }
      svg << "\"/>\n";
    }
    const double ly = kTop + 16 * static_cast<double>(s);
    svg << "<line x1=\"" << kRight - 120 << "\" y1=\"" << format_double(ly) << "\" x2=\""
        << kRight - 100 << "\" y2=\"" << format_double(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"1.5\"/>\n";
    svg << "<text x=\"" << kRight - 94 << "\" y=\"" << format_double(ly + 4) << "\">"
        << series.label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("report: cannot open " + path.string());
  out << content;
}

Series column_series(const CsvTable& table, const std::string& x_col, const std::string& y_col,
                     const std::string& label) {
  Series s;
  s.label = label;
  const Index xi = table.column(x_col);
  const Index yi = table.column(y_col);
  for (const auto& row : table.rows) {
    s.x.push_back(row[static_cast<size_t>(xi)]);
    s.y.push_back(row[static_cast<size_t>(yi)]);
  }
  return s;
}

nlohmann::json final_and_best(const CsvTable& table, const std::string& col, bool best_is_max) {
  if (table.rows.empty()) return {{"final", nullptr}, {"best", nullptr}};
  const Index i = table.column(col);
  double best = table.rows.front()[static_cast<size_t>(i)];
  for (const auto& row : table.rows)
    best = best_is_max ? std::max(best, row[static_cast<size_t>(i)])
                       : std::min(best, row[static_cast<size_t>(i)]);
  return {{"final", table.rows.back()[static_cast<size_t>(i)]}, {"best", best}};
}

}  // namespace

std::vector<std::string> write_training_report(
    const std::vector<std::filesystem::path>& step_csvs,
    const std::vector<std::filesystem::path>& epoch_csvs,
    const std::vector<std::string>& labels, const std::filesystem::path& out_dir) {
  if (step_csvs.size() != epoch_csvs.size() || step_csvs.size() != labels.size())
    throw ParamError("report: step, epoch, and label lists must align");
  if (step_csvs.empty()) throw ParamError("report: no runs given");
  std::filesystem::create_directories(out_dir);

  ChartSpec loss{"Training loss", "step", "loss", {}};
  ChartSpec retrieval{"Held-out retrieval", "epoch", "top-1 accuracy", {}};
  ChartSpec temperature{"Temperature", "step", "tau", {}};
  nlohmann::json summary;

  for (size_t run = 0; run < step_csvs.size(); ++run) {
    const CsvTable steps = read_numeric_csv(step_csvs[run]);
    const CsvTable epochs = read_numeric_csv(epoch_csvs[run]);
    loss.series.push_back(column_series(steps, "step", "loss", labels[run]));
    temperature.series.push_back(column_series(steps, "step", "tau", labels[run]));
    retrieval.series.push_back(column_series(epochs, "epoch", "top1", labels[run]));

    summary[labels[run]] = {{"loss", final_and_best(steps, "loss", false)},
                            {"top1", final_and_best(epochs, "top1", true)},
                            {"top5", final_and_best(epochs, "top5", true)},
                            {"tau", final_and_best(steps, "tau", false)}};
    summary[labels[run]]["steps"] = steps.rows.size();
    summary[labels[run]]["epochs"] = epochs.rows.size();
  }

  write_text(out_dir / "loss.svg", render_svg(loss));
  write_text(out_dir / "retrieval.svg", render_svg(retrieval));
  write_text(out_dir / "temperature.svg", render_svg(temperature));
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return {"loss.svg", "retrieval.svg", "temperature.svg", "summary.json"};
}

std::vector<std::string> write_mix_report(const std::filesystem::path& observations_csv,
                                          const std::optional<MixLawFit>& fit,
                                          const std::filesystem::path& out_dir) {
  const auto observations = read_observations_csv(observations_csv);
  std::filesystem::create_directories(out_dir);

  std::map<std::string, Series> by_domain;
  for (const auto& obs : observations) {
    Series& s = by_domain[obs.domain];
    s.label = obs.domain;
    s.x.push_back(obs.ratio);
    s.y.push_back(obs.accuracy);
  }

  ChartSpec chart{"Accuracy across mixing ratios", "share of domain 1", "accuracy", {}};
  nlohmann::json summary;
  for (auto& [name, series] : by_domain) {
    // Sort each domain trace by ratio so the polyline reads left to right.
    std::vector<size_t> idx(series.x.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      return series.x[a] != series.x[b] ? series.x[a] < series.x[b] : series.y[a] < series.y[b];
    });
    Series sorted;
    sorted.label = series.label;
    for (size_t i : idx) {
      sorted.x.push_back(series.x[i]);
      sorted.y.push_back(series.y[i]);
    }
    chart.series.push_back(std::move(sorted));
    summary["domains"][name] = {{"observations", series.x.size()}};
  }

  if (fit) {
    const auto overlay = [&](const CurveFit& f, bool second, const std::string& label) {
      Series s;
      s.label = label;
      for (int i = 0; i <= 100; ++i) {
        const double r = static_cast<double>(i) / 100.0;
        s.x.push_back(r);
        s.y.push_back(eval_law(f, second ? 1.0 - r : r));
      }
      chart.series.push_back(std::move(s));
    };
    overlay(fit->fit1, false, fit->domain1 + " (fit)");
    overlay(fit->fit2, true, fit->domain2 + " (fit)");
    for (auto [name, f] : {std::pair{fit->domain1, &fit->fit1}, {fit->domain2, &fit->fit2}}) {
      summary["fits"][name] = {{"alpha", f->alpha},
                               {"beta", f->beta},
                               {"gamma", f->gamma},
                               {"rss", f->rss},
                               {"flat", f->flat}};
    }
  }

  write_text(out_dir / "mix.svg", render_svg(chart));
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return {"mix.svg", "summary.json"};
}

}  // namespace dalip
