#pragma once

// Deterministic reporting: fixed-header CSVs in, SVG polyline charts and a
// summary JSON out. Output bytes depend only on input bytes — coordinates
// are emitted in shortest round-trip decimal form with a fixed layout — so
// reruns are diffable.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dalip/mixlaw.hpp"
#include "dalip/types.hpp"

namespace dalip {

// Numeric CSV with a header row; every body field must parse as a double.
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  Index column(const std::string& name) const;  // ParseError when absent
};
CsvTable read_numeric_csv(const std::filesystem::path& path);

struct Series {
  std::string label;
  std::vector<double> x, y;  // equal lengths
};

struct ChartSpec {
  std::string title, x_label, y_label;
  std::vector<Series> series;
};

// Pure SVG emission: axes, ticks, legend, one polyline per series. Charts
// with no points render axes only.
std::string render_svg(const ChartSpec& chart);

// Training-curve report from per-step and per-epoch metric CSVs (one pair
// per run, labels parallel): loss.svg, retrieval.svg, temperature.svg, and
// summary.json holding final/best values per run (null when a log is empty).
std::vector<std::string> write_training_report(
    const std::vector<std::filesystem::path>& step_csvs,
    const std::vector<std::filesystem::path>& epoch_csvs,
    const std::vector<std::string>& labels, const std::filesystem::path& out_dir);

// Mixing-sweep report from a domain,ratio,accuracy CSV: mix.svg with one
// series per domain (plus fitted-curve overlays when a fit is given, both
// drawn against the domain-1 share r) and summary.json.
std::vector<std::string> write_mix_report(const std::filesystem::path& observations_csv,
                                          const std::optional<MixLawFit>& fit,
                                          const std::filesystem::path& out_dir);

}  // namespace dalip
