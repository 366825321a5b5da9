#include "cpdefense/evaluation.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "cpdefense/errors.hpp"

namespace cpd {

Ratio metric_clean(const DefenseMethod& defense, const Classifier& f, const std::vector<Image>& clean) {
  if (clean.empty()) throw InputError("clean-eval split is empty");
  Ratio r;
  for (const Image& img : clean) {
    r.hits += defense.defended_label(img) == f.predict(img).label ? 1 : 0;
    ++r.total;
  }
  return r;
}

Ratio metric_ground_truth(const DefenseMethod& defense, const std::vector<Image>& clean) {
  if (clean.empty()) throw InputError("clean-eval split is empty");
  Ratio r;
  for (const Image& img : clean) {
    r.hits += defense.defended_label(img) == img.true_label ? 1 : 0;
    ++r.total;
  }
  return r;
}

Ratio metric_robust(const DefenseMethod& defense, const std::vector<AttackedExample>& attacked) {
  if (attacked.empty()) throw InputError("attacked set is empty");
  Ratio r;
  for (const auto& ex : attacked) {
    r.hits += defense.defended_label(ex.patched) == ex.true_label ? 1 : 0;
    ++r.total;
  }
  return r;
}

std::vector<AttackedExample> attacked_examples(const AttackedSet& set, const std::vector<Image>& sources) {
  std::map<std::string, const Image*> by_id;
  for (const Image& img : sources) by_id[img.id] = &img;
  std::vector<AttackedExample> out;
  for (const auto& r : set.results) {
    const auto it = by_id.find(r.image_id);
    if (it == by_id.end()) throw InputError("attacked image " + r.image_id + " is not in the attack-eval split");
    out.push_back({patched_image(*it->second, r), r.true_label});
  }
  return out;
}

const ReportRow& EvaluationReport::row(const std::string& defense) const {
  for (const auto& r : rows) {
    if (r.defense == defense) return r;
  }
  throw InputError("report has no row '" + defense + "'");
}

double EvaluationReport::mean_robust(const std::string& defense) const {
  const ReportRow& r = row(defense);
  if (r.robust.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : r.robust) s += c.value;
  return s / static_cast<double>(r.robust.size());
}

std::string area_label(double area) { return fmt::format("robust@{:g}%", area * 100.0); }

namespace {

nlohmann::json cell_json(const ReportCell& c) {
  return {{"value", c.value}, {"hits", c.hits}, {"denominator", c.denominator}};
}

ReportCell cell_from(const nlohmann::json& j) { return {j.at("value"), j.at("hits"), j.at("denominator")}; }

nlohmann::json row_json(const ReportRow& r, const std::vector<double>& areas) {
  nlohmann::json robust = nlohmann::json::object();
  for (std::size_t i = 0; i < areas.size(); ++i) robust[area_label(areas[i])] = cell_json(r.robust[i]);
  return {{"defense", r.defense},
          {"clean", cell_json(r.clean)},
          {"clean_ground_truth", cell_json(r.clean_ground_truth)},
          {"robust", robust}};
}

ReportRow row_from(const nlohmann::json& j, const std::vector<double>& areas) {
  ReportRow r;
  r.defense = j.at("defense");
  r.clean = cell_from(j.at("clean"));
  r.clean_ground_truth = cell_from(j.at("clean_ground_truth"));
  for (double a : areas) r.robust.push_back(cell_from(j.at("robust").at(area_label(a))));
  return r;
}

std::string fixed3(double v) { return fmt::format("{:.3f}", v); }

std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out += c == 0 ? fmt::format("{:<{}}", cells[c], width[c]) : fmt::format("  {:>{}}", cells[c], width[c]);
    }
    out += "\n";
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  out += std::string(total - 2, '-') + "\n";
  for (const auto& r : rows) line(r);
  return out;
}

}  // namespace

nlohmann::json to_json(const EvaluationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back(row_json(r, report.areas));
  std::vector<std::string> columns{"clean"};
  for (double a : report.areas) columns.push_back(area_label(a));
  return {{"mode", report.mode},
          {"areas", report.areas},
          {"columns", columns},
          {"rows", rows},
          {"config_fingerprint", report.config_fingerprint},
          {"corpus_fingerprint", report.corpus_fingerprint},
          {"settings", report.settings},
          {"notes", report.notes}};
}

EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.mode = j.at("mode");
  r.areas = j.at("areas").get<std::vector<double>>();
  for (const auto& row : j.at("rows")) r.rows.push_back(row_from(row, r.areas));
  r.config_fingerprint = j.at("config_fingerprint");
  r.corpus_fingerprint = j.at("corpus_fingerprint");
  r.settings = j.value("settings", nlohmann::json::object());
  r.notes = j.value("notes", nlohmann::json::array());
  return r;
}

std::string format_table(const EvaluationReport& report) {
  std::vector<std::string> header{"defense", "clean", "clean(gt)"};
  for (double a : report.areas) header.push_back(area_label(a));
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : report.rows) {
    std::vector<std::string> cells{r.defense, fixed3(r.clean.value), fixed3(r.clean_ground_truth.value)};
    for (const auto& c : r.robust) cells.push_back(fmt::format("{} ({}/{})", fixed3(c.value), c.hits, c.denominator));
    rows.push_back(cells);
  }
  std::string out = render_table(header, rows);
  if (!report.rows.empty()) {
    out += fmt::format("clean-eval images: {}\n", report.rows.front().clean.denominator);
  }
  out += fmt::format("config {}  corpus {}\n", report.config_fingerprint, report.corpus_fingerprint);
  for (const auto& n : report.notes) out += "note: " + n.get<std::string>() + "\n";
  return out;
}

nlohmann::json to_json(const SweepReport& sweep) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : sweep.points) points.push_back({{"setting", p.setting}, {"row", row_json(p.row, sweep.areas)}});
  return {{"axis", sweep.axis},
          {"fixed", {{"name", sweep.fixed_name}, {"value", sweep.fixed_value}}},
          {"areas", sweep.areas},
          {"points", points}};
}

std::string to_csv(const SweepReport& sweep) {
  std::string out = sweep.axis + ",clean";
  for (double a : sweep.areas) out += fmt::format(",robust_{:g}pct", a * 100.0);
  out += ",clean_denominator";
  for (double a : sweep.areas) out += fmt::format(",robust_{:g}pct_denominator", a * 100.0);
  out += "\n";
  for (const auto& p : sweep.points) {
    out += fmt::format("{:g},{:.4f}", p.setting, p.row.clean.value);
    for (const auto& c : p.row.robust) out += fmt::format(",{:.4f}", c.value);
    out += fmt::format(",{}", p.row.clean.denominator);
    for (const auto& c : p.row.robust) out += fmt::format(",{}", c.denominator);
    out += "\n";
  }
  return out;
}

std::string format_table(const SweepReport& sweep) {
  std::vector<std::string> header{sweep.axis, "clean"};
  for (double a : sweep.areas) header.push_back(area_label(a));
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : sweep.points) {
    std::vector<std::string> cells{fmt::format("{:g}", p.setting), fixed3(p.row.clean.value)};
    for (const auto& c : p.row.robust) cells.push_back(fixed3(c.value));
    rows.push_back(cells);
  }
  return fmt::format("{} sweep ({} = {:g})\n", sweep.axis, sweep.fixed_name, sweep.fixed_value) +
         render_table(header, rows);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

Tensor3 compose_figure(const std::vector<std::vector<std::optional<FigureCell>>>& grid, int cell_size, int gap) {
  if (grid.empty()) throw DegenerateInputError("figure has no examples");
  const int rows = static_cast<int>(grid.size());
  int cols = 0;
  for (const auto& r : grid) cols = std::max(cols, static_cast<int>(r.size()));
  if (cols == 0) throw DegenerateInputError("figure has no columns");
  Tensor3 fig(rows * cell_size + (rows + 1) * gap, cols * cell_size + (cols + 1) * gap, 3, 1.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int top = gap + r * (cell_size + gap);
      const int left = gap + c * (cell_size + gap);
      if (c >= static_cast<int>(grid[r].size()) || !grid[r][c]) {
        spdlog::warn("figure cell ({}, {}) is missing; leaving it blank", r, c);
        continue;
      }
      const FigureCell& cell = *grid[r][c];
      if (cell.defended.height != cell_size || cell.defended.width != cell_size) {
        throw InputError("figure cells must be " + std::to_string(cell_size) + " px");
      }
      for (int y = 0; y < cell_size; ++y)
        for (int x = 0; x < cell_size; ++x)
          for (int ch = 0; ch < 3; ++ch) fig.at(top + y, left + x, ch) = cell.defended.at(y, x, ch);
      // Outline the selected region in red on the mask boundary.
      const auto sel = [&](int y, int x) {
        return y >= 0 && x >= 0 && y < cell_size && x < cell_size &&
               cell.mask.selected[static_cast<std::size_t>(y) * cell_size + x];
      };
      for (int y = 0; y < cell_size; ++y)
        for (int x = 0; x < cell_size; ++x) {
          if (!sel(y, x)) continue;
          if (sel(y - 1, x) && sel(y + 1, x) && sel(y, x - 1) && sel(y, x + 1)) continue;
          fig.at(top + y, left + x, 0) = 1.0;
          fig.at(top + y, left + x, 1) = 0.0;
          fig.at(top + y, left + x, 2) = 0.0;
        }
    }
  }
  return fig;
}

}  // namespace cpd
