#include "ddnn/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace ddnn::cli {

namespace {

struct Series {
  std::vector<std::pair<double, double>> points;  // (epoch, top1_err)
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string metrics_svg(const std::string& csv_text) {
  std::istringstream is(csv_text);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("metrics CSV is empty");
  const auto header = split_csv(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("metrics CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_epoch = column("epoch"), c_net = column("net_name"), c_split = column("split"),
                    c_err = column("top1_err");

  // Keyed by "net/split"; std::map keeps the legend order stable.
  std::map<std::string, Series> series;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() < header.size()) throw std::runtime_error("metrics CSV row " + std::to_string(row) + " is short");
    try {
      series[cells[c_net] + "/" + cells[c_split]].points.emplace_back(std::stod(cells[c_epoch]),
                                                                      std::stod(cells[c_err]));
    } catch (const std::logic_error&) {
      throw std::runtime_error("metrics CSV row " + std::to_string(row) + " has a non-numeric field");
    }
  }
  if (series.empty()) throw std::runtime_error("metrics CSV has no rows");

  double x0 = 1e300, x1 = -1e300, y1 = 0;
  for (const auto& [_, s] : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= 0) y1 = 1;

  constexpr double W = 720, H = 420, left = 60, right = 170, top = 20, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + ph - y / y1 * ph; };

  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">\n",
                W, H);
  os << buf;
  std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"#444\"/>\n",
                left, top, pw, ph);
  os << buf;
  for (int t = 0; t <= 4; ++t) {
    const double y = y1 * t / 4;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n", left - 6,
                  sy(y) + 4, y);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%g</text>\n", sx(x0), H - bottom + 18, x0);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%g</text>\n", sx(x1), H - bottom + 18, x1);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">epoch</text>\n", left + pw / 2, H - 10);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"14\" y=\"%.1f\" text-anchor=\"middle\" transform=\"rotate(-90 14 %.1f)\">top-1 error (%%)</text>\n",
                top + ph / 2, top + ph / 2);
  os << buf;

  int i = 0;
  for (const auto& [name, s] : series) {
    const char* color = colors[i % 8];
    const bool dashed = name.size() > 6 && name.compare(name.size() - 6, 6, "/train") == 0;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
       << (dashed ? " stroke-dasharray=\"4 3\"" : "") << " data-series=\"" << escape(name) << "\" points=\"";
    for (std::size_t p = 0; p < s.points.size(); ++p) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", p ? " " : "", sx(s.points[p].first), sy(s.points[p].second));
      os << buf;
    }
    os << "\"/>\n";
    const double ly = top + 14 + 18 * i;
    std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                  W - right + 12, ly - 4, W - right + 36, ly - 4, color);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\">", W - right + 42, ly);
    os << buf << escape(name) << "</text>\n";
    ++i;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ddnn::cli
