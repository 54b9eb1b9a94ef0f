// Minimal standalone SVG charts for reports.
#pragma once

#include "powerpm/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace powerpm::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

constexpr int kWidth = 640, kHeight = 400;
constexpr int kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
inline const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

inline void header(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
}

inline void axes(std::ostringstream& os, const std::string& xlabel, const std::string& ylabel, double y0, double y1) {
  const int x_end = kWidth - kRight, y_end = kHeight - kBottom;
  os << "<line x1=\"" << kLeft << "\" y1=\"" << y_end << "\" x2=\"" << x_end << "\" y2=\"" << y_end
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << y_end
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (kLeft + x_end) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(xlabel) << "</text>\n"
     << "<text transform=\"translate(16," << (kTop + y_end) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(ylabel) << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y0 + (y1 - y0) * i / 4.0;
    const double py = y_end - (y_end - kTop) * i / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
}

}  // namespace detail

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  using namespace detail;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  std::ostringstream os;
  header(os, title);
  axes(os, xlabel, ylabel, y0, y1);
  const double w = kWidth - kRight - kLeft, h = kHeight - kBottom - kTop;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < std::min(s.x.size(), s.y.size()); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      os << num(kLeft + w * (s.x[k] - x0) / (x1 - x0)) << ',' << num(kTop + h - h * (s.y[k] - y0) / (y1 - y0)) << ' ';
    }
    os << "\"/>\n";
    const int ly = kTop + 16 * static_cast<int>(i);
    os << "<rect x=\"" << kWidth - kRight + 10 << "\" y=\"" << ly << "\" width=\"12\" height=\"3\" fill=\"" << color
       << "\"/><text x=\"" << kWidth - kRight + 28 << "\" y=\"" << ly + 5 << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::string>& labels,
                             const std::vector<double>& values) {
  using namespace detail;
  double y1 = 0.0;
  for (double v : values) y1 = std::max(y1, v);
  if (y1 <= 0) y1 = 1;
  std::ostringstream os;
  header(os, title);
  axes(os, "", ylabel, 0.0, y1);
  const double w = kWidth - kRight - kLeft, h = kHeight - kBottom - kTop;
  const double slot = values.empty() ? w : w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = h * std::max(0.0, values[i]) / y1;
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(kTop + h - bh) << "\" width=\"" << num(slot * 0.7)
       << "\" height=\"" << num(bh) << "\" fill=\"" << kPalette[i % std::size(kPalette)] << "\"/>\n"
       << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << kHeight - kBottom + 16 << "\" text-anchor=\"middle\">"
       << escape(labels[i]) << "</text>\n"
       << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(kTop + h - bh - 4) << "\" text-anchor=\"middle\">"
       << num(values[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace powerpm::svg
