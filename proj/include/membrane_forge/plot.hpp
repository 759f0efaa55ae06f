#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace mforge::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool markers = false;  ///< draw points instead of a polyline
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 640;
  int height = 420;
};

namespace detail {

inline std::string escape(const std::string& s) {
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

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Round tick spacing (1, 2 or 5 times a power of ten) giving about n ticks.
inline double tick_step(double span, int n) {
  const double raw = span / std::max(n, 1);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#440154", "#3b528b", "#21918c", "#5ec962",
                                  "#fde725", "#e3692b", "#b5367a", "#777777"};
  return palette[i % 8];
}

}  // namespace detail

/// Static SVG line chart with axes, ticks and a legend.
inline std::string line_chart(const std::vector<Series>& series, const ChartOptions& o = {}) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double ml = 64, mr = 150, mt = 36, mb = 48;
  const double pw = o.width - ml - mr, ph = o.height - mt - mb;
  auto X = [&](double x) { return ml + (x - x0) / (x1 - x0) * pw; };
  auto Y = [&](double y) { return mt + ph - (y - y0) / (y1 - y0) * ph; };
  using detail::num;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(o.width) +
                    "\" height=\"" + std::to_string(o.height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(ml + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         detail::escape(o.title) + "</text>\n";
  svg += "<rect x=\"" + num(ml) + "\" y=\"" + num(mt) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  const double xs = detail::tick_step(x1 - x0, 6), ys = detail::tick_step(y1 - y0, 6);
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
    svg += "<line x1=\"" + num(X(t)) + "\" y1=\"" + num(mt + ph) + "\" x2=\"" + num(X(t)) + "\" y2=\"" +
           num(mt + ph + 4) + "\" stroke=\"black\"/><text x=\"" + num(X(t)) + "\" y=\"" + num(mt + ph + 16) +
           "\" text-anchor=\"middle\">" + detail::escape(std::to_string(t).substr(0, 6)) + "</text>\n";
  }
  for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
    svg += "<line x1=\"" + num(ml - 4) + "\" y1=\"" + num(Y(t)) + "\" x2=\"" + num(ml) + "\" y2=\"" + num(Y(t)) +
           "\" stroke=\"black\"/><text x=\"" + num(ml - 6) + "\" y=\"" + num(Y(t) + 4) +
           "\" text-anchor=\"end\">" + detail::escape(std::to_string(t).substr(0, 6)) + "</text>\n";
  }
  svg += "<text x=\"" + num(ml + pw / 2) + "\" y=\"" + num(o.height - 10.0) + "\" text-anchor=\"middle\">" +
         detail::escape(o.x_label) + "</text>\n";
  svg += "<text transform=\"translate(16," + num(mt + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         detail::escape(o.y_label) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = detail::color(k);
    if (s.markers) {
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        svg += "<circle cx=\"" + num(X(s.x[i])) + "\" cy=\"" + num(Y(s.y[i])) + "\" r=\"3\" fill=\"" + c + "\"/>\n";
      }
    } else {
      std::string pts;
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        pts += num(X(s.x[i])) + "," + num(Y(s.y[i])) + " ";
      }
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
    const double ly = mt + 12 + 16.0 * static_cast<double>(k);
    svg += "<rect x=\"" + num(ml + pw + 10) + "\" y=\"" + num(ly - 8) + "\" width=\"10\" height=\"10\" fill=\"" + c +
           "\"/><text x=\"" + num(ml + pw + 24) + "\" y=\"" + num(ly + 1) + "\">" + detail::escape(s.name) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace mforge::plot
