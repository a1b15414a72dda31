#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lime {

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
  std::vector<std::string> point_names;  ///< used in error messages; optional
};

struct PlotOptions {
  std::string title;
  std::string x_label = "x";
  std::string y_label = "y";
  std::vector<double> x_ticks;  ///< empty: decades
  int width = 640, height = 420;
};

namespace detail {

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::vector<double> decades(double lo, double hi) {
  std::vector<double> t;
  for (double e = std::floor(std::log10(lo)); e <= std::ceil(std::log10(hi)); e += 1) t.push_back(std::pow(10.0, e));
  return t;
}

}  // namespace detail

/// Standalone log-log SVG: one polyline per series, a legend, and ticks.
/// Output depends only on the inputs, so equal inputs give equal bytes.
inline std::string svg_loglog(const std::vector<PlotSeries>& series, const PlotOptions& opt) {
  if (series.empty()) throw std::invalid_argument("svg_loglog: nothing to plot");
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("svg_loglog: series '" + s.label + "' has x/y size mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.x[i] > 0) || !(s.y[i] > 0)) {
        const std::string where = i < s.point_names.size() ? s.point_names[i] : "point " + std::to_string(i);
        throw std::invalid_argument("svg_loglog: non-positive value on a log axis in series '" + s.label + "' at " +
                                    where + " (x=" + detail::fmt_num(s.x[i]) + ", y=" + detail::fmt_num(s.y[i]) + ")");
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) throw std::invalid_argument("svg_loglog: all series are empty");
  std::vector<double> xt = opt.x_ticks.empty() ? detail::decades(xmin, xmax) : opt.x_ticks;
  for (double t : xt) {
    xmin = std::min(xmin, t);
    xmax = std::max(xmax, t);
  }
  std::vector<double> yt = detail::decades(ymin, ymax);
  const double ylo = std::log10(ymin) - 0.05 * std::max(1.0, std::log10(ymax / ymin));
  const double yhi = std::log10(ymax) + 0.05 * std::max(1.0, std::log10(ymax / ymin));
  const double xlo = std::log10(xmin), xhi = xmax > xmin ? std::log10(xmax) : xlo + 1;

  const double left = 70, right = 160, top = 40, bottom = 55;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  auto px = [&](double x) { return left + pw * (std::log10(x) - xlo) / (xhi - xlo); };
  auto py = [&](double y) { return top + ph * (1 - (std::log10(y) - ylo) / (yhi - ylo)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
    << detail::xml_escape(opt.title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double t : xt) {
    const double x = px(t);
    o << "<line class=\"xtick\" x1=\"" << x << "\" y1=\"" << top + ph << "\" x2=\"" << x << "\" y2=\"" << top + ph + 5
      << "\" stroke=\"black\"/><text class=\"xtick\" x=\"" << x << "\" y=\"" << top + ph + 18
      << "\" text-anchor=\"middle\">" << detail::fmt_num(t) << "</text>\n";
  }
  for (double t : yt) {
    if (std::log10(t) < ylo || std::log10(t) > yhi) continue;
    const double y = py(t);
    o << "<line class=\"ytick\" x1=\"" << left - 5 << "\" y1=\"" << y << "\" x2=\"" << left << "\" y2=\"" << y
      << "\" stroke=\"black\"/><text class=\"ytick\" x=\"" << left - 8 << "\" y=\"" << y + 4
      << "\" text-anchor=\"end\">" << detail::fmt_num(t) << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << opt.height - 12 << "\" text-anchor=\"middle\">"
    << detail::xml_escape(opt.x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << detail::xml_escape(opt.y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = colors[k % (sizeof colors / sizeof *colors)];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << px(s.x[i]) << ',' << py(s.y[i]);
    o << "\"/>\n";
    const double ly = top + 14 + 16 * double(k);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << c << "\" stroke-width=\"2\"/><text x=\"" << left + pw + 36 << "\" y=\"" << ly + 4 << "\">"
      << detail::xml_escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace lime
