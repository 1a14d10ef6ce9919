// Minimal static SVG emitters for the report command: error-vs-bits curve,
// variation CV bars, and the group/metric heatmap. Output is deterministic
// for identical inputs.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dtq/sensitivity.hpp"

namespace dtq::cli {

namespace svg {

inline std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

inline void begin(std::string& out, int w, int h) {
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " +
         std::to_string(w) + " " + std::to_string(h) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline void text(std::string& out, double x, double y, const std::string& s,
                 int size = 12, const char* anchor = "start") {
  out += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"" +
         std::to_string(size) + "\" font-family=\"monospace\" text-anchor=\"" +
         anchor + "\">" + s + "</text>\n";
}

inline void line(std::string& out, double x1, double y1, double x2, double y2,
                 const char* color = "black", double width = 1.0) {
  out += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) +
         "\" y2=\"" + num(y2) + "\" stroke=\"" + color + "\" stroke-width=\"" +
         num(width) + "\"/>\n";
}

inline void rect(std::string& out, double x, double y, double w, double h,
                 const std::string& fill) {
  out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" fill=\"" + fill +
         "\" stroke=\"black\" stroke-width=\"0.5\"/>\n";
}

inline void finish(const std::string& path, std::string& out) {
  out += "</svg>\n";
  std::ofstream f(path);
  f << out;
}

} // namespace svg

// y-log curve of output error against weight bit width.
inline void plot_error_vs_bits(const std::string& path, const std::vector<int>& bits,
                               const std::vector<double>& errors) {
  const int w = 440, h = 320, ml = 70, mr = 20, mt = 30, mb = 50;
  std::string out;
  svg::begin(out, w, h);
  svg::text(out, w / 2.0, 18, "output MSE vs weight bits", 13, "middle");
  double lo = 1e300, hi = -1e300;
  for (double e : errors) {
    const double l = std::log10(std::max(e, 1e-30));
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  auto xs = [&](double b) {
    return ml + (b - 2.0) / (16.0 - 2.0) * (w - ml - mr);
  };
  auto ys = [&](double e) {
    const double l = std::log10(std::max(e, 1e-30));
    return h - mb - (l - lo) / (hi - lo) * (h - mt - mb);
  };
  svg::line(out, ml, h - mb, w - mr, h - mb);
  svg::line(out, ml, mt, ml, h - mb);
  for (int b : {2, 4, 6, 8, 16}) {
    svg::line(out, xs(b), h - mb, xs(b), h - mb + 4);
    svg::text(out, xs(b), h - mb + 18, std::to_string(b), 11, "middle");
  }
  svg::text(out, w / 2.0, h - 12, "weight bits", 11, "middle");
  svg::text(out, 16, mt + 10, "log10 MSE", 11);
  for (std::size_t i = 0; i + 1 < bits.size(); ++i)
    svg::line(out, xs(bits[i]), ys(errors[i]), xs(bits[i + 1]), ys(errors[i + 1]),
              "steelblue", 2.0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    out += "<circle cx=\"" + svg::num(xs(bits[i])) + "\" cy=\"" +
           svg::num(ys(errors[i])) + "\" r=\"3\" fill=\"steelblue\"/>\n";
    svg::text(out, xs(bits[i]) + 6, ys(errors[i]) - 6, svg::num(errors[i]), 10);
  }
  svg::finish(path, out);
}

// Bar chart of activation-variation coefficients.
inline void plot_variation_bars(const std::string& path,
                                const std::vector<std::string>& labels,
                                const std::vector<double>& cvs) {
  const int w = 420, h = 300, ml = 60, mr = 20, mt = 30, mb = 60;
  std::string out;
  svg::begin(out, w, h);
  svg::text(out, w / 2.0, 18, "activation variation (coefficient of variation)", 12,
            "middle");
  double hi = 0.0;
  for (double v : cvs) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;
  const double bw = double(w - ml - mr) / double(labels.size());
  svg::line(out, ml, h - mb, w - mr, h - mb);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double bh = cvs[i] / hi * (h - mt - mb);
    svg::rect(out, ml + i * bw + bw * 0.15, h - mb - bh, bw * 0.7, bh, "darkseagreen");
    svg::text(out, ml + i * bw + bw / 2.0, h - mb + 16, labels[i], 10, "middle");
    svg::text(out, ml + i * bw + bw / 2.0, h - mb - bh - 5, svg::num(cvs[i]), 10,
              "middle");
  }
  svg::finish(path, out);
}

// 3x3 heatmap with per-cell shading and values.
inline void plot_heatmap(const std::string& path, const MetricHeatmap& hm) {
  const int cell = 90, ml = 110, mt = 60;
  const int w = ml + 3 * cell + 30, h = mt + 3 * cell + 30;
  const char* groups[3] = {"Quality", "Alignment", "Temporal"};
  const char* metrics[3] = {"quality", "alignment", "temporal"};
  std::string out;
  svg::begin(out, w, h);
  svg::text(out, w / 2.0, 20, "layer-group / proxy-metric attribution", 12, "middle");
  for (std::size_t m = 0; m < 3; ++m)
    svg::text(out, ml + m * cell + cell / 2.0, mt - 10, metrics[m], 11, "middle");
  for (std::size_t g = 0; g < 3; ++g) {
    svg::text(out, ml - 8, mt + g * cell + cell / 2.0 + 4, groups[g], 11, "end");
    for (std::size_t m = 0; m < 3; ++m) {
      const double v = hm.values[g][m];
      const int shade = std::clamp(255 - int(std::lround(v * 200.0)), 55, 255);
      char color[32];
      std::snprintf(color, sizeof(color), "rgb(%03d,%03d,255)", shade, shade);
      svg::rect(out, ml + m * cell, mt + g * cell, cell, cell, color);
      char label[16];
      std::snprintf(label, sizeof(label), "%.3f", v);
      svg::text(out, ml + m * cell + cell / 2.0, mt + g * cell + cell / 2.0 + 4, label,
                12, "middle");
    }
  }
  svg::finish(path, out);
}

} // namespace dtq::cli
