#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "sldm/cli.hpp"

namespace sldm::cli {
namespace {

constexpr double kPanelW = 420, kPanelH = 300;
constexpr double kLeft = 64, kRight = 16, kTop = 34, kBottom = 46;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Panel {
  std::string title, xlabel, ylabel;
  bool log_x = false, log_y = false, points = false;
  std::vector<Series> series;
};

template <class... Args>
void put(fmt::memory_buffer& out, fmt::format_string<Args...> f, Args&&... args) {
  fmt::format_to(std::back_inserter(out), f, std::forward<Args>(args)...);
}

std::string escape(std::string_view s) {
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

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;

  // Plot-space value, NaN when not representable.
  double map(double v) const {
    if (!std::isfinite(v)) return NAN;
    if (log) return v > 0 ? std::log10(v) : NAN;
    return v;
  }
};

Axis fit_axis(const std::vector<const std::vector<double>*>& values, bool log) {
  Axis a;
  a.log = log;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto* vs : values)
    for (double v : *vs) {
      const double m = a.map(v);
      if (std::isnan(m)) continue;
      lo = std::min(lo, m);
      hi = std::max(hi, m);
    }
  if (!(lo <= hi)) {
    lo = 0;
    hi = 1;
  } else if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.04 * (hi - lo);
  a.lo = lo - pad;
  a.hi = hi + pad;
  return a;
}

std::vector<double> ticks(const Axis& a) {
  std::vector<double> out;
  const double span = a.hi - a.lo;
  double step = std::pow(10.0, std::floor(std::log10(span / 5)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (span / (step * m) <= 6) {
      step *= m;
      break;
    }
  if (a.log) step = std::max(step, 1.0);
  for (double v = std::ceil(a.lo / step) * step; v <= a.hi + 1e-9 * step; v += step) out.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return out;
}

std::string tick_label(double v, bool log) {
  if (log) return fmt::format("1e{}", static_cast<int>(std::lround(v)));
  return fmt::format("{:.4g}", v);
}

void render_panel(fmt::memory_buffer& out, const Panel& p, double ox, double oy) {
  std::vector<const std::vector<double>*> xs, ys;
  for (const auto& s : p.series) {
    xs.push_back(&s.x);
    ys.push_back(&s.y);
  }
  const Axis ax = fit_axis(xs, p.log_x), ay = fit_axis(ys, p.log_y);
  const double w = kPanelW - kLeft - kRight, h = kPanelH - kTop - kBottom;
  const double x0 = ox + kLeft, y0 = oy + kTop;
  auto px = [&](double v) { return x0 + (v - ax.lo) / (ax.hi - ax.lo) * w; };
  auto py = [&](double v) { return y0 + h - (v - ay.lo) / (ay.hi - ay.lo) * h; };

  put(out, "<g class=\"panel\">\n");
  put(out, "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" stroke=\"#000\"/>\n", x0, y0, w, h);
  put(out, "<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n", x0 + w / 2, oy + 20,
      escape(p.title));
  for (double t : ticks(ax)) {
    put(out, "<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"#000\"/>\n", px(t), y0 + h, y0 + h + 4);
    put(out, "<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n", px(t), y0 + h + 15,
        tick_label(t, ax.log));
  }
  for (double t : ticks(ay)) {
    put(out, "<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\" stroke=\"#000\"/>\n", x0 - 4, py(t), x0);
    put(out, "<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n", x0 - 6, py(t) + 3,
        tick_label(t, ay.log));
  }
  put(out, "<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n", x0 + w / 2,
      y0 + h + 34, escape(p.xlabel + (p.log_x ? " (log)" : "")));
  put(out, "<text transform=\"translate({:.2f},{:.2f}) rotate(-90)\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
      ox + 14, y0 + h / 2, escape(p.ylabel + (p.log_y ? " (log)" : "")));

  std::size_t color = 0;
  std::map<std::string, std::size_t> colors;
  for (const auto& s : p.series) {
    auto [it, fresh] = colors.try_emplace(s.name.substr(0, s.name.find('#')), color);
    if (fresh) ++color;
    const char* stroke = kPalette[it->second % std::size(kPalette)];
    if (p.points) {
      put(out, "<g data-series=\"{}\" fill=\"{}\" fill-opacity=\"0.5\">\n", escape(s.name), stroke);
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const double mx = ax.map(s.x[i]), my = ay.map(s.y[i]);
        if (std::isnan(mx) || std::isnan(my)) continue;
        put(out, "<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"1.2\"/>\n", px(mx), py(my));
      }
      put(out, "</g>\n");
    } else {
      put(out, "<polyline data-series=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"", escape(s.name),
          stroke);
      bool first = true;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const double mx = ax.map(s.x[i]), my = ay.map(s.y[i]);
        if (std::isnan(mx) || std::isnan(my)) continue;
        put(out, "{}{:.2f},{:.2f}", first ? "" : " ", px(mx), py(my));
        first = false;
      }
      put(out, "\"/>\n");
    }
  }
  // Legend by series family.
  double ly = y0 + 12;
  for (const auto& [name, c] : colors) {
    if (colors.size() > 10) break;
    put(out, "<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"10\" fill=\"{}\">{}</text>\n", x0 + w - 4, ly,
        kPalette[c % std::size(kPalette)], escape(name));
    ly += 12;
  }
  put(out, "</g>\n");
}

std::string render(const std::string& title, const std::vector<Panel>& panels) {
  const std::size_t n = std::max<std::size_t>(panels.size(), 1);
  const double width = kPanelW * static_cast<double>(n), height = kPanelH + 24;
  fmt::memory_buffer out;
  put(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
  put(out, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0:.0f}\" height=\"{1:.0f}\" viewBox=\"0 0 {0:.0f} {1:.0f}\" "
      "font-family=\"sans-serif\">\n",
      width, height);
  put(out, "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n");
  put(out, "<text x=\"{:.2f}\" y=\"16\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", width / 2, escape(title));
  put(out, "<g transform=\"translate(0,20)\">\n");
  if (panels.empty()) render_panel(out, Panel{}, 0, 0);
  for (std::size_t i = 0; i < panels.size(); ++i) render_panel(out, panels[i], kPanelW * static_cast<double>(i), 0);
  put(out, "</g>\n</svg>\n");
  return fmt::to_string(out);
}

// Series keyed by the text of `group` columns, in first-seen order.
std::vector<Series> group_series(const Table& t, const std::vector<std::size_t>& group, std::size_t xc,
                                 std::size_t yc, const std::string& filter_value = {}, std::size_t filter_col = SIZE_MAX) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (filter_col != SIZE_MAX && t.text(r, filter_col) != filter_value) continue;
    std::string key;
    for (std::size_t k = 0; k < group.size(); ++k) key += (k ? "#" : "") + t.text(r, group[k]);
    auto [it, fresh] = index.try_emplace(key, out.size());
    if (fresh) out.push_back({key, {}, {}});
    out[it->second].x.push_back(t.number(r, xc));
    out[it->second].y.push_back(t.number(r, yc));
  }
  return out;
}

std::vector<std::string> distinct(const Table& t, std::size_t col) {
  std::vector<std::string> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    std::string v = t.text(r, col);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

std::string emit_plot(const Table& table, const PlotRequest& req) {
  std::vector<Panel> panels;
  switch (req.kind) {
    case PlotKind::Schedule: {
      const std::size_t kind = table.column("kind"), t = table.column("t");
      for (const char* name : {"mu", "sigma", "snr"}) {
        Panel p;
        p.title = name;
        p.xlabel = "t";
        p.ylabel = name;
        p.log_y = std::string_view(name) == "snr";
        p.series = group_series(table, {kind}, t, table.column(name));
        panels.push_back(std::move(p));
      }
      break;
    }
    case PlotKind::Trajectory: {
      const std::size_t sched = table.column("schedule"), start = table.column("start");
      const std::size_t t = table.column("t"), x = table.column("x");
      for (const auto& name : distinct(table, sched)) {
        Panel p;
        p.title = name;
        p.xlabel = "t";
        p.ylabel = "x";
        p.series = group_series(table, {sched, start}, t, x, name, sched);
        panels.push_back(std::move(p));
      }
      if (panels.empty()) {
        Panel p;
        p.xlabel = "t";
        p.ylabel = "x";
        panels.push_back(std::move(p));
      }
      break;
    }
    case PlotKind::Lines:
    case PlotKind::Scatter: {
      Panel p;
      p.title = req.title;
      p.xlabel = req.x;
      p.ylabel = req.y;
      p.log_x = req.log_x;
      p.log_y = req.log_y;
      p.points = req.kind == PlotKind::Scatter;
      std::vector<std::size_t> group;
      if (!req.group.empty()) group.push_back(table.column(req.group));
      p.series = group_series(table, group, table.column(req.x), table.column(req.y));
      if (p.points)
        for (auto& s : p.series) {
          if (s.x.size() > req.max_points) {
            s.x.resize(req.max_points);
            s.y.resize(req.max_points);
          }
        }
      panels.push_back(std::move(p));
      break;
    }
  }
  return render(req.title, panels);
}

}  // namespace sldm::cli
