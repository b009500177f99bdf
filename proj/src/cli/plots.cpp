#include "plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "sdiff/io/archive.hpp"

namespace sdiff::plots {

namespace {

constexpr double kW = 640, kH = 400, kL = 70, kR = 150, kT = 40, kB = 50;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return b;
}

std::string esc(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else if (c == '"') o += "&quot;";
        else o += c;
    }
    return o;
}

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
    return o + "\"";
}

// Round outward to a readable step and list tick positions.
std::vector<double> ticks(double lo, double hi, int n = 5) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double raw = (hi - lo) / n, mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    std::vector<double> t;
    for (double v = std::floor(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(v);
    return t;
}

struct Frame {
    double x0, x1, y0, y1;
    bool log_y;
    double px(double x) const { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); }
    double py(double y) const {
        if (log_y) y = std::log10(std::max(y, 1e-300));
        return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB);
    }
};

void header(std::ostringstream& o, const Figure& f) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    if (!f.metadata.empty()) o << "<metadata>" << esc(f.metadata) << "</metadata>\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(kW / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(f.title)
      << "</text>\n";
    o << "<text x=\"" << num(kL + (kW - kL - kR) / 2) << "\" y=\"" << num(kH - 12) << "\" text-anchor=\"middle\">"
      << esc(f.xlabel) << "</text>\n";
    o << "<text x=\"16\" y=\"" << num(kT + (kH - kT - kB) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << num(kT + (kH - kT - kB) / 2) << ")\">" << esc(f.ylabel) << "</text>\n";
}

// Axis labels: 6 significant digits hide accumulated tick rounding.
std::string tick_label(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.6g", std::abs(v) < 1e-12 ? 0.0 : v);
    return b;
}

void axes(std::ostringstream& o, const Frame& fr, const std::vector<double>& xt, const std::vector<double>& yt,
          bool x_ticks = true) {
    o << "<g stroke=\"#888\" stroke-width=\"1\">\n";
    o << "<line x1=\"" << num(kL) << "\" y1=\"" << num(kH - kB) << "\" x2=\"" << num(kW - kR) << "\" y2=\""
      << num(kH - kB) << "\"/>\n";
    o << "<line x1=\"" << num(kL) << "\" y1=\"" << num(kT) << "\" x2=\"" << num(kL) << "\" y2=\"" << num(kH - kB)
      << "\"/>\n</g>\n";
    for (double v : yt) {
        const double y = kH - kB - (v - fr.y0) / (fr.y1 - fr.y0) * (kH - kT - kB);
        o << "<text x=\"" << num(kL - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
          << tick_label(fr.log_y ? std::pow(10.0, v) : v) << "</text>\n";
    }
    if (!x_ticks) return;
    for (double v : xt)
        o << "<text x=\"" << num(fr.px(v)) << "\" y=\"" << num(kH - kB + 16) << "\" text-anchor=\"middle\">" << tick_label(v)
          << "</text>\n";
}

void legend(std::ostringstream& o, const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = kT + 10 + 18.0 * double(i);
        o << "<rect x=\"" << num(kW - kR + 12) << "\" y=\"" << num(y - 9) << "\" width=\"12\" height=\"10\" fill=\""
          << kPalette[i % 8] << "\"/>\n";
        o << "<text x=\"" << num(kW - kR + 30) << "\" y=\"" << num(y) << "\">" << esc(names[i]) << "</text>\n";
    }
}

void save(const std::string& path, const std::string& text) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    write_atomic(path, text);
}

}  // namespace

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char b[40];
    for (int p = 6; p <= 17; ++p) {
        std::snprintf(b, sizeof b, "%.*g", p, v);
        if (std::strtod(b, nullptr) == v) break;
    }
    return b;
}

std::string sidecar_path(const std::string& svg_path) {
    return std::filesystem::path(svg_path).replace_extension(".csv").string();
}

void line_plot(const std::string& svg_path, const Figure& fig, const std::vector<Series>& series) {
    if (series.empty()) throw ConfigError("no series to plot", "inputs");
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw ShapeError("series x/y length mismatch: " + s.name);
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            const double y = fig.log_y ? std::log10(std::max(s.y[i], 1e-300)) : s.y[i];
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    const auto xt = ticks(x0, x1), yt = ticks(y0, y1);
    const Frame fr{xt.front(), xt.back(), yt.front(), yt.back(), fig.log_y};
    std::ostringstream o;
    header(o, fig);
    axes(o, fr, xt, yt);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        names.push_back(s.name);
        o << "<polyline fill=\"none\" stroke=\"" << kPalette[k % 8] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            o << num(fr.px(s.x[i])) << ',' << num(fr.py(s.y[i])) << ' ';
        }
        o << "\"/>\n";
    }
    legend(o, names);
    o << "</svg>\n";
    save(svg_path, o.str());

    // Sidecar: union of x values, one column per series.
    std::map<double, std::vector<std::string>> rows;
    for (std::size_t k = 0; k < series.size(); ++k)
        for (std::size_t i = 0; i < series[k].x.size(); ++i) {
            auto& r = rows[series[k].x[i]];
            r.resize(series.size());
            r[k] = fmt(series[k].y[i]);
        }
    std::string csv = csv_cell(fig.xlabel.empty() ? "x" : fig.xlabel);
    for (const auto& s : series) csv += "," + csv_cell(s.name);
    csv += "\n";
    for (auto& [x, r] : rows) {
        r.resize(series.size());
        csv += fmt(x);
        for (const auto& c : r) csv += "," + c;
        csv += "\n";
    }
    save(sidecar_path(svg_path), csv);
}

void bar_plot(const std::string& svg_path, const Figure& fig, const std::vector<std::string>& categories,
              const std::vector<Series>& series) {
    if (series.empty() || categories.empty()) throw ConfigError("no bars to plot", "inputs");
    double y0 = 0, y1 = -INFINITY;
    for (const auto& s : series) {
        if (s.y.size() != categories.size()) throw ShapeError("bar series length differs from categories: " + s.name);
        for (double v : s.y)
            if (std::isfinite(v)) y1 = std::max(y1, v), y0 = std::min(y0, v);
    }
    if (!std::isfinite(y1)) y1 = 1;
    const auto yt = ticks(y0, y1);
    const Frame fr{0, double(categories.size()), yt.front(), yt.back(), false};
    std::ostringstream o;
    header(o, fig);
    axes(o, fr, {}, yt, false);
    const double slot = (kW - kL - kR) / double(categories.size());
    const double bw = slot * 0.8 / double(series.size());
    for (std::size_t c = 0; c < categories.size(); ++c) {
        const double sx = kL + slot * double(c);
        o << "<text x=\"" << num(sx + slot / 2) << "\" y=\"" << num(kH - kB + 16) << "\" text-anchor=\"middle\">"
          << esc(categories[c]) << "</text>\n";
        for (std::size_t k = 0; k < series.size(); ++k) {
            const double v = series[k].y[c];
            if (!std::isfinite(v)) continue;
            const double top = fr.py(std::max(v, 0.0)), base = fr.py(std::min(v, 0.0));
            o << "<rect x=\"" << num(sx + slot * 0.1 + bw * double(k)) << "\" y=\"" << num(top) << "\" width=\""
              << num(bw) << "\" height=\"" << num(base - top) << "\" fill=\"" << kPalette[k % 8] << "\"/>\n";
        }
    }
    std::vector<std::string> names;
    for (const auto& s : series) names.push_back(s.name);
    legend(o, names);
    o << "</svg>\n";
    save(svg_path, o.str());

    std::string csv = csv_cell(fig.xlabel.empty() ? "category" : fig.xlabel);
    for (const auto& s : series) csv += "," + csv_cell(s.name);
    csv += "\n";
    for (std::size_t c = 0; c < categories.size(); ++c) {
        csv += csv_cell(categories[c]);
        for (const auto& s : series) csv += "," + fmt(s.y[c]);
        csv += "\n";
    }
    save(sidecar_path(svg_path), csv);
}

void heatmap(const std::string& svg_path, const Figure& fig, const std::vector<std::vector<double>>& m,
             const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels, double lo,
             double hi) {
    if (m.empty()) throw ConfigError("empty matrix", "inputs");
    const std::size_t R = m.size(), C = m[0].size();
    if (row_labels.size() != R || col_labels.size() != C) throw ShapeError("heatmap labels do not match the matrix");
    std::ostringstream o;
    header(o, fig);
    const double cw = (kW - kL - kR) / double(C), ch = (kH - kT - kB) / double(R);
    for (std::size_t i = 0; i < R; ++i) {
        if (m[i].size() != C) throw ShapeError("ragged heatmap matrix");
        // Row 0 at the bottom, as in a layer-vs-layer map.
        const double y = kH - kB - ch * double(i + 1);
        o << "<text x=\"" << num(kL - 6) << "\" y=\"" << num(y + ch / 2 + 4) << "\" text-anchor=\"end\">"
          << esc(row_labels[i]) << "</text>\n";
        for (std::size_t j = 0; j < C; ++j) {
            const double u = std::clamp((m[i][j] - lo) / (hi - lo), 0.0, 1.0);
            // White (low) to dark blue (high).
            const int r = static_cast<int>(std::lround(255 * (1 - 0.9 * u))), g = static_cast<int>(std::lround(255 * (1 - 0.7 * u)));
            char col[16];
            std::snprintf(col, sizeof col, "#%02x%02x%02x", r, g, 255 - static_cast<int>(std::lround(80 * u)));
            o << "<rect x=\"" << num(kL + cw * double(j)) << "\" y=\"" << num(y) << "\" width=\"" << num(cw)
              << "\" height=\"" << num(ch) << "\" fill=\"" << col << "\"><title>" << fmt(m[i][j]) << "</title></rect>\n";
        }
    }
    for (std::size_t j = 0; j < C; ++j)
        o << "<text x=\"" << num(kL + cw * (double(j) + 0.5)) << "\" y=\"" << num(kH - kB + 16)
          << "\" text-anchor=\"middle\">" << esc(col_labels[j]) << "</text>\n";
    o << "<text x=\"" << num(kW - kR + 12) << "\" y=\"" << num(kT + 10) << "\">" << fmt(hi) << " dark</text>\n";
    o << "<text x=\"" << num(kW - kR + 12) << "\" y=\"" << num(kT + 28) << "\">" << fmt(lo) << " light</text>\n";
    o << "</svg>\n";
    save(svg_path, o.str());

    std::string csv = "row";
    for (const auto& c : col_labels) csv += "," + csv_cell(c);
    csv += "\n";
    for (std::size_t i = 0; i < R; ++i) {
        csv += csv_cell(row_labels[i]);
        for (double v : m[i]) csv += "," + fmt(v);
        csv += "\n";
    }
    save(sidecar_path(svg_path), csv);
}

void image_grid_ppm(const std::string& path, const Tensor<float>& images, int cols) {
    if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("image grid expects [N, 3, H, W]");
    const std::int64_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    cols = std::max(1, std::min<int>(cols, static_cast<int>(N)));
    const std::int64_t rows = (N + cols - 1) / cols, pad = 1;
    const std::int64_t GW = cols * (W + pad) + pad, GH = rows * (H + pad) + pad;
    std::string out = "P6\n" + std::to_string(GW) + " " + std::to_string(GH) + "\n255\n";
    const std::size_t off = out.size();
    out.resize(off + static_cast<std::size_t>(GW * GH * 3), static_cast<char>(255));
    for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t gy = (n / cols) * (H + pad) + pad, gx = (n % cols) * (W + pad) + pad;
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c) {
                    const float v = images.ptr()[((n * 3 + c) * H + y) * W + x];
                    const double u = std::clamp((double(v) + 1) * 127.5, 0.0, 255.0);
                    out[off + static_cast<std::size_t>(((gy + y) * GW + gx + x) * 3 + c)] =
                        static_cast<char>(static_cast<unsigned char>(std::lround(u)));
                }
    }
    save(path, out);
}

}  // namespace sdiff::plots
