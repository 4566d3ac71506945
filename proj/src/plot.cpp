#include "attnbench/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench {

namespace {

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, left = 70, right = 150, top = 40, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;

    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
        << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
        svg << "<text x=\"" << sx(fx) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(fx)
            << "</text>\n";
        svg << "<text x=\"" << left - 6 << "\" y=\"" << sy(fy) + 4 << "\" text-anchor=\"end\">" << num(fy)
            << "</text>\n";
        svg << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy(fy) << "\" y2=\"" << sy(fy)
            << "\" stroke=\"#ddd\"/>\n";
    }
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(x_label)
        << "</text>\n";
    svg << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
        << escape(y_label) << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kColors[i % std::size(kColors)];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : series[i].points) {
            if (std::isfinite(x) && std::isfinite(y)) svg << sx(x) << ',' << sy(y) << ' ';
        }
        svg << "\"/>\n";
        const double ly = top + 14 + 18 * static_cast<double>(i);
        svg << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly + 4 << "\">" << escape(series[i].name)
            << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

std::vector<std::filesystem::path> plot_runs(const std::map<std::string, std::vector<MetricsRecord>>& runs,
                                             const std::filesystem::path& out_dir) {
    struct Panel {
        const char* file;
        const char* title;
        double MetricsRecord::*field;
    };
    const Panel panels[] = {{"train_loss.svg", "Training loss", &MetricsRecord::train_loss},
                            {"avg_bleu.svg", "Test average BLEU", &MetricsRecord::avg_bleu},
                            {"epoch_sec.svg", "Seconds per epoch", &MetricsRecord::epoch_seconds},
                            {"test_ppl.svg", "Test perplexity", &MetricsRecord::test_ppl}};
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    for (const auto& panel : panels) {
        std::vector<Series> series;
        for (const auto& [name, rows] : runs) {
            Series s{name, {}};
            for (const auto& r : rows) s.points.emplace_back(static_cast<double>(r.epoch), r.*panel.field);
            series.push_back(std::move(s));
        }
        const auto path = out_dir / panel.file;
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path.string());
        out << line_chart_svg(panel.title, "epoch", panel.title, series);
        written.push_back(path);
    }
    return written;
}

} // namespace attnbench
