#include "cultura/report.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <spdlog/fmt/fmt.h>

#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/random.hpp"

namespace cultura::report {

namespace {

using Eigen::MatrixXd;

MatrixXd to_matrix(std::span<const features::EmbeddingVector> embeddings) {
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  const auto d = static_cast<Eigen::Index>(embeddings[0].dimension());
  MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = embeddings[static_cast<std::size_t>(i)].components();
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = c[static_cast<std::size_t>(j)];
  }
  return x;
}

MatrixXd squared_distances(const MatrixXd& x) {
  const Eigen::Index n = x.rows();
  MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d2(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (x.row(i) - x.row(j)).squaredNorm();
      d2(i, j) = v;
      d2(j, i) = v;
    }
  }
  return d2;
}

// --- isomap ------------------------------------------------------------------------

constexpr double kInf = std::numeric_limits<double>::infinity();

// Joins disconnected neighbourhood graphs by repeatedly adding the shortest
// edge between the component of point 0 and any other point.
void connect_components(MatrixXd& graph, const MatrixXd& dist) {
  const Eigen::Index n = graph.rows();
  for (;;) {
    std::vector<bool> reached(static_cast<std::size_t>(n), false);
    std::vector<Eigen::Index> stack = {0};
    reached[0] = true;
    while (!stack.empty()) {
      const Eigen::Index u = stack.back();
      stack.pop_back();
      for (Eigen::Index v = 0; v < n; ++v) {
        if (!reached[static_cast<std::size_t>(v)] && std::isfinite(graph(u, v))) {
          reached[static_cast<std::size_t>(v)] = true;
          stack.push_back(v);
        }
      }
    }
    double best = kInf;
    Eigen::Index bi = -1, bj = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!reached[static_cast<std::size_t>(i)]) continue;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (reached[static_cast<std::size_t>(j)]) continue;
        if (dist(i, j) < best) {
          best = dist(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) return;
    graph(bi, bj) = best;
    graph(bj, bi) = best;
  }
}

MatrixXd geodesic_distances(const MatrixXd& dist, int k) {
  const Eigen::Index n = dist.rows();
  MatrixXd g = MatrixXd::Constant(n, n, kInf);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i, i) = 0.0;
    std::vector<Eigen::Index> order;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return dist(i, a) < dist(i, b); });
    for (int m = 0; m < k && m < static_cast<int>(order.size()); ++m) {
      const Eigen::Index j = order[static_cast<std::size_t>(m)];
      g(i, j) = dist(i, j);
      g(j, i) = dist(i, j);
    }
  }
  connect_components(g, dist);
  for (Eigen::Index m = 0; m < n; ++m) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double gim = g(i, m);
      if (!std::isfinite(gim)) continue;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double via = gim + g(m, j);
        if (via < g(i, j)) g(i, j) = via;
      }
    }
  }
  return g;
}

// Classical scaling to two dimensions. Eigenvector signs are fixed so the
// largest-magnitude entry is positive.
std::vector<std::array<double, 2>> classical_mds(const MatrixXd& dist) {
  const Eigen::Index n = dist.rows();
  const MatrixXd d2 = dist.array().square().matrix();
  const MatrixXd j = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  const MatrixXd b = -0.5 * j * d2 * j;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(b);
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n), {0.0, 0.0});
  for (int c = 0; c < 2 && c < n; ++c) {
    const Eigen::Index col = n - 1 - c;
    const double lambda = std::max(eig.eigenvalues()(col), 0.0);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < n; ++i) {
      if (std::abs(v(i)) > std::abs(v(arg)) + 1e-12) arg = i;
    }
    if (v(arg) < 0) v = -v;
    const double s = std::sqrt(lambda);
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = v(i) * s;
  }
  return out;
}

// --- t-SNE ---------------------------------------------------------------------------

// Conditional affinities with a per-point precision found by bisection so
// that each row's entropy equals log(perplexity).
MatrixXd joint_probabilities(const MatrixXd& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  MatrixXd p = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = kInf;
    Eigen::VectorXd row(n);
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = (j == i) ? 0.0 : std::exp(-beta * d2(i, j));
        sum += row(j);
      }
      if (sum <= 0.0) {
        // Precision overshot: every neighbour underflowed.
        hi = beta;
        beta = (lo + hi) / 2.0;
        continue;
      }
      double h = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) h += beta * d2(i, j) * row(j);
      h = h / sum + std::log(sum);
      row /= sum;
      const double diff = h - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isfinite(hi) ? (beta + hi) / 2.0 : beta * 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
    p.row(i) = row.transpose();
  }
  MatrixXd sym = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  return sym.cwiseMax(1e-12);
}

std::vector<std::array<double, 2>> tsne(const MatrixXd& x, double perplexity, int iterations, std::uint64_t seed) {
  const Eigen::Index n = x.rows();
  const MatrixXd p = joint_probabilities(squared_distances(x), perplexity);
  Rng rng(seed);
  MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = 1e-4 * rng.normal();
    y(i, 1) = 1e-4 * rng.normal();
  }
  MatrixXd update = MatrixXd::Zero(n, 2);
  MatrixXd gains = MatrixXd::Ones(n, 2);
  const int exaggeration_iters = std::min(250, iterations / 4);
  const double eta = 200.0;
  MatrixXd num(n, n), grad(n, 2);
  for (int it = 0; it < iterations; ++it) {
    const double exaggeration = it < exaggeration_iters ? 12.0 : 1.0;
    const double momentum = it < exaggeration_iters ? 0.5 : 0.8;
    double z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double v = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        num(i, j) = v;
        num(j, i) = v;
        z += 2.0 * v;
      }
    }
    grad.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num(i, j) / z, 1e-12);
        const double mult = 4.0 * (exaggeration * p(i, j) - q) * num(i, j);
        grad(i, 0) += mult * (y(i, 0) - y(j, 0));
        grad(i, 1) += mult * (y(i, 1) - y(j, 1));
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same_sign = (grad(i, c) > 0) == (update(i, c) > 0);
        gains(i, c) = same_sign ? std::max(gains(i, c) * 0.8, 0.01) : gains(i, c) + 0.2;
        update(i, c) = momentum * update(i, c) - eta * gains(i, c) * grad(i, c);
        y(i, c) += update(i, c);
      }
    }
    const Eigen::RowVector2d mean = y.colwise().mean();
    y.rowwise() -= mean;
  }
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = {y(i, 0), y(i, 1)};
  return out;
}

}  // namespace

std::string_view to_string(ProjectionMethod m) noexcept { return m == ProjectionMethod::tsne ? "tsne" : "isomap"; }

ProjectionMethod parse_projection_method(std::string_view s) {
  if (s == "tsne" || s == "t-sne") return ProjectionMethod::tsne;
  if (s == "isomap") return ProjectionMethod::isomap;
  throw InvalidArgument("unknown projection method '" + std::string(s) + "'");
}

ProjectionResult project_embeddings(std::span<const features::EmbeddingVector> embeddings,
                                    std::span<const std::string> labels, ProjectionMethod method,
                                    std::uint64_t seed, const ProjectionOptions& options) {
  const std::size_t n = embeddings.size();
  if (n < 3) throw InvalidArgument("projection needs at least 3 embeddings, got " + std::to_string(n));
  if (labels.size() != n) throw InvalidArgument("projection needs one label per embedding");
  const std::size_t dim = embeddings[0].dimension();
  if (dim == 0) throw InvalidArgument("projection of empty embeddings");
  for (const auto& e : embeddings) {
    if (e.dimension() != dim) throw InvalidArgument("projection of embeddings with mixed dimensions");
  }
  const MatrixXd x = to_matrix(embeddings);

  ProjectionResult result;
  result.method = method;
  result.labels.assign(labels.begin(), labels.end());
  if (method == ProjectionMethod::isomap) {
    const int k = options.neighbors.value_or(std::min(10, static_cast<int>(n) - 1));
    if (k < 1) throw InvalidArgument("isomap needs at least one neighbour");
    const MatrixXd dist = squared_distances(x).cwiseSqrt();
    result.coords = classical_mds(geodesic_distances(dist, k));
  } else {
    const double perplexity = options.perplexity.value_or(std::max(1.0, std::min(30.0, static_cast<double>(n) / 4.0)));
    if (!(perplexity > 0.0) || perplexity >= static_cast<double>(n)) {
      throw InvalidArgument("t-SNE perplexity must lie in (0, n)");
    }
    if (options.tsne_iterations < 1) throw InvalidArgument("t-SNE needs at least one iteration");
    result.coords = tsne(x, perplexity, options.tsne_iterations, seed);
  }
  for (const auto& c : result.coords) {
    if (!std::isfinite(c[0]) || !std::isfinite(c[1])) throw Error("projection produced a non-finite coordinate");
  }
  return result;
}

void save_projection_csv(const ProjectionResult& projection, const std::filesystem::path& path) {
  csv::Writer w({"Label", "X", "Y"});
  for (std::size_t i = 0; i < projection.coords.size(); ++i) {
    w.add({projection.labels[i], fmt::format("{:.10g}", projection.coords[i][0]),
           fmt::format("{:.10g}", projection.coords[i][1])});
  }
  w.save(path);
}

// --- figures ---------------------------------------------------------------------------

namespace {

constexpr double kWidth = 820, kHeight = 520;
constexpr double kLeft = 80, kRight = 200, kTop = 50, kBottom = 90;
constexpr double kPlotW = kWidth - kLeft - kRight;
constexpr double kPlotH = kHeight - kTop - kBottom;

const char* colour(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

std::string xml_escape(std::string_view s) {
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

struct Range {
  double lo = 0.0, hi = 1.0;
  double to_unit(double v) const { return hi > lo ? (v - lo) / (hi - lo) : 0.5; }
};

Range padded(double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = std::max(1e-3, std::abs(lo) * 0.1);
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

class Svg {
 public:
  Svg(std::string_view title, std::string_view tag) {
    out_ += fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" viewBox=\"0 0 {:.0f} {:.0f}\" "
        "font-family=\"sans-serif\">\n",
        kWidth, kHeight, kWidth, kHeight);
    out_ += fmt::format("<metadata>{}</metadata>\n", xml_escape(tag));
    out_ += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    text(kWidth / 2, 28, title, 16, "middle");
  }

  void text(double x, double y, std::string_view s, int size = 12, std::string_view anchor = "start") {
    out_ += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"{}\" text-anchor=\"{}\">{}</text>\n", x, y, size,
                        anchor, xml_escape(s));
  }
  void line(double x1, double y1, double x2, double y2, std::string_view stroke = "black", double width = 1.0) {
    out_ += fmt::format(
        "<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" stroke-width=\"{:.2f}\"/>\n", x1,
        y1, x2, y2, stroke, width);
  }
  void rect(double x, double y, double w, double h, std::string_view fill) {
    out_ += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n", x, y, w,
                        h, fill);
  }
  void circle(double x, double y, double r, std::string_view fill) {
    out_ += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"{:.2f}\" fill=\"{}\" fill-opacity=\"0.75\"/>\n", x, y,
                        r, fill);
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, std::string_view stroke, bool closed,
                std::string_view fill = "none") {
    std::string p;
    for (const auto& [x, y] : pts) p += fmt::format("{:.2f},{:.2f} ", x, y);
    if (!p.empty()) p.pop_back();
    out_ += fmt::format("<{} points=\"{}\" stroke=\"{}\" fill=\"{}\" fill-opacity=\"0.5\" stroke-width=\"1.5\"/>\n",
                        closed ? "polygon" : "polyline", p, stroke, fill);
  }

  // Frame plus five evenly spaced ticks on the vertical axis.
  void y_axis(const Range& r, std::string_view label) {
    line(kLeft, kTop, kLeft, kTop + kPlotH);
    line(kLeft, kTop + kPlotH, kLeft + kPlotW, kTop + kPlotH);
    for (int t = 0; t <= 4; ++t) {
      const double v = r.lo + (r.hi - r.lo) * t / 4.0;
      const double y = kTop + kPlotH * (1.0 - r.to_unit(v));
      line(kLeft - 4, y, kLeft, y);
      text(kLeft - 6, y + 4, fmt::format("{:.3g}", v), 10, "end");
    }
    out_ += fmt::format(
        "<text x=\"18\" y=\"{:.2f}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2f})\">{}</text>\n",
        kTop + kPlotH / 2, kTop + kPlotH / 2, xml_escape(label));
  }
  void x_ticks(const Range& r, std::string_view label) {
    for (int t = 0; t <= 4; ++t) {
      const double v = r.lo + (r.hi - r.lo) * t / 4.0;
      const double x = kLeft + kPlotW * r.to_unit(v);
      line(x, kTop + kPlotH, x, kTop + kPlotH + 4);
      text(x, kTop + kPlotH + 16, fmt::format("{:.3g}", v), 10, "middle");
    }
    text(kLeft + kPlotW / 2, kHeight - 30, label, 12, "middle");
  }
  void legend(std::span<const std::string> names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const double y = kTop + 10 + 18.0 * static_cast<double>(i);
      rect(kLeft + kPlotW + 20, y - 9, 12, 12, colour(i));
      text(kLeft + kPlotW + 38, y + 1, names[i], 11);
    }
  }

  std::string finish() {
    out_ += "</svg>\n";
    return std::move(out_);
  }

 private:
  std::string out_;
};

double silverman_bandwidth(std::span<const double> values) {
  const auto n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  double iqr = 0.0;
  if (sorted.size() > 1) {
    auto q = [&](double p) {
      const double h = (n - 1) * p;
      const auto lo = static_cast<std::size_t>(std::floor(h));
      const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
      return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    iqr = q(0.75) - q(0.25);
  }
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  if (spread <= 0.0) spread = std::max(1e-3, 0.05 * std::abs(mean));
  return 0.9 * spread * std::pow(n, -0.2);
}

std::vector<double> linspace(double lo, double hi, int count) {
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  return g;
}

Range value_range(std::span<const Series> groups) {
  double lo = kInf, hi = -kInf;
  for (const auto& s : groups) {
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  return padded(lo, hi);
}

}  // namespace

std::vector<double> kernel_density(std::span<const double> values, std::span<const double> grid) {
  std::vector<double> out(grid.size(), 0.0);
  if (values.empty()) return out;
  const double h = silverman_bandwidth(values);
  const double norm = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * 3.14159265358979323846));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double s = 0.0;
    for (double v : values) {
      const double u = (grid[g] - v) / h;
      s += std::exp(-0.5 * u * u);
    }
    out[g] = s * norm;
  }
  return out;
}

std::string svg_bar_chart(std::string_view title, std::string_view y_label, std::span<const Series> bars,
                          std::string_view tag) {
  Svg svg(title, tag);
  double hi = 0.0, lo = 0.0;
  for (const auto& b : bars) {
    const double v = b.values.empty() ? 0.0 : b.values[0];
    hi = std::max(hi, v);
    lo = std::min(lo, v);
  }
  const Range r{lo, hi > lo ? hi * 1.1 - lo * 0.1 : lo + 1.0};
  svg.y_axis(r, y_label);
  const double slot = kPlotW / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  const double zero_y = kTop + kPlotH * (1.0 - r.to_unit(0.0));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = bars[i].values.empty() ? 0.0 : bars[i].values[0];
    const double y = kTop + kPlotH * (1.0 - r.to_unit(v));
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    svg.rect(x, std::min(y, zero_y), slot * 0.7, std::abs(zero_y - y), colour(i));
    svg.text(x + slot * 0.35, std::min(y, zero_y) - 4, fmt::format("{:.3f}", v), 10, "middle");
    svg.text(x + slot * 0.35, kTop + kPlotH + 16, bars[i].name, 10, "middle");
  }
  return svg.finish();
}

std::string svg_violin_plot(std::string_view title, std::string_view y_label, std::span<const Series> groups,
                            std::string_view tag) {
  Svg svg(title, tag);
  const Range r = value_range(groups);
  svg.y_axis(r, y_label);
  const double slot = kPlotW / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const auto grid = linspace(r.lo, r.hi, 100);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double cx = kLeft + slot * (static_cast<double>(i) + 0.5);
    const auto& vals = groups[i].values;
    if (!vals.empty()) {
      const auto dens = kernel_density(vals, grid);
      const double peak = *std::max_element(dens.begin(), dens.end());
      const double half = slot * 0.4;
      std::vector<std::pair<double, double>> pts;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        pts.emplace_back(cx + half * dens[g] / peak, kTop + kPlotH * (1.0 - r.to_unit(grid[g])));
      }
      for (std::size_t g = grid.size(); g-- > 0;) {
        pts.emplace_back(cx - half * dens[g] / peak, kTop + kPlotH * (1.0 - r.to_unit(grid[g])));
      }
      svg.polyline(pts, colour(i), true, colour(i));
      std::vector<double> sorted(vals.begin(), vals.end());
      std::sort(sorted.begin(), sorted.end());
      const std::size_t m = sorted.size();
      const double median = m % 2 ? sorted[m / 2] : (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0;
      const double my = kTop + kPlotH * (1.0 - r.to_unit(median));
      svg.line(cx - slot * 0.15, my, cx + slot * 0.15, my, "black", 2.0);
    }
    svg.text(cx, kTop + kPlotH + 16, groups[i].name, 10, "middle");
    svg.text(cx, kTop + kPlotH + 30, fmt::format("(n={})", vals.size()), 10, "middle");
  }
  return svg.finish();
}

std::string svg_density_plot(std::string_view title, std::string_view x_label, std::span<const Series> groups,
                             std::string_view tag) {
  Svg svg(title, tag);
  const Range xr = value_range(groups);
  const auto grid = linspace(xr.lo, xr.hi, 200);
  std::vector<std::vector<double>> curves;
  double peak = 0.0;
  for (const auto& g : groups) {
    curves.push_back(kernel_density(g.values, grid));
    for (double d : curves.back()) peak = std::max(peak, d);
  }
  const Range yr{0.0, peak > 0.0 ? peak * 1.1 : 1.0};
  svg.y_axis(yr, "density");
  svg.x_ticks(xr, x_label);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      pts.emplace_back(kLeft + kPlotW * xr.to_unit(grid[g]), kTop + kPlotH * (1.0 - yr.to_unit(curves[i][g])));
    }
    svg.polyline(pts, colour(i), false);
    names.push_back(fmt::format("{} (n={})", groups[i].name, groups[i].values.size()));
  }
  svg.legend(names);
  return svg.finish();
}

std::string svg_scatter_plot(std::string_view title, const ProjectionResult& projection, std::string_view tag) {
  Svg svg(title, tag);
  double xlo = kInf, xhi = -kInf, ylo = kInf, yhi = -kInf;
  for (const auto& c : projection.coords) {
    xlo = std::min(xlo, c[0]);
    xhi = std::max(xhi, c[0]);
    ylo = std::min(ylo, c[1]);
    yhi = std::max(yhi, c[1]);
  }
  const Range xr = projection.coords.empty() ? Range{} : padded(xlo, xhi);
  const Range yr = projection.coords.empty() ? Range{} : padded(ylo, yhi);
  svg.y_axis(yr, "component 2");
  svg.x_ticks(xr, "component 1");
  // Legend order is first appearance.
  std::vector<std::string> names;
  std::map<std::string, std::size_t> index;
  for (const auto& l : projection.labels) {
    if (index.emplace(l, names.size()).second) names.push_back(l);
  }
  for (std::size_t i = 0; i < projection.coords.size(); ++i) {
    svg.circle(kLeft + kPlotW * xr.to_unit(projection.coords[i][0]),
               kTop + kPlotH * (1.0 - yr.to_unit(projection.coords[i][1])), 4.0,
               colour(index.at(projection.labels[i])));
  }
  svg.legend(names);
  return svg.finish();
}

}  // namespace cultura::report
