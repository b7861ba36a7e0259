#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cultura/features.hpp"

/// Embedding projections and static figures.
namespace cultura::report {

enum class ProjectionMethod { tsne, isomap };

std::string_view to_string(ProjectionMethod m) noexcept;
ProjectionMethod parse_projection_method(std::string_view s);

struct ProjectionOptions {
  /// Defaults to min(30, n / 4), at least 1.
  std::optional<double> perplexity;
  /// Defaults to min(10, n - 1).
  std::optional<int> neighbors;
  int tsne_iterations = 1000;
};

struct ProjectionResult {
  ProjectionMethod method = ProjectionMethod::isomap;
  std::vector<std::array<double, 2>> coords;
  std::vector<std::string> labels;
};

/// Projects embeddings to 2D. Deterministic for a given seed (isomap uses
/// no randomness). Throws InvalidArgument for fewer than three points,
/// mismatched label count, or mixed dimensions.
ProjectionResult project_embeddings(std::span<const features::EmbeddingVector> embeddings,
                                    std::span<const std::string> labels, ProjectionMethod method,
                                    std::uint64_t seed, const ProjectionOptions& options = {});

/// Label,x,y rows.
void save_projection_csv(const ProjectionResult& projection, const std::filesystem::path& path);

// --- figures ---------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> values;
};

/// Every figure is a standalone SVG document with fixed-precision numbers,
/// so identical inputs give identical bytes. `tag` is written into the
/// document metadata.
std::string svg_bar_chart(std::string_view title, std::string_view y_label, std::span<const Series> bars,
                          std::string_view tag);

/// One violin per series with its sample size printed beneath it.
std::string svg_violin_plot(std::string_view title, std::string_view y_label, std::span<const Series> groups,
                            std::string_view tag);

/// Overlaid kernel density curves, one per series.
std::string svg_density_plot(std::string_view title, std::string_view x_label, std::span<const Series> groups,
                             std::string_view tag);

std::string svg_scatter_plot(std::string_view title, const ProjectionResult& projection, std::string_view tag);

/// Gaussian kernel density with Silverman's bandwidth, evaluated on `grid`.
std::vector<double> kernel_density(std::span<const double> values, std::span<const double> grid);

}  // namespace cultura::report
