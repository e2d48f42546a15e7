#include "cavl/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cavl {

namespace fs = std::filesystem;

HeatmapResult export_heatmap(ParamStore& params, const ModelConfig& cfg,
                             const Corpus& corpus, std::size_t n,
                             const std::string& out_dir, const EvalOptions& opt) {
  if (n > corpus.size()) {
    throw SplitTooSmall("heatmap over " + std::to_string(n) + " samples, split holds " +
                        std::to_string(corpus.size()));
  }
  fs::create_directories(out_dir);
  HeatmapResult result;
  result.metrics = eval_retrieval(params, cfg, corpus, n, opt);
  const Tensor& sim = result.metrics.similarity;

  result.csv_path = (fs::path(out_dir) / "heatmap.csv").string();
  {
    std::ofstream os(result.csv_path, std::ios::binary);
    if (!os) throw IoError("cannot open " + result.csv_path);
    char buf[32];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        std::snprintf(buf, sizeof buf, "%.6f", sim.at(i, j));
        os << buf << (j + 1 == n ? "" : ",");
      }
      os << '\n';
    }
    if (!os) throw IoError("write failed for " + result.csv_path);
  }

  result.pgm_path = (fs::path(out_dir) / "heatmap.pgm").string();
  {
    std::ofstream os(result.pgm_path, std::ios::binary);
    if (!os) throw IoError("cannot open " + result.pgm_path);
    os << "P2\n" << n << ' ' << n << "\n255\n";
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double scaled = (sim.at(i, j) + 1.0) * 0.5 * 255.0;
        const long pixel = std::lround(std::clamp(scaled, 0.0, 255.0));
        os << pixel << (j + 1 == n ? "" : " ");
      }
      os << '\n';
    }
    if (!os) throw IoError("write failed for " + result.pgm_path);
  }
  return result;
}

Tensor read_similarity_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw MalformedFile(path + ": empty CSV");
  const std::size_t n = rows.size();
  Tensor out(Shape{n, rows[0].size()});
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != rows[0].size()) {
      throw MalformedFile(path + ": ragged CSV rows");
    }
    for (std::size_t j = 0; j < rows[i].size(); ++j) out.at(i, j) = rows[i][j];
  }
  return out;
}

}  // namespace cavl
