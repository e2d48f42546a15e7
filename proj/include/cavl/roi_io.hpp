#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cavl/tensor.hpp"

namespace cavl {

// ROI sidecar format, little-endian:
//   magic "CAVLROIS" | version u32 | count u64 | offsets u64[count] |
//   per record at its offset: scores tensor [K] | features tensor [K x d_v]
// Tensors use the CAVLTNSR interchange format.
inline constexpr char kRoiMagic[8] = {'C', 'A', 'V', 'L', 'R', 'O', 'I', 'S'};
inline constexpr std::uint32_t kRoiFormatVersion = 1;

struct RoiRecord {
  Tensor scores;    // [K]
  Tensor features;  // [K x d_v]
};

/// Writes all records and returns their absolute file offsets.
std::vector<std::uint64_t> write_roi_file(const std::string& path,
                                          std::span<const RoiRecord> records);

std::vector<RoiRecord> read_roi_file(const std::string& path);

struct IngestedRois {
  Tensor features;  // [K' x d_v]
  Tensor scores;    // [K']
};

/// Drops ROIs with score <= threshold, orders survivors by descending score
/// (ties by original index) and keeps at most max_rois of them. Throws
/// EmptyAfterFilter when nothing survives.
IngestedRois ingest_roi_features(const Tensor& features, const Tensor& scores,
                                 double score_threshold = 0.5,
                                 std::size_t max_rois = 100);

/// File-level convenience: ingest every record of a .rois file.
std::vector<IngestedRois> ingest_roi_file(const std::string& path,
                                          double score_threshold = 0.5,
                                          std::size_t max_rois = 100);

}  // namespace cavl
