#include "cavl/roi_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "cavl/tensor_io.hpp"

namespace cavl {

std::vector<std::uint64_t> write_roi_file(const std::string& path,
                                          std::span<const RoiRecord> records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_bytes(os, kRoiMagic, sizeof kRoiMagic);
  write_u32(os, kRoiFormatVersion);
  write_u64(os, records.size());
  const std::uint64_t table_pos = 8 + 4 + 8;
  std::vector<std::uint64_t> offsets(records.size(), 0);
  for (std::uint64_t o : offsets) write_u64(os, o);  // placeholder table
  for (std::size_t i = 0; i < records.size(); ++i) {
    offsets[i] = static_cast<std::uint64_t>(os.tellp());
    write_tensor(os, records[i].scores);
    write_tensor(os, records[i].features);
  }
  os.seekp(static_cast<std::streamoff>(table_pos));
  for (std::uint64_t o : offsets) write_u64(os, o);
  if (!os) throw IoError("write failed for " + path);
  return offsets;
}

std::vector<RoiRecord> read_roi_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  read_bytes(is, magic, sizeof magic);
  if (std::memcmp(magic, kRoiMagic, sizeof magic) != 0) {
    throw MalformedFile(path + ": bad ROI file magic");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kRoiFormatVersion) {
    throw MalformedFile(path + ": unsupported ROI format version");
  }
  const std::uint64_t count = read_u64(is);
  if (count > (1ULL << 32)) throw MalformedFile(path + ": implausible record count");
  std::vector<std::uint64_t> offsets(count);
  for (auto& o : offsets) o = read_u64(is);
  std::vector<RoiRecord> records;
  records.reserve(count);
  for (std::uint64_t off : offsets) {
    is.seekg(static_cast<std::streamoff>(off));
    if (!is) throw MalformedFile(path + ": bad record offset");
    RoiRecord r;
    r.scores = read_tensor(is);
    r.features = read_tensor(is);
    if (r.scores.rank() != 1 || r.features.rank() != 2 ||
        r.scores.numel() != r.features.extent(0)) {
      throw MalformedFile(path + ": score/feature extents disagree");
    }
    records.push_back(std::move(r));
  }
  return records;
}

IngestedRois ingest_roi_features(const Tensor& features, const Tensor& scores,
                                 double score_threshold, std::size_t max_rois) {
  if (features.rank() != 2 || scores.rank() != 1 ||
      scores.numel() != features.extent(0)) {
    throw MalformedFile("ingest_roi_features: need features [K x d_v] with K scores");
  }
  const std::size_t k = scores.numel(), d = features.extent(1);
  std::vector<std::size_t> keep;
  keep.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (scores[i] > score_threshold) keep.push_back(i);
  }
  if (keep.empty()) {
    throw EmptyAfterFilter("ingest_roi_features: no ROI scored above " +
                           std::to_string(score_threshold));
  }
  std::stable_sort(keep.begin(), keep.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (keep.size() > max_rois) keep.resize(max_rois);

  IngestedRois out{Tensor(Shape{keep.size(), d}), Tensor(Shape{keep.size()})};
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.scores[r] = scores[keep[r]];
    const double* src = features.values().data() + keep[r] * d;
    std::copy(src, src + d, out.features.values().data() + r * d);
  }
  return out;
}

std::vector<IngestedRois> ingest_roi_file(const std::string& path, double score_threshold,
                                          std::size_t max_rois) {
  std::vector<IngestedRois> out;
  for (const RoiRecord& r : read_roi_file(path)) {
    out.push_back(ingest_roi_features(r.features, r.scores, score_threshold, max_rois));
  }
  return out;
}

}  // namespace cavl
