#pragma once

#include <cstdint>
#include <vector>

#include "cavl/tensor.hpp"

namespace cavl {

/// Model-ready batch. Sequences share one padding plan: every sample is laid
/// out as [CLS] tokens [SEP] pads | ROI slots pads, so the packed states
/// matrix is [size*seq x hidden] with sample b occupying rows [b*seq, (b+1)*seq).
struct Batch {
  std::size_t size = 0;        // B
  std::size_t text_width = 0;  // [CLS] + tokens + [SEP] + pads
  std::size_t vis_width = 0;   // ROI slots + pads
  std::size_t seq = 0;         // text_width + vis_width

  std::vector<Index> token_ids;        // B * text_width
  std::vector<Index> token_segments;   // B * text_width
  std::vector<Index> token_positions;  // B * text_width
  Tensor roi_features;                 // [B*vis_width x d_v], zero rows at pads
  std::vector<Index> vis_segments;     // B * vis_width
  std::vector<Index> vis_positions;    // B * vis_width

  // Flags in packed sequence coordinates (length B * seq).
  std::vector<std::uint8_t> real;          // attendable (non-pad)
  std::vector<std::uint8_t> text_content;  // real text token, not [CLS]/[SEP]
  std::vector<std::uint8_t> vis_content;   // real ROI slot

  std::vector<std::size_t> masked_rows;  // packed rows carrying MLM predictions
  std::vector<Index> mlm_targets;        // original ids, parallel to masked_rows

  std::vector<Index> nsp_labels;    // 1 = consecutive halves
  std::vector<Index> match_labels;  // 1 = text belongs to the image

  std::vector<std::uint64_t> text_source;   // corpus sample id the text came from
  std::vector<std::uint64_t> image_source;  // corpus sample id the ROIs came from
  std::vector<Index> image_class;           // latent class of the image side
};

}  // namespace cavl
