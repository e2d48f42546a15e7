#pragma once

#include <fstream>
#include <string>

#include "cavl/objectives.hpp"

namespace cavl {

struct RetrievalMetrics {
  std::size_t n = 0;
  double aps = 0.0;          // mean diagonal similarity
  double mean_offdiag = 0.0;
  double recall1 = 0.0, recall5 = 0.0, recall10 = 0.0;
  Tensor similarity;  // [n x n], row = text, col = image
};

/// JSONL metrics stream. One object per line, keys sorted; step records and
/// eval records have fixed schemas and recall fields appear only on eval
/// lines. No timestamps: the stream must be byte-reproducible.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);

  void step_record(std::size_t step, std::size_t epoch, double lr, const LossReport& r);
  void eval_record(std::size_t step, std::size_t epoch, const RetrievalMetrics& m);
  void finetune_step_record(std::size_t step, std::size_t epoch, double lr,
                            double task_loss, double accuracy, double pwcl,
                            double total);
  void flush();
  std::size_t lines() const { return lines_; }

 private:
  void emit(const nlohmann::json& j);

  std::ofstream os_;
  std::size_t lines_ = 0;
};

}  // namespace cavl
