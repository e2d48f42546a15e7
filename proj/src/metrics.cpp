#include "cavl/metrics.hpp"

#include "cavl/errors.hpp"

namespace cavl {

MetricsWriter::MetricsWriter(const std::string& path) : os_(path, std::ios::binary) {
  if (!os_) throw IoError("cannot open metrics stream " + path);
}

void MetricsWriter::emit(const nlohmann::json& j) {
  os_ << j.dump() << '\n';
  if (!os_) throw IoError("metrics stream write failed");
  ++lines_;
}

void MetricsWriter::step_record(std::size_t step, std::size_t epoch, double lr,
                                const LossReport& r) {
  emit(nlohmann::json{{"step", step},
                      {"epoch", epoch},
                      {"lr", lr},
                      {"mlm", r.mlm},
                      {"nsp", r.nsp},
                      {"caption", r.caption},
                      {"pwcl", r.pwcl},
                      {"total", r.total},
                      {"aps", r.aps}});
}

void MetricsWriter::eval_record(std::size_t step, std::size_t epoch,
                                const RetrievalMetrics& m) {
  emit(nlohmann::json{{"step", step},
                      {"epoch", epoch},
                      {"aps", m.aps},
                      {"recall@1", m.recall1},
                      {"recall@5", m.recall5},
                      {"recall@10", m.recall10}});
}

void MetricsWriter::finetune_step_record(std::size_t step, std::size_t epoch, double lr,
                                         double task_loss, double accuracy, double pwcl,
                                         double total) {
  emit(nlohmann::json{{"step", step},
                      {"epoch", epoch},
                      {"lr", lr},
                      {"task", task_loss},
                      {"acc", accuracy},
                      {"pwcl", pwcl},
                      {"total", total}});
}

void MetricsWriter::flush() { os_.flush(); }

}  // namespace cavl
