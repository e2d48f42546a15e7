#pragma once

#include <string>
#include <vector>

namespace cavl {

/// Dispatches the cavl subcommands (pretrain, finetune, eval, heatmap,
/// gradcheck, gen-data). Returns 0 on success, 1 on usage errors, 2 on
/// runtime errors; diagnostics go to stderr.
int run_cli(const std::vector<std::string>& args);

}  // namespace cavl
