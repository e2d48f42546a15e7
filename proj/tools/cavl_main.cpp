#include <vector>

#include "cavl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cavl::run_cli(args);
}
