#include <iostream>

#include "usbb/gateway.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return usbb::gateway::run_cli(args, std::cout, std::cerr);
}
