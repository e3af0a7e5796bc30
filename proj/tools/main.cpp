#include <iostream>

#include "prorseg/cli.hpp"
#include "prorseg/runtime.hpp"

int main(int argc, char** argv) {
  prorseg::configure_allocator();
  return prorseg::cli::run(argc, argv, std::cout, std::cerr);
}
