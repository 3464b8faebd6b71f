#include <iostream>

#include "apf/cli.hpp"

int main(int argc, char** argv) {
  return apf::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
