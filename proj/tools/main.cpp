#include <iostream>
#include <string>
#include <vector>

#include "ma3/cli.hpp"

int main(int argc, char** argv) {
  return ma3::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
