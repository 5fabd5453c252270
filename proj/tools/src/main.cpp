#include <iostream>

#include "kgalign_tools/cli.hpp"

int main(int argc, char** argv) { return kgalign::run_cli(argc, argv, std::cout, std::cerr); }
