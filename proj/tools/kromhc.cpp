#include <iostream>

#include "kromhc/cli.hpp"

int main(int argc, char** argv) { return kromhc::run_cli(argc, argv, std::cout, std::cerr); }
