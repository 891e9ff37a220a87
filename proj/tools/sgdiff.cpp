#include <iostream>

#include "sgdiff/cli.hpp"

int main(int argc, char** argv) { return sgdiff::run_cli(argc, argv, std::cout, std::cerr); }
