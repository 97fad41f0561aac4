#include <iostream>

#include "cced/cli.hpp"

int main(int argc, char** argv) { return cced::run_cli(argc, argv, std::cout, std::cerr); }
