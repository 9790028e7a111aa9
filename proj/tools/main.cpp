#include <iostream>

#include "ilss/cli.hpp"

int main(int argc, char** argv) { return ilss::run_cli(argc, argv, std::cout, std::cerr); }
