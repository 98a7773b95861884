#include <iostream>

#include "mshubert/cli.hpp"

int main(int argc, char** argv) { return mshubert::run_cli(argc, argv, std::cout, std::cerr); }
