#include <iostream>

#include "reformer/cli.hpp"

int main(int argc, char** argv) { return reformer::run_cli(argc, argv, std::cout, std::cerr); }
