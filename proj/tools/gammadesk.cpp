#include <iostream>

#include "gammadesk/cli.hpp"

int main(int argc, char** argv) { return gammadesk::cli::run_cli(argc, argv, std::cout, std::cerr); }
