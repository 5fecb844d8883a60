#include <iostream>

#include "dcv/cli/commands.hpp"

int main(int argc, char** argv) { return dcv::cli::run(argc, argv, std::cout, std::cerr); }
