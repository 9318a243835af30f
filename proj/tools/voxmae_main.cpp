#include <iostream>

#include "voxmae/cli.hpp"

int main(int argc, char** argv) { return voxmae::cli_main(argc, argv, std::cout, std::cerr); }
