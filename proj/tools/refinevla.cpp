#include <iostream>

#include "rfvla/cli.hpp"

int main(int argc, char** argv) { return rfvla::cli::run(argc, argv, std::cout, std::cerr); }
