#include <iostream>

#include "sfbs/experiment.hpp"

int main(int argc, char** argv) { return sfbs::cli_main(argc, argv, std::cout, std::cerr); }
