#include <iostream>

#include "obc/commands.hpp"

int main(int argc, char** argv) { return obc::run_cli(argc, argv, std::cout, std::cerr); }
