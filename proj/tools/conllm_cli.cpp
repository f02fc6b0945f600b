#include "conllm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return conllm::cli::run(argc, argv, std::cout, std::cerr); }
