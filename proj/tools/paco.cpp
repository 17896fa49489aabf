#include "paco/cli.hpp"

int main(int argc, char **argv) { return paco::cli::run(argc, argv); }
