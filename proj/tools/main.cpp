#include "deformpic/cli.hpp"

int main(int argc, char** argv) { return deformpic::cli::main(argc, argv); }
