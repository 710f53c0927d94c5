#include "sldm/cli.hpp"

int main(int argc, char** argv) { return sldm::cli::main(argc, argv); }
