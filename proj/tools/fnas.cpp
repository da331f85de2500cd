#include <fnas/cli.hpp>

int main(int argc, char** argv) { return fnas::cli::run(argc, argv); }
