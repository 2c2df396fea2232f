#include "skiprec/cli.hpp"

int main(int argc, char** argv) { return skiprec::cli::run(argc, argv); }
