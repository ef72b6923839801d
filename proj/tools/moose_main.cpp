#include "moose/cli.hpp"

int main(int argc, char** argv) { return moose::cli::run(argc, argv); }
