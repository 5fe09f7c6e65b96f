#include "evimix/cli.hpp"

int main(int argc, char** argv) { return evimix::cli::run(argc, argv); }
