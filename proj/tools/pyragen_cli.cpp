#include "pyragen/cli.hpp"

int main(int argc, char** argv) { return pyragen::run_cli(argc, argv); }
