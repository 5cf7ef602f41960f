#include "p2det/cli.hpp"

int main(int argc, char** argv) { return p2det::run_cli(argc, argv); }
