#include "txnet/cli.hpp"

int main(int argc, char** argv) { return txnet::run_cli(argc, argv); }
