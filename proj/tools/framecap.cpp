#include "framecap/cli.hpp"

int main(int argc, char** argv) { return framecap::run_cli(argc, argv); }
