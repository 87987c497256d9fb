#include "vlaquant/cli.hpp"

int main(int argc, char** argv) { return vlaq::run_cli(argc, argv); }
