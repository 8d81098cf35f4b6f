#include "ttadapt/cli.hpp"

int main(int argc, char** argv) { return ttadapt::run_command(argc, argv); }
