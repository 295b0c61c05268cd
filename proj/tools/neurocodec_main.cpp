#include "neurocodec/cli_runner.hpp"

int main(int argc, char** argv) { return neurocodec::cli::run_cli(argc, argv); }
