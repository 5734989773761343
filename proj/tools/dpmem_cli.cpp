#include "dpmem/cli.hpp"

int main(int argc, char** argv) { return dpmem::cli::run_cli(argc, argv); }
