#include "pclr/harness/cli.hpp"

int main(int argc, char** argv) { return pclr::cli::dispatch(argc, argv); }
