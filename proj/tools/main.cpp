#include "aqnode/cli.hpp"

int main(int argc, char** argv) { return aqnode::cli::dispatch(argc, argv); }
