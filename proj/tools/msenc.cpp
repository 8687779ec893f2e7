#include "msenc/cli.hpp"

int main(int argc, char** argv) { return msenc::cli::run(argc, argv); }
