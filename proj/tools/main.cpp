#include "volmark/cli.hpp"

int main(int argc, char** argv) { return volmark::cli::run(argc, argv); }
