#include "lkd/cli.hpp"

int main(int argc, char** argv) { return lkd::cli::run(argc, argv); }
