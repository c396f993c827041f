#include "cli.hpp"

int main(int argc, char** argv) { return r2mf::cli::run(argc, argv); }
