#include "deepsteer/cli.hpp"

int main(int argc, char** argv) { return deepsteer::cli::run(argc, argv); }
