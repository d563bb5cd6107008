#include "kgl/cli.hpp"

int main(int argc, char** argv) { return kgl::cli::run(argc, argv); }
