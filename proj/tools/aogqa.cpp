#include "aogqa/cli.hpp"

int main(int argc, char** argv) { return aogqa::cli::run(argc, argv); }
