#include "dasent/cli.hpp"

int main(int argc, char** argv) { return dasent::cli::run(argc, argv); }
