#include "powerpm/commands.hpp"

int main(int argc, char** argv) { return powerpm::cli::run(argc, argv); }
