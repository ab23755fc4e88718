#include "cli.hpp"

int main(int argc, char** argv) { return msae::cli::main(argc, argv); }
