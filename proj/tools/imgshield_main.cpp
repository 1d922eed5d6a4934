#include "imgshield/cli.hpp"

int main(int argc, char** argv) { return imgshield::cli_main(argc, argv); }
