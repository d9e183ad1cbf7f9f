#include "vitae/cli.hpp"

int main(int argc, char** argv) { return vitae::run_cli(argc, argv); }
