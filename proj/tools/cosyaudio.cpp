#include "cosy/cli.hpp"

int main(int argc, char** argv) { return cosy::run_cli(argc, argv); }
