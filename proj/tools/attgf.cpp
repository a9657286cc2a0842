#include "attgf/cli.hpp"

int main(int argc, char** argv) { return attgf::run_cli(std::vector<std::string>(argv, argv + argc)); }
