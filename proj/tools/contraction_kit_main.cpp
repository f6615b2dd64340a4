#include "contraction_kit/run.hpp"

int main(int argc, char** argv) { return ckit::run_cli(argc, argv); }
