#include "capsforge/cli.hpp"

int main(int argc, char** argv) { return capsforge::cli::run(argc, argv); }
