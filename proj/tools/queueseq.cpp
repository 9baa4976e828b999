#include "queueseq/cli.hpp"

int main(int argc, char** argv) { return queueseq::cli::run(argc, argv); }
