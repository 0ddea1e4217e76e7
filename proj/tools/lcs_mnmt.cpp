#include "lcs_mnmt/cli.hpp"

int main(int argc, char** argv) { return lcs::cli::dispatch(argc, argv); }
