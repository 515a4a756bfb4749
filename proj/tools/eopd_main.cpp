#include "eopd/cli.hpp"

int main(int argc, char** argv) {
  eopd::cli::init_logging();
  return eopd::cli::run(argc, argv);
}
