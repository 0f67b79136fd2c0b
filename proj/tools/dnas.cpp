#include "dnas/cli.hpp"

int main(int argc, char** argv) {
  dnas::tune_allocator();
  return dnas::cli::run(argc, argv);
}
