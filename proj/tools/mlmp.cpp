#include "mlmp/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return mlmp::cli::dispatch(std::move(args));
}
