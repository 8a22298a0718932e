#include <string>
#include <vector>

#include "mwm/cli_app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mwm::cli::run_cli(std::move(args));
}
