#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include "omnimatte/cli_app.hpp"

namespace {

extern "C" void on_sigint(int) { omni::cli::interrupt_flag().store(true); }

} // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, on_sigint);
    std::vector<std::string> args(argv + 1, argv + argc);
    return omni::cli::run_cli(args, std::cout, std::cerr);
}
