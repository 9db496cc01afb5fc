#include <vector>

#include "csdi/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return csdi::cli::dispatch(std::move(args));
}
