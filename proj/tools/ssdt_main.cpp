#include <string>
#include <vector>

#include "ssdt/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return ssdt::cli::run(args);
}
