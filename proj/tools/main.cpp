#include "textrec/cli.hpp"

int main(int argc, char** argv) {
    return textrec::run_cli(argc, argv);
}
