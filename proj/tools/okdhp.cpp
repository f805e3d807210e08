#include <cstdio>

int main() {
    std::puts("okdhp: subcommands not wired up yet");
    return 0;
}
