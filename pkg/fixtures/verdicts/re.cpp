#include <cstdio>
int main() {
    volatile int *bad = reinterpret_cast<int *>(16);
    std::printf("%d\n", *bad);
    return 0;
}
