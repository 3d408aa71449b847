#include <cstdio>
int main() {
    const char *targets[] = {"/etc/algoforge-escape", "/root/algoforge-escape", "../algoforge-escape"};
    int written = 0;
    for (const char *t : targets) {
        if (FILE *f = std::fopen(t, "w")) {
            std::fputs("x", f);
            std::fclose(f);
            written++;
        }
    }
    std::printf("%d\n", written);
    return written ? 1 : 0;
}
