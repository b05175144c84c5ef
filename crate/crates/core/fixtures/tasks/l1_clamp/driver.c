#include <stdio.h>

int clamp(int x, int lo, int hi);

int main(void) {
    int total = 0;
    for (int x = -20; x <= 20; x += 3) {
        int c = clamp(x, -7, 11);
        printf("clamp(%d) = %d\n", x, c);
        total += c;
    }
    return total & 0x7f;
}
