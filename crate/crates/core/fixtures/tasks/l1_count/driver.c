#include <stdio.h>

int count_pos(const int *a, int n);

int main(void) {
    int a[64];
    for (int i = 0; i < 64; i++)
        a[i] = (i * 37 % 23) - 11;
    printf("count_pos(a, 0) = %d\n", count_pos(a, 0));
    printf("count_pos(a, 10) = %d\n", count_pos(a, 10));
    printf("count_pos(a, 64) = %d\n", count_pos(a, 64));
    return 0;
}
