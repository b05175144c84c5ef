#include <stdio.h>

int add_mul(int a, int b);

int main(void) {
    static const int xs[][2] = {{0, 0}, {1, 2}, {-4, 7}, {1000, -3}, {123456, 789}, {-70000, -5}};
    for (unsigned i = 0; i < sizeof(xs) / sizeof(xs[0]); i++)
        printf("add_mul(%d, %d) = %d\n", xs[i][0], xs[i][1], add_mul(xs[i][0], xs[i][1]));
    return 0;
}
