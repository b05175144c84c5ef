#include <stdio.h>

#ifndef TASK_SEED
#error "TASK_SEED must be defined at compile time"
#endif

#define LEN 32000
#define REPS 1000

void s000(float *a, const float *b, int n);

static float a[LEN], b[LEN];
static unsigned int rng_state;

static float next_uniform(void) {
    rng_state ^= rng_state << 13;
    rng_state ^= rng_state >> 17;
    rng_state ^= rng_state << 5;
    return (float)(rng_state >> 8) / 16777216.0f;
}

static double checksum(const float *x, int n) {
    double s = 0.0;
    for (int i = 0; i < n; i++)
        s += x[i] * (double)((i % 7) + 1);
    return s;
}

int main(void) {
    rng_state = (unsigned int)TASK_SEED ? (unsigned int)TASK_SEED : 1u;
    for (int i = 0; i < LEN; i++) {
        a[i] = next_uniform();
        b[i] = next_uniform();
    }
    for (int r = 0; r < REPS; r++) {
        s000(a, b, LEN);
        b[r % LEN] = a[(r * 7) % LEN] * 0.5f;
    }
    printf("a: %.6f\n", checksum(a, LEN));
    printf("b: %.6f\n", checksum(b, LEN));
    return 0;
}
