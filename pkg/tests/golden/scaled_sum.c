/* generated by blockflow; do not edit */
#include <math.h>
#include "scaled_sum.h"

/* outputs: [0] s.out0 */
static const double K[3] = {5.0, 2.0, 0.5};

void scaled_sum_init(scaled_sum_state *st)
{
    st->s[0] = 0.0;
}

int scaled_sum_step(scaled_sum_state *st, double *out)
{
    double r[4];
    r[0] = K[0];
    r[1] = K[1];
    r[2] = K[2] * r[0];
    r[3] = r[2] + r[1];
    out[0] = r[3];
    return 0;
}
