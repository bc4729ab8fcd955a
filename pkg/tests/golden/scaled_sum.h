/* generated by blockflow; do not edit */
#ifndef SCALED_SUM_H
#define SCALED_SUM_H

#define SCALED_SUM_N_STATE 0
#define SCALED_SUM_N_OUT 1

typedef struct {
    double s[1];
} scaled_sum_state;

void scaled_sum_init(scaled_sum_state *st);
/* returns 0 on success, 1 if a loop solve did not converge, 2 on a singular Jacobian */
int scaled_sum_step(scaled_sum_state *st, double *out);

#endif /* SCALED_SUM_H */
