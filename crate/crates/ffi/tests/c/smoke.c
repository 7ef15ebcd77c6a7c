#include <math.h>
#include <stdio.h>
#include "laaf.h"

int main(void) {
    size_t widths[] = {1, 8, 8, 1};
    LaafNetwork *net = NULL;
    if (laaf_network_new(widths, 4, LAAF_MODE_LLAAF, LAAF_ACTIVATION_TANH, 1.0, 3, &net) != LAAF_STATUS_OK) return 1;

    double x[] = {-1.0, 0.0, 1.0};
    double y[3];
    if (laaf_network_forward(net, x, 3, y, 3) != LAAF_STATUS_OK) return 2;

    double s = 0.0;
    if (laaf_network_slope_recovery(net, &s) != LAAF_STATUS_OK || fabs(s - exp(-1.0)) > 1e-15) return 3;

    double r = 1.0;
    double t[] = {0.5, 0.0, -0.5};
    if (laaf_verify_step_equivalence(net, x, t, 3, 1e-2, &r) != LAAF_STATUS_OK || r > 1e-10) return 4;

    if (laaf_network_forward(net, x, 3, y, 2) != LAAF_STATUS_INVALID_ARGUMENT) return 5;
    char msg[128];
    if (laaf_last_error(msg, sizeof msg) == 0) return 6;

    laaf_network_free(net);
    printf("ok %g\n", y[0]);
    return 0;
}
