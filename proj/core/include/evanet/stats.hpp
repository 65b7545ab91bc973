#pragma once

namespace evanet {

// Regularized incomplete beta I_x(a, b) by continued fraction (modified
// Lentz), accurate to ~1e-12 over the parameter ranges a t-test needs.
double incomplete_beta(double a, double b, double x);

// Survival function P(T > t) of Student's t with df degrees of freedom.
double student_t_sf(double t, double df);

// Two-sided p-value for an observed t statistic.
double student_t_two_sided_p(double t, double df);

}  // namespace evanet
