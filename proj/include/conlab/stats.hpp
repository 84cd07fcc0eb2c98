#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conlab/common.hpp"

namespace conlab::stats {

enum class Tail { OneTailed, TwoTailed };

struct StatResult {
    double statistic = 0.0;
    double p_value = 1.0;
    Tail tail = Tail::TwoTailed;
    std::string convention;  // exact recipe used, e.g. "pooled+continuity"
    std::optional<double> effect_size;
    bool degenerate = false;  // e.g. zero-variance t-test input
};

// Standard normal CDF via erfc; |error| well under 1e-12.
double normal_cdf(double x);
// Inverse via bisection on normal_cdf; |error| < 1e-10.
double normal_quantile(double p);

// Student t CDF, regularized incomplete beta continued fraction.
// Documented max absolute error <= 1e-10 for df >= 1.
double student_t_cdf(double t, double df);

// Pooled-SE two-proportion z-test. With `continuity` the absolute difference
// is reduced by (1/n1+1/n2)/2, floored at 0. One-tailed means "group 1
// greater". effect_size carries Cohen's h.
StatResult two_proportion_z(std::uint64_t k1, std::uint64_t n1, std::uint64_t k2,
                            std::uint64_t n2, Tail tail, bool continuity);

// h = |2 asin(sqrt(p1)) - 2 asin(sqrt(p2))|
double cohens_h(double p1, double p2);

// Fisher's exact test on [[a,b],[c,d]], fixed margins, lgamma log-space.
// One-tailed sums tables at least as extreme in the observed direction;
// two-tailed sums all tables with probability <= observed (with a 1e-7
// relative slack for floating point). `statistic` carries the observed
// table's hypergeometric probability.
StatResult fisher_exact(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d,
                        Tail tail);

// One-sample t-test from summary statistics (sd is the unbiased sample sd).
StatResult one_sample_t_summary(std::size_t n, double mean, double sd, double mu0, Tail tail);
StatResult one_sample_t(const std::vector<double>& samples, double mu0, Tail tail);

// Normal-approximation post-hoc power for the two-proportion z-test:
//   power = Phi((max(0, |p1-p2| - cc) - z_alpha * SE0) / SE1)
// SE0 pooled at (p1+p2)/2, SE1 unpooled, cc = (1/n1+1/n2)/2 when `continuity`
// (mirroring the z-test convention; the floor keeps power(p,p) == alpha).
double power_two_proportion(double p1, double p2, std::uint64_t n_per_group, double alpha,
                            Tail tail, bool continuity = true);

std::string stat_result_to_json(const StatResult& r);

}  // namespace conlab::stats
