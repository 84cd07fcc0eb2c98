#include "conlab/stats.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

using nlohmann::json;

namespace conlab::stats {

double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / 1.4142135623730950488016887242097);
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal_quantile: p must be in (0,1)");
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (normal_cdf(mid) < p) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
}

namespace {

// Continued fraction for the regularized incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

// Regularized incomplete beta I_x(a, b); prefactor in log space so tiny
// tails stay accurate down to the double underflow limit.
double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_pre = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return std::exp(ln_pre) * betacf(a, b, x) / a;
    }
    return 1.0 - std::exp(ln_pre) * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw ValidationError("student_t_cdf: df must be positive");
    if (t == 0.0) return 0.5;
    const double x = df / (df + t * t);
    const double tail = 0.5 * inc_beta(0.5 * df, 0.5, x);
    return t > 0.0 ? 1.0 - tail : tail;
}

StatResult two_proportion_z(std::uint64_t k1, std::uint64_t n1, std::uint64_t k2,
                            std::uint64_t n2, Tail tail, bool continuity) {
    if (n1 == 0 || n2 == 0) throw ValidationError("two_proportion_z: group sizes must be positive");
    if (k1 > n1 || k2 > n2) throw ValidationError("two_proportion_z: k exceeds n");

    const double p1 = static_cast<double>(k1) / static_cast<double>(n1);
    const double p2 = static_cast<double>(k2) / static_cast<double>(n2);
    const double pooled = static_cast<double>(k1 + k2) / static_cast<double>(n1 + n2);
    const double inv = 1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2);
    const double se = std::sqrt(pooled * (1.0 - pooled) * inv);

    double diff = p1 - p2;
    if (continuity) {
        const double cc = 0.5 * inv;
        const double mag = std::max(0.0, std::abs(diff) - cc);
        diff = (diff < 0.0 ? -mag : mag);
    }

    StatResult r;
    r.tail = tail;
    r.convention = std::string(continuity ? "pooled+continuity" : "pooled") +
                   (tail == Tail::OneTailed ? ",one-tailed(group1-greater)" : ",two-tailed");
    r.effect_size = cohens_h(p1, p2);
    r.statistic = (se > 0.0) ? diff / se : 0.0;
    if (tail == Tail::OneTailed) {
        r.p_value = 1.0 - normal_cdf(r.statistic);
    } else {
        r.p_value = 2.0 * (1.0 - normal_cdf(std::abs(r.statistic)));
    }
    r.p_value = std::clamp(r.p_value, 0.0, 1.0);
    return r;
}

double cohens_h(double p1, double p2) {
    if (!(p1 >= 0.0 && p1 <= 1.0 && p2 >= 0.0 && p2 <= 1.0)) {
        throw ValidationError("cohens_h: proportions must lie in [0,1]");
    }
    return std::abs(2.0 * std::asin(std::sqrt(p1)) - 2.0 * std::asin(std::sqrt(p2)));
}

namespace {

double lchoose(std::uint64_t n, std::uint64_t k) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
           std::lgamma(static_cast<double>(n - k) + 1.0);
}

// P(first cell = a) for fixed margins (r1, r2, c1), total n.
double log_hyper(std::uint64_t a, std::uint64_t r1, std::uint64_t r2, std::uint64_t c1,
                 std::uint64_t n) {
    return lchoose(r1, a) + lchoose(r2, c1 - a) - lchoose(n, c1);
}

}  // namespace

StatResult fisher_exact(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d,
                        Tail tail) {
    const std::uint64_t r1 = a + b, r2 = c + d, c1 = a + c, n = a + b + c + d;
    if (n == 0) throw ValidationError("fisher_exact: all-zero table");

    const std::uint64_t a_min = (c1 > r2) ? c1 - r2 : 0;
    const std::uint64_t a_max = std::min(r1, c1);

    const double log_obs = log_hyper(a, r1, r2, c1, n);

    StatResult r;
    r.tail = tail;
    r.statistic = std::exp(log_obs);  // probability of the observed table

    double p = 0.0;
    if (tail == Tail::OneTailed) {
        // Direction of the observed imbalance: compare cell `a` with its
        // expectation under independence, r1*c1/n.
        const double expected_a =
            static_cast<double>(r1) * static_cast<double>(c1) / static_cast<double>(n);
        const bool greater = static_cast<double>(a) >= expected_a;
        r.convention = greater ? "hypergeometric,one-tailed(greater)"
                               : "hypergeometric,one-tailed(less)";
        if (greater) {
            for (std::uint64_t ai = a; ai <= a_max; ++ai) p += std::exp(log_hyper(ai, r1, r2, c1, n));
        } else {
            for (std::uint64_t ai = a_min; ai <= a; ++ai) p += std::exp(log_hyper(ai, r1, r2, c1, n));
        }
    } else {
        r.convention = "hypergeometric,two-tailed(prob<=observed)";
        const double cutoff = log_obs + 1e-7;
        for (std::uint64_t ai = a_min; ai <= a_max; ++ai) {
            const double lp = log_hyper(ai, r1, r2, c1, n);
            if (lp <= cutoff) p += std::exp(lp);
        }
    }
    r.p_value = std::clamp(p, 0.0, 1.0);
    return r;
}

StatResult one_sample_t_summary(std::size_t n, double mean, double sd, double mu0, Tail tail) {
    if (n < 2) throw ValidationError("one_sample_t: need at least 2 samples");
    if (sd < 0.0) throw ValidationError("one_sample_t: negative sd");

    StatResult r;
    r.tail = tail;
    r.convention = std::string("student-t,df=n-1") +
                   (tail == Tail::OneTailed ? ",one-tailed(mean-greater)" : ",two-tailed");

    if (sd == 0.0) {
        r.degenerate = true;
        if (mean == mu0) {
            r.statistic = 0.0;
            r.p_value = (tail == Tail::OneTailed) ? 0.5 : 1.0;
        } else {
            // Zero variance, nonzero shift: the limit is p -> 0.
            r.statistic = (mean > mu0) ? HUGE_VAL : -HUGE_VAL;
            if (tail == Tail::OneTailed) {
                r.p_value = (mean > mu0) ? 0.0 : 1.0;
            } else {
                r.p_value = 0.0;
            }
            r.convention += ",zero-variance-limit";
        }
        return r;
    }

    const double df = static_cast<double>(n) - 1.0;
    r.statistic = (mean - mu0) / (sd / std::sqrt(static_cast<double>(n)));
    if (tail == Tail::OneTailed) {
        r.p_value = 1.0 - student_t_cdf(r.statistic, df);
    } else {
        r.p_value = 2.0 * (1.0 - student_t_cdf(std::abs(r.statistic), df));
    }
    r.p_value = std::clamp(r.p_value, 0.0, 1.0);
    r.effect_size = (mean - mu0) / sd;  // Cohen's d
    return r;
}

StatResult one_sample_t(const std::vector<double>& samples, double mu0, Tail tail) {
    if (samples.size() < 2) throw ValidationError("one_sample_t: need at least 2 samples");
    double sum = 0.0;
    for (double v : samples) sum += v;
    const double mean = sum / static_cast<double>(samples.size());
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(samples.size() - 1));
    return one_sample_t_summary(samples.size(), mean, sd, mu0, tail);
}

double power_two_proportion(double p1, double p2, std::uint64_t n_per_group, double alpha,
                            Tail tail, bool continuity) {
    if (!(p1 >= 0.0 && p1 <= 1.0 && p2 >= 0.0 && p2 <= 1.0)) {
        throw ValidationError("power_two_proportion: proportions must lie in [0,1]");
    }
    if (n_per_group == 0) throw ValidationError("power_two_proportion: n must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("power_two_proportion: alpha in (0,1)");

    const double n = static_cast<double>(n_per_group);
    const double pbar = 0.5 * (p1 + p2);
    const double se0 = std::sqrt(2.0 * pbar * (1.0 - pbar) / n);
    const double se1 = std::sqrt((p1 * (1.0 - p1) + p2 * (1.0 - p2)) / n);
    const double z_alpha =
        normal_quantile(tail == Tail::OneTailed ? 1.0 - alpha : 1.0 - alpha / 2.0);

    double diff = std::abs(p1 - p2);
    if (continuity) diff = std::max(0.0, diff - 1.0 / n);

    if (se1 == 0.0) return diff > 0.0 ? 1.0 : alpha;
    double power = normal_cdf((diff - z_alpha * se0) / se1);
    if (tail == Tail::TwoTailed) {
        // rejections in the opposite direction; keeps power(p, p) == alpha
        power += normal_cdf((-diff - z_alpha * se0) / se1);
    }
    return std::clamp(power, 0.0, 1.0);
}

std::string stat_result_to_json(const StatResult& r) {
    json j;
    j["statistic"] = r.statistic;
    j["p_value"] = r.p_value;
    j["tail"] = (r.tail == Tail::OneTailed) ? "one-tailed" : "two-tailed";
    j["convention"] = r.convention;
    if (r.effect_size) j["effect_size"] = *r.effect_size;
    if (r.degenerate) j["degenerate"] = true;
    return j.dump(2) + "\n";
}

}  // namespace conlab::stats
