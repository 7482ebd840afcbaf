#pragma once

#include <span>
#include <vector>

namespace protoadapt::stats {

double mean(std::span<const double> x);

/// Population variance (divides by n).
double variance_population(std::span<const double> x);

/// Sample standard deviation (divides by n - 1); 0 for n < 2.
double stddev_sample(std::span<const double> x);

/// Linear interpolation between order statistics at position (n - 1) * p.
/// `sorted` must be ascending and non-empty; p in [0, 1].
double quantile_sorted(std::span<const double> sorted, double p);

/// Sorts a copy and applies quantile_sorted.
double quantile(std::span<const double> x, double p);

double median(std::span<const double> x);

/// 1-based ranks with ties receiving the average of the positions they span.
std::vector<double> average_ranks(std::span<const double> x);

/// Spearman rank correlation (Pearson on average ranks).
/// Throws ValidationError on length mismatch or n < 3 and NumericalError on a
/// constant input.
double spearman(std::span<const double> a, std::span<const double> b);

/// Area under the ROC curve via the Mann-Whitney rank statistic; ties count 1/2.
/// Labels are 0/1. Throws ValidationError when only one class is present.
double auc(std::span<const double> scores, std::span<const int> labels);

double normal_cdf(double z);
double normal_quantile(double p);

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

}  // namespace protoadapt::stats
