#pragma once

#include <string>
#include <vector>

#include "faun/common.hpp"

namespace faun {

/// Log-uniform split of a sensor's noise-level range. Each subrange owns one
/// model; inference routes on the annotated `a` parameter.
struct SubrangePartition {
    double a_min = 0.0;
    double a_max = 0.0;
    int n = 0;
    std::vector<double> bounds;            // n+1, ascending, geometric steps
    std::vector<std::string> checkpoints;  // n entries once trained, else empty

    void validate() const;  // throws ConfigError
};

/// bounds[i] = exp(log a_min + (i/n)(log a_max - log a_min)); endpoints exact.
/// Requires 0 < a_min < a_max and n >= 1.
SubrangePartition partition(double a_min, double a_max, int n);

struct ModelChoice {
    int index = 0;
    bool clamped = false;  // a fell outside [a_min, a_max]
};

/// Interval i is [bounds[i], bounds[i+1]); the last one is closed. Values
/// outside the range clamp to the nearest end with `clamped` set — never
/// throws, so field data beyond calibration still routes somewhere sane.
ModelChoice select_model(double a, const SubrangePartition& p);

void save_array_manifest(const std::string& path, const SubrangePartition& p);
SubrangePartition load_array_manifest(const std::string& path);

}  // namespace faun
