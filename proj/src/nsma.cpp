#include "faun/nsma.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace faun {

using json = nlohmann::json;

void SubrangePartition::validate() const {
    if (n < 1) throw ConfigError("subrange partition: n must be >= 1");
    if (!(a_min > 0.0) || !(a_min < a_max))
        throw ConfigError("subrange partition: need 0 < a_min < a_max");
    if (bounds.size() != static_cast<std::size_t>(n) + 1)
        throw ConfigError("subrange partition: bounds must have n+1 entries");
    for (int i = 0; i < n; ++i)
        if (!(bounds[i] < bounds[i + 1]))
            throw ConfigError("subrange partition: bounds must be strictly increasing");
    if (!checkpoints.empty() && checkpoints.size() != static_cast<std::size_t>(n))
        throw ConfigError("subrange partition: need one checkpoint per subrange");
}

SubrangePartition partition(double a_min, double a_max, int n) {
    if (!(a_min > 0.0) || !(a_min < a_max))
        throw ConfigError("partition: need 0 < a_min < a_max");
    if (n < 1) throw ConfigError("partition: n must be >= 1");

    SubrangePartition p;
    p.a_min = a_min;
    p.a_max = a_max;
    p.n = n;
    p.bounds.resize(static_cast<std::size_t>(n) + 1);
    const double la = std::log(a_min), lb = std::log(a_max);
    for (int i = 1; i < n; ++i)
        p.bounds[i] = std::exp(la + (static_cast<double>(i) / n) * (lb - la));
    p.bounds[0] = a_min;
    p.bounds[n] = a_max;
    return p;
}

ModelChoice select_model(double a, const SubrangePartition& p) {
    p.validate();
    if (a < p.bounds.front()) return {0, true};
    if (a > p.bounds.back()) return {p.n - 1, true};
    if (a == p.bounds.back()) return {p.n - 1, false};
    auto it = std::upper_bound(p.bounds.begin(), p.bounds.end(), a);
    return {static_cast<int>(it - p.bounds.begin()) - 1, false};
}

void save_array_manifest(const std::string& path, const SubrangePartition& p) {
    p.validate();
    json j;
    j["a_min"] = p.a_min;
    j["a_max"] = p.a_max;
    j["n"] = p.n;
    j["bounds"] = p.bounds;
    j["checkpoints"] = p.checkpoints;
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << j.dump(2) << "\n";
}

SubrangePartition load_array_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("bad array manifest " + path + ": " + e.what());
    }
    SubrangePartition p;
    try {
        p.a_min = j.at("a_min").get<double>();
        p.a_max = j.at("a_max").get<double>();
        p.n = j.at("n").get<int>();
        p.bounds = j.at("bounds").get<std::vector<double>>();
        p.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw IoError("bad array manifest " + path + ": " + e.what());
    }
    p.validate();
    return p;
}

}  // namespace faun
