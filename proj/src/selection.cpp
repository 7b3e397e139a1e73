#include "lpa3/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lpa3/tensor.hpp"

namespace lpa3 {

namespace {

constexpr double kFloor = 1e-12;

std::size_t argmax(std::span<const double> p) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

TCSRecord make_tcs_record(std::uint64_t id, std::size_t classes) {
    if (classes == 0) throw std::invalid_argument("tcs record needs at least one class");
    return {id, 0.0, std::vector<double>(classes, 1.0 / static_cast<double>(classes)), kNoLabel, 0};
}

double tcs_inconsistency(std::span<const double> prev, std::span<const double> next, std::size_t label) {
    if (prev.size() != next.size()) throw ShapeError("tcs: prediction sizes differ");
    if (label >= prev.size()) throw std::out_of_range("tcs: label out of range");
    double kl = 0.0;
    for (std::size_t c = 0; c < prev.size(); ++c) {
        if (prev[c] <= 0.0) continue;
        kl += prev[c] * (std::log(std::max(prev[c], kFloor)) - std::log(std::max(next[c], kFloor)));
    }
    const double ratio = std::log(std::max(prev[label], kFloor)) - std::log(std::max(next[label], kFloor));
    return kl + std::abs(ratio);
}

TCSRecord tcs_update(const TCSRecord& record, std::span<const double> new_probs, double gamma_c,
                     std::optional<std::size_t> label) {
    if (!(gamma_c >= 0.0 && gamma_c <= 1.0)) throw std::invalid_argument("tcs: gamma_c must lie in [0, 1]");
    if (new_probs.size() != record.prediction.size()) {
        throw ShapeError("tcs: expected " + std::to_string(record.prediction.size()) + " probabilities, got " +
                         std::to_string(new_probs.size()));
    }
    const std::size_t hard = label.value_or(argmax(new_probs));
    if (hard >= new_probs.size()) throw std::out_of_range("tcs: label out of range");
    const std::size_t y_prev = record.label == kNoLabel ? hard : static_cast<std::size_t>(record.label);
    const double a = tcs_inconsistency(record.prediction, new_probs, y_prev);

    TCSRecord out = record;
    out.c = gamma_c * (-a) + (1.0 - gamma_c) * record.c;
    out.prediction.assign(new_probs.begin(), new_probs.end());
    out.label = static_cast<std::int64_t>(hard);
    ++out.t;
    return out;
}

std::vector<std::uint64_t> select_low_tcs(std::span<const TCSRecord> records, double tau_pct) {
    if (records.empty()) throw std::invalid_argument("select_low_tcs: no records");
    if (!(tau_pct >= 0.0 && tau_pct <= 100.0)) throw std::invalid_argument("select_low_tcs: tau_pct must lie in [0, 100]");
    const auto k = static_cast<std::size_t>(std::floor(tau_pct / 100.0 * static_cast<double>(records.size()) + 1e-9));
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (records[a].c != records[b].c) return records[a].c < records[b].c;
                          return records[a].id < records[b].id;
                      });
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < k; ++i) ids.push_back(records[order[i]].id);
    return ids;
}

}  // namespace lpa3
