#pragma once

// Time-consistency score (TCS): a negative moving average of how much a
// sample's prediction changes between observations. Low TCS marks samples
// worth augmenting.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace lpa3 {

inline constexpr std::int64_t kNoLabel = -1;

struct TCSRecord {
    std::uint64_t id = 0;
    double c = 0.0;
    std::vector<double> prediction;  // last observed probabilities
    std::int64_t label = kNoLabel;   // last hard label (true or pseudo)
    std::uint64_t t = 0;             // observations so far
};

// Fresh record: c = 0, uniform prediction, no stored label.
TCSRecord make_tcs_record(std::uint64_t id, std::size_t classes);

// a = KL(prev || new) + |log(prev[y] / new[y])| with y the stored hard label
// (the new hard label on the first observation); probabilities floored at 1e-12.
double tcs_inconsistency(std::span<const double> prev, std::span<const double> next, std::size_t label);

// c <- gamma_c * (-a) + (1 - gamma_c) * c; then the stored prediction and
// hard label are replaced. `label` is the true label for labeled samples;
// when absent the argmax of new_probs is stored.
TCSRecord tcs_update(const TCSRecord& record, std::span<const double> new_probs, double gamma_c,
                     std::optional<std::size_t> label = std::nullopt);

// floor(tau_pct/100 * n) ids with the smallest c, ties by ascending id.
std::vector<std::uint64_t> select_low_tcs(std::span<const TCSRecord> records, double tau_pct);

}  // namespace lpa3
