#include "lpa3/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

#include "lpa3/metrics.hpp"

namespace lpa3 {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& value, const char* expected) {
    throw ConfigError("invalid value '" + value + "' (expected " + expected + ")");
}

double parse_double(const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(v, "a finite number");
    return out;
}

std::uint64_t parse_uint(const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(v, "a non-negative integer");
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(v, "true or false");
}

std::vector<std::size_t> parse_list(const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_uint(item));
    }
    return out;
}

template <class T>
std::string join(const std::vector<T>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

std::string fmt(double v) { return Json(v).dump(); }
std::string fmt(bool v) { return v ? "true" : "false"; }

using Fields = std::vector<ConfigField>;

template <class Ref>
void number(Fields& f, std::string key, std::string help, Ref ref) {
    f.push_back({std::move(key), std::move(help),
                 [ref](RunConfig& c, const std::string& v) { ref(c) = parse_double(v); },
                 [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); }});
}

template <class Ref>
void count(Fields& f, std::string key, std::string help, Ref ref) {
    f.push_back({std::move(key), std::move(help),
                 [ref](RunConfig& c, const std::string& v) {
                     ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(v));
                 },
                 [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }});
}

template <class Ref>
void flag(Fields& f, std::string key, std::string help, Ref ref) {
    f.push_back({std::move(key), std::move(help), [ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(v); },
                 [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); }});
}

template <class Ref>
void text(Fields& f, std::string key, std::string help, Ref ref) {
    f.push_back({std::move(key), std::move(help), [ref](RunConfig& c, const std::string& v) { ref(c) = v; },
                 [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c))); }});
}

Fields make_fields() {
    Fields f;
    count(f, "run.seed", "training seed (init, noise, shuffle, attack streams)", [](RunConfig& c) -> auto& { return c.seed; });
    f.push_back({"run.out", "output directory", [](RunConfig& c, const std::string& v) { c.out = v; },
                 [](const RunConfig& c) { return c.out.string(); }});

    auto T = [](RunConfig& c) -> TrainConfig& { return c.train; };
    number(f, "train.conf_threshold", "pseudo-label confidence gate", [T](RunConfig& c) -> auto& { return T(c).conf_threshold; });
    number(f, "train.tau_pct", "percent of each unlabeled batch augmented (lowest TCS)", [T](RunConfig& c) -> auto& { return T(c).tau_pct; });
    number(f, "train.learning_rate", "SGD step size", [T](RunConfig& c) -> auto& { return T(c).learning_rate; });
    count(f, "train.labeled_batch", "labeled batch size", [T](RunConfig& c) -> auto& { return T(c).labeled_batch; });
    count(f, "train.unlabeled_batch", "unlabeled batch size", [T](RunConfig& c) -> auto& { return T(c).unlabeled_batch; });
    count(f, "train.epochs", "passes over the unlabeled pool", [T](RunConfig& c) -> auto& { return T(c).epochs; });
    flag(f, "train.lpa3", "enable LP-A3 hard positives", [T](RunConfig& c) -> auto& { return T(c).lpa3; });
    flag(f, "train.gate_lpa3", "apply the confidence gate to the LP-A3 term", [T](RunConfig& c) -> auto& { return T(c).gate_lpa3; });
    f.push_back({"train.negative_term", "off | targeted | subtract",
                 [](RunConfig& c, const std::string& v) {
                     if (v == "off") c.train.negative_term = NegativeTerm::Off;
                     else if (v == "targeted") c.train.negative_term = NegativeTerm::Targeted;
                     else if (v == "subtract") c.train.negative_term = NegativeTerm::Subtract;
                     else bad_value(v, "off, targeted or subtract");
                 },
                 [](const RunConfig& c) -> std::string {
                     switch (c.train.negative_term) {
                         case NegativeTerm::Off: return "off";
                         case NegativeTerm::Targeted: return "targeted";
                         case NegativeTerm::Subtract: return "subtract";
                     }
                     return "off";
                 }});
    flag(f, "train.subtract_ack", "acknowledge the unbounded subtract mode", [T](RunConfig& c) -> auto& { return T(c).subtract_ack; });
    f.push_back({"train.negative_target", "uniform | argmax",
                 [](RunConfig& c, const std::string& v) {
                     if (v == "uniform") c.train.negative_target = NegativeTarget::Uniform;
                     else if (v == "argmax") c.train.negative_target = NegativeTarget::Argmax;
                     else bad_value(v, "uniform or argmax");
                 },
                 [](const RunConfig& c) -> std::string {
                     return c.train.negative_target == NegativeTarget::Uniform ? "uniform" : "argmax";
                 }});
    number(f, "train.pseudo_temperature", "0 for one-hot pseudo-labels", [T](RunConfig& c) -> auto& { return T(c).pseudo_temperature; });
    number(f, "train.w_supervised", "loss weight", [T](RunConfig& c) -> auto& { return T(c).w_supervised; });
    number(f, "train.w_pseudo", "loss weight", [T](RunConfig& c) -> auto& { return T(c).w_pseudo; });
    number(f, "train.w_lpa3", "loss weight", [T](RunConfig& c) -> auto& { return T(c).w_lpa3; });
    number(f, "train.w_negative", "loss weight", [T](RunConfig& c) -> auto& { return T(c).w_negative; });
    number(f, "train.gamma_c", "TCS averaging rate", [T](RunConfig& c) -> auto& { return T(c).gamma_c; });
    count(f, "train.tcs_every", "epochs between TCS refreshes", [T](RunConfig& c) -> auto& { return T(c).tcs_every; });
    count(f, "train.refresh_every", "epochs a cached augmentation is reused", [T](RunConfig& c) -> auto& { return T(c).refresh_every; });
    count(f, "train.checkpoint_every", "epochs between checkpoints (0: final only)", [T](RunConfig& c) -> auto& { return T(c).checkpoint_every; });

    text(f, "model.arch", "mlp | conv", [](RunConfig& c) -> auto& { return c.train.model.arch; });
    f.push_back({"model.hidden", "comma-separated hidden widths (mlp)",
                 [](RunConfig& c, const std::string& v) { c.train.model.hidden = parse_list(v); },
                 [](const RunConfig& c) { return join(c.train.model.hidden); }});
    flag(f, "model.dualnorm", "normalization layers with separate clean/augmented statistics", [](RunConfig& c) -> auto& { return c.train.model.dualnorm; });
    count(f, "model.conv_channels", "conv width", [](RunConfig& c) -> auto& { return c.train.model.conv_channels; });

    auto A = [](RunConfig& c) -> AttackParams& { return c.train.attack; };
    number(f, "attack.sigma", "allowed log-probability drop", [A](RunConfig& c) -> auto& { return A(c).sigma; });
    number(f, "attack.sigma_neg", "required KL shift for negatives", [A](RunConfig& c) -> auto& { return A(c).sigma_neg; });
    count(f, "attack.steps", "iterations T", [A](RunConfig& c) -> auto& { return A(c).steps; });
    number(f, "attack.epsilon", "step scale", [A](RunConfig& c) -> auto& { return A(c).epsilon; });
    number(f, "attack.noise_scale", "initial noise std", [A](RunConfig& c) -> auto& { return A(c).noise_scale; });
    number(f, "attack.fd_step", "slope probe length", [A](RunConfig& c) -> auto& { return A(c).fd_step; });
    number(f, "attack.lambda_min", "first multiplier", [A](RunConfig& c) -> auto& { return A(c).lambda_min; });
    number(f, "attack.lambda_max", "last multiplier", [A](RunConfig& c) -> auto& { return A(c).lambda_max; });
    number(f, "attack.pixel_min", "lower pixel bound", [A](RunConfig& c) -> auto& { return A(c).pixel_min; });
    number(f, "attack.pixel_max", "upper pixel bound", [A](RunConfig& c) -> auto& { return A(c).pixel_max; });
    number(f, "attack.eta", "adaptive epsilon increment", [A](RunConfig& c) -> auto& { return A(c).eta; });
    number(f, "attack.epsilon_max", "adaptive epsilon cap", [A](RunConfig& c) -> auto& { return A(c).epsilon_max; });
    flag(f, "attack.literal_update", "update from x each step instead of the running point", [A](RunConfig& c) -> auto& { return A(c).literal_update; });
    f.push_back({"attack.channel_norm", "per_position | whole_layer",
                 [](RunConfig& c, const std::string& v) {
                     if (v == "per_position") c.train.attack.perceptual.norm = ChannelNorm::PerPosition;
                     else if (v == "whole_layer") c.train.attack.perceptual.norm = ChannelNorm::WholeLayer;
                     else bad_value(v, "per_position or whole_layer");
                 },
                 [](const RunConfig& c) -> std::string {
                     return c.train.attack.perceptual.norm == ChannelNorm::PerPosition ? "per_position" : "whole_layer";
                 }});
    f.push_back({"attack.layers", "relu activations used by the distance (empty: all)",
                 [](RunConfig& c, const std::string& v) { c.train.attack.perceptual.layers = parse_list(v); },
                 [](const RunConfig& c) { return join(c.train.attack.perceptual.layers); }});

    count(f, "weak_aug.max_shift", "shift range in pixels", [](RunConfig& c) -> auto& { return c.train.weak_aug.max_shift; });
    flag(f, "weak_aug.flip", "random horizontal flip", [](RunConfig& c) -> auto& { return c.train.weak_aug.flip; });
    number(f, "weak_aug.noise_std", "additive Gaussian noise", [](RunConfig& c) -> auto& { return c.train.weak_aug.noise_std; });

    text(f, "data.kind", "synthetic | idx", [](RunConfig& c) -> auto& { return c.data.kind; });
    f.push_back({"data.images", "IDX image file", [](RunConfig& c, const std::string& v) { c.data.images = v; },
                 [](const RunConfig& c) { return c.data.images.string(); }});
    f.push_back({"data.labels", "IDX label file", [](RunConfig& c, const std::string& v) { c.data.labels = v; },
                 [](const RunConfig& c) { return c.data.labels.string(); }});
    count(f, "data.synthetic_n", "synthetic sample count", [](RunConfig& c) -> auto& { return c.data.synthetic.n; });
    count(f, "data.synthetic_seed", "synthetic generator seed", [](RunConfig& c) -> auto& { return c.data.synthetic.seed; });
    number(f, "data.max_background", "synthetic nuisance range", [](RunConfig& c) -> auto& { return c.data.synthetic.max_background; });
    number(f, "data.noise_std", "synthetic pixel noise", [](RunConfig& c) -> auto& { return c.data.synthetic.noise_std; });
    count(f, "data.pool", "labeled + unlabeled size", [](RunConfig& c) -> auto& { return c.data.split.pool; });
    count(f, "data.labeled", "label budget", [](RunConfig& c) -> auto& { return c.data.split.labeled; });
    count(f, "data.test", "test size", [](RunConfig& c) -> auto& { return c.data.split.test; });
    count(f, "data.split_seed", "split shuffle seed", [](RunConfig& c) -> auto& { return c.data.split.seed; });
    return f;
}

const ConfigField& find_field(std::string_view key) {
    const auto& fields = config_fields();
    auto it = std::find_if(fields.begin(), fields.end(), [&](const ConfigField& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
    return *it;
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
    static const Fields fields = make_fields();
    return fields;
}

void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value) {
    const ConfigField& f = find_field(key);
    try {
        f.set(cfg, trim(value));
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(key) + ": " + e.what());
    }
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) { return find_field(key).get(cfg); }

void apply_config(RunConfig& cfg, std::istream& is, const std::string& origin) {
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto where = origin + ":" + std::to_string(lineno) + ": ";
        const auto hash = line.find_first_of("#;");
        const std::string s = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(where + "malformed section header");
            section = trim(std::string_view(s).substr(1, s.size() - 2));
            const auto& fields = config_fields();
            const bool known = std::any_of(fields.begin(), fields.end(),
                                           [&](const ConfigField& f) { return f.key.rfind(section + ".", 0) == 0; });
            if (!known) throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside a section");
        try {
            set_config_value(cfg, section + "." + trim(std::string_view(s).substr(0, eq)), s.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path.string());
    apply_config(cfg, is, path.string());
}

void apply_assignment(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + assignment + "'");
    set_config_value(cfg, trim(std::string_view(assignment).substr(0, eq)), assignment.substr(eq + 1));
}

std::string dump_config(const RunConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const auto& f : config_fields()) {
        const auto dot = f.key.find('.');
        const std::string sec = f.key.substr(0, dot);
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
            section = sec;
        }
        os << f.key.substr(dot + 1) << " = " << f.get(cfg) << "\n";
    }
    return os.str();
}

}  // namespace lpa3
