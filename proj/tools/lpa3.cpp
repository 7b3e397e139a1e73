// lpa3: train, augment, tcs-report and verify-theory subcommands.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "lpa3/config.hpp"
#include "lpa3/infotheory.hpp"
#include "lpa3/rng.hpp"

using namespace lpa3;

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> sets;
    std::map<std::string, std::string> keyed;  // --section.key values
    std::vector<std::pair<std::string, CLI::Option*>> options;
};

void add_common(CLI::App* app, CommonArgs& args, bool config_keys) {
    app->add_option("--config", args.config, "INI config file")->check(CLI::ExistingFile);
    app->add_option("--seed", args.seed, "training seed (overrides run.seed)");
    app->add_option("--out", args.out, "output directory (overrides run.out)");
    if (!config_keys) return;
    app->add_option("--set", args.sets, "section.key=value override, repeatable");
    auto* group = app->add_option_group("config keys", "overrides mirroring the config file");
    for (const auto& f : config_fields())
        args.options.emplace_back(f.key, group->add_option("--" + f.key, args.keyed[f.key], f.help));
}

RunConfig resolve(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config.empty()) apply_config_file(cfg, args.config);
    for (const auto& s : args.sets) apply_assignment(cfg, s);
    for (const auto& [key, opt] : args.options)
        if (opt->count() > 0) set_config_value(cfg, key, args.keyed.at(key));
    if (args.seed) cfg.seed = *args.seed;
    if (!args.out.empty()) cfg.out = args.out;
    cfg.train.seed = cfg.seed;
    return cfg;
}

std::filesystem::path prepare_out(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    return dir;
}

const Dataset& pick_split(const Splits& sp, const std::string& name) {
    if (name == "unlabeled") return sp.unlabeled;
    if (name == "labeled") return sp.labeled;
    if (name == "test") return sp.test;
    throw std::invalid_argument("unknown split '" + name + "'");
}

int run_train(const RunConfig& cfg) {
    const auto dir = prepare_out(cfg.out);
    write_text(dir / "config.ini", dump_config(cfg));
    const Splits sp = load_dataset(cfg.data);
    std::cerr << "labeled " << sp.labeled.size() << ", unlabeled " << sp.unlabeled.size() << ", test "
              << sp.test.size() << "\n";
    const auto result = train(sp, cfg.train, {dir});
    for (const auto& rec : result.epochs)
        std::cout << "epoch " << rec["epoch"] << " loss " << rec["loss"] << " test_accuracy " << rec["test_accuracy"]
                  << " constraint_satisfaction " << rec["constraint_satisfaction"] << "\n";
    std::cout << "wrote " << (dir / "metrics.jsonl").string() << "\n";
    return 0;
}

struct AugmentArgs {
    std::string checkpoint;
    std::string split = "unlabeled";
    std::size_t count = 0;
    std::string mode = "positive";
};

int run_augment(const RunConfig& cfg, const AugmentArgs& a) {
    const auto dir = prepare_out(cfg.out);
    const Network net = Network::load(a.checkpoint);
    const Splits sp = load_dataset(cfg.data);
    const Dataset& d = pick_split(sp, a.split);
    const std::size_t n = a.count == 0 ? d.size() : std::min(a.count, d.size());
    if (n == 0) throw std::invalid_argument("augment: split '" + a.split + "' is empty");
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    const Tensor x = to_input(net, d.gather(pos));
    const std::uint64_t seed = SeedSequence(cfg.seed).derive("attack");

    std::vector<std::size_t> y(n);
    AttackResult r;
    if (a.mode == "positive") {
        const Tensor p = net.predict_proba(x);
        const std::size_t C = net.num_classes();
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = p.data().subspan(i * C, C);
            y[i] = d.labels[i] >= 0 ? static_cast<std::size_t>(d.labels[i])
                                    : static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        }
        r = fast_lagrangian_attack(net, x, y, cfg.train.attack, seed);
    } else if (a.mode == "negative") {
        r = negative_attack(net, x, cfg.train.attack, seed);
        const Tensor p = net.predict_proba(x);
        const std::size_t C = net.num_classes();
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = p.data().subspan(i * C, C);
            y[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        }
    } else {
        throw std::invalid_argument("augment: mode must be positive or negative");
    }

    IdxArray images{0x0E, {n}, r.x.values()};
    images.dims.insert(images.dims.end(), d.item_shape.begin(), d.item_shape.end());
    write_idx(dir / "augmented-images.idx", images);
    IdxArray labels{0x08, {n}, {}};
    for (auto v : y) labels.values.push_back(static_cast<double>(v));
    write_idx(dir / "augmented-labels.idx", labels);

    MetricsWriter diag(dir / "diagnostics.jsonl");
    std::size_t ok = 0;
    double lp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = r.samples[i];
        Json rec;
        rec["id"] = d.ids[i];
        rec["y"] = y[i];
        rec["lpips"] = s.lpips;
        rec["slack"] = s.slack;
        rec["satisfied"] = s.satisfied;
        rec["iterations"] = s.iterations;
        diag.append(rec);
        ok += s.satisfied;
        lp += s.lpips;
    }
    std::cout << a.mode << " augmentations: " << n << ", satisfied " << ok << ", mean lpips "
              << lp / static_cast<double>(n) << "\n";
    return 0;
}

// checkpoint-epochN.bin files in epoch order.
std::vector<std::filesystem::path> checkpoint_sequence(const std::vector<std::string>& given) {
    std::vector<std::filesystem::path> out;
    for (const auto& g : given) {
        if (!std::filesystem::is_directory(g)) {
            out.emplace_back(g);
            continue;
        }
        static const std::regex re(R"(checkpoint-epoch(\d+)\.bin)");
        std::vector<std::pair<std::size_t, std::filesystem::path>> found;
        for (const auto& e : std::filesystem::directory_iterator(g)) {
            std::smatch m;
            const std::string name = e.path().filename().string();
            if (std::regex_match(name, m, re)) found.emplace_back(std::stoul(m[1]), e.path());
        }
        std::sort(found.begin(), found.end());
        for (auto& f : found) out.push_back(f.second);
    }
    if (out.empty()) throw std::invalid_argument("tcs-report: no checkpoints found");
    return out;
}

int run_tcs_report(const RunConfig& cfg, const std::vector<std::string>& checkpoints) {
    const auto dir = prepare_out(cfg.out);
    const Splits sp = load_dataset(cfg.data);
    const auto seq = checkpoint_sequence(checkpoints);
    TrainState state{Network::load(seq.front()), {}, {}, 0, 0};
    for (const auto& path : seq) {
        state.net = Network::load(path);
        refresh_tcs(state, sp.unlabeled, cfg.train.gamma_c);
    }
    std::vector<TCSRecord> records;
    for (const auto& [id, r] : state.tcs) records.push_back(r);
    const auto chosen = select_low_tcs(records, cfg.train.tau_pct);
    const std::set<std::uint64_t> sel(chosen.begin(), chosen.end());
    std::ostringstream os;
    os << "id,c,selected\n";
    for (const auto& r : records) os << r.id << "," << Json(r.c).dump() << "," << (sel.count(r.id) ? 1 : 0) << "\n";
    write_text(dir / "tcs.csv", os.str());
    std::cout << "replayed " << seq.size() << " checkpoints over " << records.size() << " samples; selected "
              << sel.size() << "; wrote " << (dir / "tcs.csv").string() << "\n";
    return 0;
}

struct Check {
    std::string name;
    double worst = 0.0;
    double tol = 1e-9;
    std::size_t cases = 0;
    bool ok() const { return worst <= tol; }
};

int run_verify_theory(std::uint64_t seed, std::size_t trials, const std::string& joint_path, const std::string& out) {
    std::mt19937_64 rng(SeedSequence(seed).derive("theory"));
    std::vector<Check> checks{{"chain rule H(A,B) = H(A) + H(B|A)"},
                              {"non-negativity of I and conditional I"},
                              {"decomposition X = d(Y, N) with N independent of Y"},
                              {"additive resampling: I(X';Y) = I(X;Y) and I(X';N) = 0"},
                              {"residual |I(X';X) - I(X';N) - I(X';Y)| on additive instances"},
                              {"symmetric augmentation keeps sufficiency"}};
    std::uniform_int_distribution<std::size_t> size(2, 6);
    for (std::size_t t = 0; t < trials; ++t) {
        const auto j = random_joint({{"A", size(rng)}, {"B", size(rng)}, {"C", size(rng)}}, rng, t % 3 == 0 ? 0.3 : 0.0);
        const double chain = std::abs(entropy(j, {"A", "B"}) - entropy(j, {"A"}) - conditional_entropy(j, {"B"}, {"A"}));
        checks[0].worst = std::max(checks[0].worst, chain);
        const double neg = std::max({0.0, -mutual_information(j, {"A"}, {"B"}), -conditional_mi(j, {"A"}, {"B"}, {"C"})});
        checks[1].worst = std::max(checks[1].worst, neg);

        const auto xy = random_joint({{"X", size(rng)}, {"Y", size(rng)}}, rng, 0.2);
        const auto dec = task_nuisance_decompose(xy);
        checks[2].worst = std::max({checks[2].worst, dec.mi_n_y, dec.h_x_given_yn, dec.marginal_error});

        const auto inst = make_additive_instance(std::min<std::size_t>(size(rng), 4), std::min<std::size_t>(size(rng), 4), rng);
        const auto rep = check_theorem_conditions(inst.joint);
        checks[3].worst = std::max({checks[3].worst, std::abs(rep.cond_a_slack), rep.epsilon});
        checks[4].worst = std::max(checks[4].worst, rep.residual);

        const auto sym = check_symmetric_sufficiency(random_symmetric_joint(size(rng), size(rng), rng));
        checks[5].worst = std::max(checks[5].worst, sym.mi_gap);
        for (auto& c : checks) ++c.cases;
    }

    bool all = true;
    std::ostringstream report;
    for (const auto& c : checks) {
        report << (c.ok() ? "PASS " : "FAIL ") << c.name << " (" << c.cases << " cases, worst " << c.worst << ")\n";
        all = all && c.ok();
    }

    if (!joint_path.empty()) {
        std::ifstream is(joint_path);
        if (!is) throw std::runtime_error("cannot open joint file " + joint_path);
        const auto j = read_joint_text(is);
        report << "joint " << joint_path << ":";
        for (const auto& v : j.variables()) report << " " << v.name << "[" << v.size << "]";
        report << "\n";
        for (const auto& v : j.variables()) report << "  H(" << v.name << ") = " << entropy(j, {v.name}) << "\n";
        if (j.has("X") && j.has("Y")) {
            report << "  I(X;Y) = " << mutual_information(j, {"X"}, {"Y"}) << "\n";
            const auto marg = j.marginal({"X", "Y"});
            const auto dec = task_nuisance_decompose(marg);
            report << "  decomposition: |N| = " << dec.nuisance_size << ", I(N;Y) = " << dec.mi_n_y
                   << ", H(X|Y,N) = " << dec.h_x_given_yn << ", marginal error = " << dec.marginal_error
                   << (dec.ok ? " (ok)" : " (FAILED)") << "\n";
            if (j.alphabet("X") <= kMaxSearchAlphabet) {
                const auto cert = search_min_sufficient(marg, j.alphabet("X"), 1e-9);
                report << "  minimal sufficient map: I(Z;X) = " << cert.best.i_zx << " over " << cert.enumerated
                       << " maps" << (cert.certified ? " (certified)" : "") << "\n";
            }
        }
        if (j.has("X") && j.has("Y") && j.has("N") && j.has("X'")) {
            const auto rep = check_theorem_conditions(j);
            report << "  I(X';Y) - I(X;Y) = " << rep.cond_a_slack << ", I(X';N) = " << rep.epsilon
                   << ", residual = " << rep.residual << (rep.assumption_holds ? "" : " (H(Y|X) > 0)") << "\n";
        }
    }
    std::cout << report.str();
    if (!out.empty()) write_text(prepare_out(out) / "theory.txt", report.str());
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LP-A3 hard positive augmentation for semi-supervised training"};
    app.require_subcommand(1);

    CommonArgs train_args, aug_args, tcs_args;
    auto* train_cmd = app.add_subcommand("train", "semi-supervised training run");
    add_common(train_cmd, train_args, true);

    AugmentArgs aug;
    auto* aug_cmd = app.add_subcommand("augment", "write LP-A3 (or negative) samples for a split");
    add_common(aug_cmd, aug_args, true);
    aug_cmd->add_option("--checkpoint", aug.checkpoint, "network checkpoint")->required()->check(CLI::ExistingFile);
    aug_cmd->add_option("--split", aug.split, "unlabeled | labeled | test");
    aug_cmd->add_option("--count", aug.count, "number of samples (0: all)");
    aug_cmd->add_option("--mode", aug.mode, "positive | negative");

    std::vector<std::string> checkpoints;
    auto* tcs_cmd = app.add_subcommand("tcs-report", "replay checkpoints and report TCS per unlabeled sample");
    add_common(tcs_cmd, tcs_args, true);
    tcs_cmd->add_option("--checkpoints", checkpoints, "checkpoint files or a run directory")->required();

    std::uint64_t theory_seed = 0;
    std::size_t trials = 200;
    std::string joint, theory_out;
    auto* theory_cmd = app.add_subcommand("verify-theory", "check the information identities on random instances");
    theory_cmd->add_option("--seed", theory_seed, "instance seed");
    theory_cmd->add_option("--trials", trials, "random instances per check");
    theory_cmd->add_option("--joint", joint, "optional joint table file")->check(CLI::ExistingFile);
    theory_cmd->add_option("--out", theory_out, "directory for theory.txt");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return run_train(resolve(train_args));
        if (*aug_cmd) return run_augment(resolve(aug_args), aug);
        if (*tcs_cmd) return run_tcs_report(resolve(tcs_args), checkpoints);
        if (*theory_cmd) return run_verify_theory(theory_seed, trials, joint, theory_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
