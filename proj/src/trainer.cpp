#include "lpa3/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "lpa3/rng.hpp"

namespace lpa3 {

namespace {

void require_images(const Tensor& x, const char* what) {
    if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected (B, C, H, W), got " + to_string(x.shape()));
}

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Tensor rows_of(const Tensor& x, std::span<const std::size_t> rows) {
    Shape shape = x.shape();
    const std::size_t item = x.size() / shape[0];
    shape[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * item);
    const auto src = x.data();
    for (std::size_t r : rows) out.insert(out.end(), src.begin() + r * item, src.begin() + (r + 1) * item);
    return Tensor(std::move(shape), std::move(out));
}

// Mean over rows of -sum_c target[b][c] * log_softmax(logits)[b][c].
Var soft_cross_entropy(Tape& tape, Var logits, const Tensor& targets) {
    Var t = tape.constant(targets);
    return ops::neg(ops::mean(ops::sum_last(ops::mul(t, ops::log_softmax(logits)))));
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
    Tensor t({labels.size(), classes});
    for (std::size_t b = 0; b < labels.size(); ++b) t[b * classes + labels[b]] = 1.0;
    return t;
}

}  // namespace

Tensor shift_image(const Tensor& x, long dx, long dy) {
    require_images(x, "shift_image");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(x.shape());
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t h = 0; h < H; ++h) {
            const long sh = static_cast<long>(h) - dy;
            if (sh < 0 || sh >= static_cast<long>(H)) continue;
            for (std::size_t w = 0; w < W; ++w) {
                const long sw = static_cast<long>(w) - dx;
                if (sw < 0 || sw >= static_cast<long>(W)) continue;
                out[(bc * H + h) * W + w] = x[(bc * H + static_cast<std::size_t>(sh)) * W + static_cast<std::size_t>(sw)];
            }
        }
    }
    return out;
}

Tensor flip_horizontal(const Tensor& x) {
    require_images(x, "flip_horizontal");
    const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2), W = x.dim(3);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t w = 0; w < W; ++w) out[r * W + w] = x[r * W + (W - 1 - w)];
    return out;
}

Tensor weak_augment(const Tensor& x, const WeakAugSpec& spec, std::uint64_t seed) {
    const bool geometric = spec.max_shift > 0 || spec.flip;
    if (spec.noise_std < 0.0 || !std::isfinite(spec.noise_std))
        throw std::invalid_argument("weak_augment: noise_std must be finite and >= 0");
    if (!geometric && spec.noise_std == 0.0) return x;
    if (geometric) {
        require_images(x, "weak_augment");
        if (spec.max_shift >= x.dim(2) || spec.max_shift >= x.dim(3))
            throw std::invalid_argument("weak_augment: max_shift " + std::to_string(spec.max_shift) +
                                        " is not smaller than the image extent");
    }
    if (x.rank() == 0 || x.size() == 0) return x;

    std::mt19937_64 rng(seed);
    const long s = static_cast<long>(spec.max_shift);
    std::uniform_int_distribution<long> shift(-s, s);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> noise(0.0, spec.noise_std > 0.0 ? spec.noise_std : 1.0);

    const std::size_t B = x.dim(0), item = x.size() / B;
    Shape one = x.shape();
    one[0] = 1;
    std::vector<double> out;
    out.reserve(x.size());
    for (std::size_t b = 0; b < B; ++b) {
        Tensor img(one, std::vector<double>(x.data().begin() + b * item, x.data().begin() + (b + 1) * item));
        if (geometric) {
            const long dx = s > 0 ? shift(rng) : 0;
            const long dy = s > 0 ? shift(rng) : 0;
            if (dx != 0 || dy != 0) img = shift_image(img, dx, dy);
            if (spec.flip && coin(rng)) img = flip_horizontal(img);
        }
        if (spec.noise_std > 0.0)
            for (auto& v : img.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
        out.insert(out.end(), img.data().begin(), img.data().end());
    }
    return Tensor(x.shape(), std::move(out));
}

Network build_network(const ModelSpec& spec, const Shape& item_shape, std::size_t classes, std::uint64_t seed) {
    if (item_shape.size() != 3) throw ShapeError("build_network: item shape must be (C, H, W)");
    if (spec.arch == "mlp") return Network::mlp(numel(item_shape), spec.hidden, classes, seed, spec.dualnorm);
    if (spec.arch == "conv")
        return Network::small_conv(item_shape[0], item_shape[1], item_shape[2], spec.conv_channels, classes, seed);
    throw std::invalid_argument("build_network: unknown arch '" + spec.arch + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) fail("conf_threshold must lie in [0, 1]");
    if (!(tau_pct >= 0.0 && tau_pct <= 100.0)) fail("tau_pct must lie in [0, 100]");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
    if (labeled_batch == 0 || unlabeled_batch == 0) fail("batch sizes must be > 0");
    if (!(gamma_c > 0.0 && gamma_c <= 1.0)) fail("gamma_c must lie in (0, 1]");
    if (tcs_every == 0) fail("tcs_every must be >= 1");
    if (refresh_every == 0) fail("refresh_every must be >= 1");
    if (pseudo_temperature < 0.0) fail("pseudo_temperature must be >= 0");
    for (double w : {w_supervised, w_pseudo, w_lpa3, w_negative})
        if (!std::isfinite(w) || w < 0.0) fail("loss weights must be finite and >= 0");
    if (negative_term == NegativeTerm::Subtract && !subtract_ack)
        fail("negative_term = subtract is unbounded below; set subtract_ack to use it");
    attack.validate();
}

Tensor to_input(const Network& net, const Tensor& images) {
    if (images.rank() == 0) throw ShapeError("to_input: empty tensor");
    Shape shape{images.dim(0)};
    shape.insert(shape.end(), net.input_shape().begin(), net.input_shape().end());
    return images.reshaped(std::move(shape));
}

double accuracy(const Network& net, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    constexpr std::size_t kChunk = 512;
    std::size_t correct = 0;
    std::vector<std::size_t> pos;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        pos.resize(std::min(kChunk, data.size() - start));
        std::iota(pos.begin(), pos.end(), start);
        const Tensor p = net.predict_proba(to_input(net, data.gather(pos)));
        const std::size_t C = p.dim(1);
        for (std::size_t i = 0; i < pos.size(); ++i)
            if (static_cast<std::int64_t>(argmax_row(p.data().subspan(i * C, C))) == data.labels[pos[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stream, std::size_t epoch,
                                     std::size_t pass) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = SeedSequence(seed).stream(stream, {epoch, pass});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

void refresh_tcs(TrainState& state, const Dataset& unlabeled, double gamma_c) {
    constexpr std::size_t kChunk = 512;
    const std::size_t C = state.net.num_classes();
    std::vector<std::size_t> pos;
    for (std::size_t start = 0; start < unlabeled.size(); start += kChunk) {
        pos.resize(std::min(kChunk, unlabeled.size() - start));
        std::iota(pos.begin(), pos.end(), start);
        const Tensor p = state.net.predict_proba(to_input(state.net, unlabeled.gather(pos)));
        for (std::size_t i = 0; i < pos.size(); ++i) {
            const std::uint64_t id = unlabeled.ids[pos[i]];
            auto it = state.tcs.find(id);
            if (it == state.tcs.end()) it = state.tcs.emplace(id, make_tcs_record(id, C)).first;
            it->second = tcs_update(it->second, p.data().subspan(i * C, C), gamma_c);
        }
    }
}

StepMetrics semi_supervised_step(TrainState& state, const ExampleBatch& labeled, const ExampleBatch& unlabeled,
                                 const TrainConfig& cfg) {
    StepMetrics m;
    Network& net = state.net;
    const SeedSequence seeds(cfg.seed);
    const std::uint64_t step = state.step++;
    const std::size_t C = net.num_classes();
    const std::size_t nl = labeled.ids.size();
    const std::size_t nu = unlabeled.ids.size();
    m.unlabeled = nu;
    if (nl > 0 && labeled.labels.size() != nl) throw ShapeError("semi_supervised_step: label count mismatch");

    // Pseudo-labels from a frozen clean pass.
    Tensor xu, targets, probs;
    std::vector<std::size_t> pseudo(nu);
    std::vector<bool> mask(nu, false);
    if (nu > 0) {
        xu = to_input(net, unlabeled.x);
        const Tensor logits = net.logits(xu);
        probs = net.predict_proba(xu);
        targets = sharpen(logits, Sharpening{cfg.pseudo_temperature});
        for (std::size_t b = 0; b < nu; ++b) {
            const auto row = probs.data().subspan(b * C, C);
            pseudo[b] = argmax_row(row);
            mask[b] = *std::max_element(row.begin(), row.end()) >= cfg.conf_threshold;
            m.masked += mask[b];
        }
    }

    // TCS selection within the batch.
    std::vector<std::size_t> sel;
    if (nu > 0 && (cfg.lpa3 || cfg.negative_term != NegativeTerm::Off)) {
        std::vector<TCSRecord> records;
        records.reserve(nu);
        for (std::size_t b = 0; b < nu; ++b) {
            auto it = state.tcs.find(unlabeled.ids[b]);
            if (it == state.tcs.end())
                throw std::out_of_range("semi_supervised_step: no TCS record for id " +
                                        std::to_string(unlabeled.ids[b]));
            records.push_back(it->second);
        }
        const auto chosen = select_low_tcs(records, cfg.tau_pct);
        const std::set<std::uint64_t> chosen_set(chosen.begin(), chosen.end());
        for (std::size_t b = 0; b < nu; ++b)
            if (chosen_set.count(unlabeled.ids[b])) sel.push_back(b);
    }
    m.selected = sel.size();

    // LP-A3 hard positives, cached per id for refresh_every epochs.
    Tensor x_aug, aug_targets;
    const bool use_aug = cfg.lpa3 && !sel.empty();
    if (use_aug) {
        std::vector<std::size_t> need;
        for (std::size_t b : sel) {
            auto it = state.cache.find(unlabeled.ids[b]);
            if (it == state.cache.end() || state.epoch - it->second.epoch >= cfg.refresh_every) need.push_back(b);
        }
        if (!need.empty()) {
            std::vector<std::size_t> y(need.size());
            for (std::size_t i = 0; i < need.size(); ++i) y[i] = pseudo[need[i]];
            const AttackResult r =
                fast_lagrangian_attack(net, rows_of(xu, need), y, cfg.attack, seeds.derive("attack", {step, 0}));
            const std::size_t item = net.input_size();
            for (std::size_t i = 0; i < need.size(); ++i) {
                CachedAugmentation c;
                c.epoch = state.epoch;
                c.x.assign(r.x.data().begin() + i * item, r.x.data().begin() + (i + 1) * item);
                c.lpips = r.samples[i].lpips;
                c.satisfied = r.samples[i].satisfied;
                state.cache[unlabeled.ids[need[i]]] = std::move(c);
            }
            m.generated = need.size();
        }
        Shape shape = xu.shape();
        shape[0] = sel.size();
        std::vector<double> buf;
        buf.reserve(numel(shape));
        aug_targets = Tensor({sel.size(), C});
        for (std::size_t i = 0; i < sel.size(); ++i) {
            const CachedAugmentation& c = state.cache.at(unlabeled.ids[sel[i]]);
            buf.insert(buf.end(), c.x.begin(), c.x.end());
            m.lpips_sum += c.lpips;
            m.satisfied += c.satisfied;
            if (!cfg.gate_lpa3 || mask[sel[i]])
                for (std::size_t k = 0; k < C; ++k) aug_targets[i * C + k] = targets[sel[i] * C + k];
        }
        x_aug = Tensor(std::move(shape), std::move(buf));
        m.augmented = sel.size();
    }

    // Hard negatives.
    Tensor x_neg, neg_targets;
    const bool use_neg = cfg.negative_term != NegativeTerm::Off && !sel.empty();
    if (use_neg) {
        x_neg = negative_attack(net, rows_of(xu, sel), cfg.attack, seeds.derive("attack", {step, 1})).x;
        if (cfg.negative_term == NegativeTerm::Targeted) {
            if (cfg.negative_target == NegativeTarget::Uniform) {
                neg_targets = Tensor({sel.size(), C}, 1.0 / static_cast<double>(C));
            } else {
                const Tensor pn = net.predict_proba(x_neg);
                std::vector<std::size_t> am(sel.size());
                for (std::size_t i = 0; i < sel.size(); ++i) am[i] = argmax_row(pn.data().subspan(i * C, C));
                neg_targets = one_hot(am, C);
            }
        } else {
            neg_targets = rows_of(targets, sel);
        }
    }

    if (nl == 0) {
        m.skipped_supervised = true;
        if (nu == 0) return m;
    }

    Tape tape;
    Var total;
    auto add_term = [&](Var term, double w) {
        Var t = ops::scale(term, w);
        total = total.valid() ? ops::add(total, t) : t;
    };
    try {
        Var sup, pse, aug, neg;
        if (nl > 0) {
            const Tensor xl = weak_augment(labeled.x, cfg.weak_aug, seeds.derive("noise", {step, 0}));
            std::vector<std::size_t> yl(nl);
            for (std::size_t b = 0; b < nl; ++b) {
                if (labeled.labels[b] < 0 || static_cast<std::size_t>(labeled.labels[b]) >= C)
                    throw std::out_of_range("semi_supervised_step: label out of range");
                yl[b] = static_cast<std::size_t>(labeled.labels[b]);
            }
            Var logits = net.forward_train(tape, tape.constant(to_input(net, xl)), StatsMode::Main, true).logits;
            sup = ops::neg(ops::mean(ops::pick(ops::log_softmax(logits), yl)));
            add_term(sup, cfg.w_supervised);
        }
        if (nu > 0) {
            const Tensor xw = weak_augment(unlabeled.x, cfg.weak_aug, seeds.derive("noise", {step, 1}));
            Tensor gated = targets;
            for (std::size_t b = 0; b < nu; ++b)
                if (!mask[b]) std::fill_n(gated.data().begin() + b * C, C, 0.0);
            Var logits = net.forward_train(tape, tape.constant(to_input(net, xw)), StatsMode::Main, true).logits;
            pse = soft_cross_entropy(tape, logits, gated);
            add_term(pse, cfg.w_pseudo);
        }
        if (use_aug) {
            Var logits = net.forward_train(tape, tape.constant(x_aug), StatsMode::Aug, true).logits;
            aug = soft_cross_entropy(tape, logits, aug_targets);
            add_term(aug, cfg.w_lpa3);
        }
        if (use_neg) {
            Var logits = net.forward_train(tape, tape.constant(x_neg), StatsMode::Aug, true).logits;
            neg = soft_cross_entropy(tape, logits, neg_targets);
            add_term(cfg.negative_term == NegativeTerm::Subtract ? ops::neg(neg) : neg, cfg.w_negative);
        }
        if (sup.valid()) m.supervised = sup.value().item();
        if (pse.valid()) m.pseudo = pse.value().item();
        if (aug.valid()) m.lpa3 = aug.value().item();
        if (neg.valid()) m.negative = neg.value().item();
        m.loss = total.value().item();
        if (!std::isfinite(m.loss)) throw NumericError("non-finite loss");

        auto params = net.parameters();
        for (Tensor* p : params) p->zero_grad();
        tape.backward(total);
        for (const Tensor* p : params)
            for (double g : p->grad())
                if (!std::isfinite(g)) throw NumericError("non-finite gradient");
    } catch (const NumericError& e) {
        std::cerr << "warning: step " << step << " aborted: " << e.what() << "\n";
        m.aborted = true;
        for (Tensor* p : net.parameters()) p->clear_grad();
        return m;
    }
    for (Tensor* p : net.parameters()) {
        auto v = p->data();
        auto g = p->grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.learning_rate * g[i];
        p->clear_grad();
    }
    return m;
}

namespace {

ExampleBatch make_batch(const Dataset& d, std::span<const std::size_t> positions) {
    ExampleBatch b;
    if (positions.empty()) return b;
    b.x = d.gather(positions);
    for (std::size_t p : positions) {
        b.labels.push_back(d.labels[p]);
        b.ids.push_back(d.ids[p]);
    }
    return b;
}

double pseudo_accuracy(const Network& net, const Dataset& unlabeled, const std::vector<std::int64_t>& hidden) {
    if (unlabeled.size() == 0 || hidden.size() != unlabeled.size()) return 0.0;
    Dataset d = unlabeled;
    d.labels = hidden;
    return accuracy(net, d);
}

double safe_div(double a, double b) { return b > 0.0 ? a / b : 0.0; }

}  // namespace

TrainResult train(const Splits& splits, const TrainConfig& cfg, const TrainOutput& out) {
    cfg.validate();
    const Dataset& L = splits.labeled;
    const Dataset& U = splits.unlabeled;
    const Shape item = L.size() > 0 ? L.item_shape : U.item_shape;
    const std::size_t classes = std::max(L.num_classes, U.num_classes);
    if (item.empty() || classes == 0) throw std::invalid_argument("train: no data");

    const SeedSequence seeds(cfg.seed);
    TrainState state{build_network(cfg.model, item, classes, seeds.derive("init")), {}, {}, 0, 0};
    for (std::uint64_t id : U.ids) state.tcs.emplace(id, make_tcs_record(id, classes));

    std::optional<MetricsWriter> writer;
    if (!out.dir.empty()) {
        std::filesystem::create_directories(out.dir);
        writer.emplace(out.dir / "metrics.jsonl");
    }

    std::vector<Json> epochs;
    const std::size_t nl = L.size(), nu = U.size();
    const std::size_t steps = nu > 0 ? (nu + cfg.unlabeled_batch - 1) / cfg.unlabeled_batch
                                     : (nl + cfg.labeled_batch - 1) / cfg.labeled_batch;
    bool warned = false;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        state.epoch = epoch;
        if (nu > 0 && epoch % cfg.tcs_every == 0) refresh_tcs(state, U, cfg.gamma_c);

        const auto u_order = epoch_order(nu, cfg.seed, "shuffle-unlabeled", epoch);
        std::size_t pass = 0, l_cursor = 0;
        auto l_order = epoch_order(nl, cfg.seed, "shuffle-labeled", epoch, pass);

        double loss = 0, sup = 0, pse = 0, aug = 0, neg = 0;
        std::size_t counted = 0, aborted = 0, unl = 0, selected = 0, masked = 0, augmented = 0, satisfied = 0;
        double lpips_sum = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<std::size_t> lp, up;
            if (nl > 0) {
                const std::size_t want = std::min(cfg.labeled_batch, nl);
                while (lp.size() < want) {
                    if (l_cursor == nl) {
                        l_order = epoch_order(nl, cfg.seed, "shuffle-labeled", epoch, ++pass);
                        l_cursor = 0;
                    }
                    lp.push_back(l_order[l_cursor++]);
                }
            }
            if (nu > 0) {
                const std::size_t begin = s * cfg.unlabeled_batch;
                const std::size_t end = std::min(nu, begin + cfg.unlabeled_batch);
                up.assign(u_order.begin() + begin, u_order.begin() + end);
            }
            const StepMetrics sm = semi_supervised_step(state, make_batch(L, lp), make_batch(U, up), cfg);
            if (sm.skipped_supervised && !warned) {
                std::cerr << "warning: empty labeled batch, supervised term skipped\n";
                warned = true;
            }
            if (sm.aborted) {
                ++aborted;
                continue;
            }
            ++counted;
            loss += sm.loss;
            sup += sm.supervised;
            pse += sm.pseudo;
            aug += sm.lpa3;
            neg += sm.negative;
            unl += sm.unlabeled;
            selected += sm.selected;
            masked += sm.masked;
            augmented += sm.augmented;
            satisfied += sm.satisfied;
            lpips_sum += sm.lpips_sum;
        }

        const double n = static_cast<double>(counted);
        const double sat = safe_div(static_cast<double>(satisfied), static_cast<double>(augmented));
        Json rec;
        rec["epoch"] = epoch + 1;
        rec["steps"] = steps;
        rec["loss"] = safe_div(loss, n);
        rec["supervised"] = safe_div(sup, n);
        rec["pseudo"] = safe_div(pse, n);
        rec["lpa3"] = safe_div(aug, n);
        rec["negative"] = safe_div(neg, n);
        rec["test_accuracy"] = accuracy(state.net, splits.test);
        rec["pseudo_accuracy"] = pseudo_accuracy(state.net, U, splits.hidden_labels);
        rec["mask_rate"] = safe_div(static_cast<double>(masked), static_cast<double>(unl));
        rec["selected_fraction"] = safe_div(static_cast<double>(selected), static_cast<double>(unl));
        rec["constraint_satisfaction"] = sat;
        rec["constraint_violation"] = augmented > 0 ? 1.0 - sat : 0.0;
        rec["mean_lpips"] = safe_div(lpips_sum, static_cast<double>(augmented));
        rec["aborted_steps"] = aborted;
        rec["cache_size"] = state.cache.size();
        epochs.push_back(rec);
        if (writer) writer->append(rec);

        if (!out.dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            state.net.save(out.dir / ("checkpoint-epoch" + std::to_string(epoch + 1) + ".bin"));
    }

    if (!out.dir.empty()) {
        write_text(out.dir / "summary.csv", summary_csv(epochs, summary_columns()));
        state.net.save(out.dir / "final.bin");
    }
    Network net = state.net;
    return TrainResult{std::move(net), std::move(epochs), std::move(state)};
}

}  // namespace lpa3
