#include <sstream>

#include "doctest.h"
#include "lpa3/config.hpp"

using namespace lpa3;

TEST_CASE("config file sets typed values") {
    RunConfig cfg;
    std::istringstream is(R"(# comment
[run]
seed = 12
out = /tmp/x

[train]
epochs = 7          ; trailing comment
tau_pct = 42.5
lpa3 = false
negative_term = targeted
negative_target = argmax

[model]
hidden = 32, 16
arch = conv

[attack]
sigma = 0.05
layers = 0,1
channel_norm = whole_layer

[data]
kind = idx
split_seed = 9
)");
    apply_config(cfg, is);
    CHECK(cfg.seed == 12);
    CHECK(cfg.out == "/tmp/x");
    CHECK(cfg.train.epochs == 7);
    CHECK(cfg.train.tau_pct == 42.5);
    CHECK(!cfg.train.lpa3);
    CHECK(cfg.train.negative_term == NegativeTerm::Targeted);
    CHECK(cfg.train.negative_target == NegativeTarget::Argmax);
    CHECK(cfg.train.model.hidden == std::vector<std::size_t>{32, 16});
    CHECK(cfg.train.model.arch == "conv");
    CHECK(cfg.train.attack.sigma == 0.05);
    CHECK(cfg.train.attack.perceptual.layers == std::vector<std::size_t>{0, 1});
    CHECK(cfg.train.attack.perceptual.norm == ChannelNorm::WholeLayer);
    CHECK(cfg.data.kind == "idx");
    CHECK(cfg.data.split.seed == 9);
}

TEST_CASE("unknown keys and sections fail fast") {
    RunConfig cfg;
    auto parse = [&](const std::string& text) {
        std::istringstream is(text);
        apply_config(cfg, is, "t.ini");
    };
    CHECK_THROWS_AS(parse("[train]\nsigma = 0.1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[trian]\nepochs = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("epochs = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nepochs\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nepochs = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nlearning_rate = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nlpa3 = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse("[attack]\nsigma = nan\n"), ConfigError);
    try {
        parse("[attack]\n\nsigmaa = 1\n");
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("t.ini:3") != std::string::npos);
    }
    CHECK_THROWS_AS(apply_assignment(cfg, "train.epochs"), ConfigError);
    CHECK_THROWS_AS(apply_assignment(cfg, "train.nope=1"), ConfigError);
    apply_assignment(cfg, "train.epochs=3");
    CHECK(cfg.train.epochs == 3);
}

TEST_CASE("dump and reparse reproduce every key") {
    RunConfig a;
    a.seed = 5;
    a.train.learning_rate = 0.1 + 0.2;
    a.train.model.hidden = {7};
    a.train.attack.perceptual.layers = {1};
    a.data.images = "img.gz";
    const std::string text = dump_config(a);
    RunConfig b;
    std::istringstream is(text);
    apply_config(b, is);
    for (const auto& f : config_fields()) CHECK_MESSAGE(f.get(a) == f.get(b), f.key);
    CHECK(dump_config(b) == text);
    CHECK(b.train.learning_rate == a.train.learning_rate);
}
