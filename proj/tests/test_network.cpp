#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include "adclick/network.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace adclick::network;

namespace {

ForwardInputs random_inputs(const ModelConfig& c, int batch, int size, bool with_text = true) {
    ForwardInputs in;
    in.image = torch::randn({batch, 3, size, size});
    in.click_maps = torch::zeros({batch, 3, size, size});
    in.click_maps.narrow(1, 0, 1).narrow(2, size / 2 - 2, 4).narrow(3, size / 2 - 2, 4).fill_(1.0);
    in.posfar = torch::rand({batch, c.d_f, size / c.residual_stride, size / c.residual_stride});
    if (with_text) {
        in.text = torch::randn({batch, 5, c.text_dim});
        in.text_mask = torch::ones({batch, 5}, torch::kBool);
    }
    return in;
}

void expect_bit_identical(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].sizes(), b[i].sizes());
        EXPECT_TRUE(torch::equal(a[i], b[i])) << "scale " << i;
    }
}

std::filesystem::path golden_path() { return std::filesystem::path(ADCLICK_TEST_DATA_DIR) / "golden_tiny_forward.json"; }

nlohmann::json golden_values() {
    nlohmann::json out;
    for (auto mode : {Mode::Interactive, Mode::Seg}) {
        torch::manual_seed(1234);
        AdClickModel model(ModelConfig::tiny(mode));
        {
            torch::NoGradGuard g;
            // Non-zero fusion weights so both branches reach the output.
            for (auto& zc : *model->zero_convs) {
                for (auto& p : zc->parameters()) p.normal_(0.0, 0.05);
            }
        }
        model->eval();
        auto in = random_inputs(model->config, 1, 64);
        torch::NoGradGuard g;
        auto probs = model->forward(in).probs.flatten();
        std::vector<double> sample;
        for (std::int64_t i = 0; i < probs.numel(); i += 97) sample.push_back(probs[i].item<double>());
        out[to_string(mode)] = sample;
    }
    return out;
}

}  // namespace

TEST(FocalLoss, GammaZeroEqualsMeanCrossEntropy) {
    torch::manual_seed(1);
    auto p = torch::rand({2, 1, 8, 8}, torch::kFloat64) * 0.98 + 0.01;
    auto y = (torch::rand({2, 1, 8, 8}, torch::kFloat64) > 0.7).to(torch::kFloat64);
    const double got = normalized_focal_loss(p, y, 0.0).item<double>();
    const double bce = torch::binary_cross_entropy(p, y).item<double>();
    EXPECT_NEAR(got, bce, 1e-9);
}

TEST(FocalLoss, GammaTwoMatchesScalarOracle) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> p(64), y(64);
        for (int i = 0; i < 64; ++i) {
            p[i] = u(rng);
            y[i] = u(rng) > 0.6 ? 1.0 : 0.0;
        }
        auto tp = torch::tensor(p, torch::kFloat64).reshape({1, 1, 8, 8});
        auto ty = torch::tensor(y, torch::kFloat64).reshape({1, 1, 8, 8});
        torch::Tensor weights;
        const double got = normalized_focal_loss(tp, ty, 2.0, &weights).item<double>();
        EXPECT_NEAR(got, oracle::nfl(p, y, 2.0), 1e-7);
        EXPECT_NEAR(weights.sum().item<double>(), 1.0, 1e-6);
    }
}

TEST(FocalLoss, WeightsSumToOneInFloat) {
    torch::manual_seed(3);
    auto p = torch::rand({4, 1, 32, 32});
    auto y = (torch::rand({4, 1, 32, 32}) > 0.9).to(torch::kFloat32);
    torch::Tensor w;
    normalized_focal_loss(p, y, 2.0, &w);
    EXPECT_NEAR(w.sum().item<double>(), 1.0, 1e-6);
}

TEST(FocalLoss, PerfectPredictionGoesToZero) {
    auto y = torch::zeros({1, 1, 4, 4});
    y[0][0][1][1] = 1.0;
    auto p = y * (1 - 1e-7) + (1 - y) * 1e-7;
    EXPECT_LT(normalized_focal_loss(p, y, 2.0).item<double>(), 1e-5);
    try {
        normalized_focal_loss(p, torch::zeros({1, 1, 4, 5}), 2.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Model, ZeroInitInteractiveFusedEqualsImagePyramid) {
    auto model = toy::tiny_model(Mode::Interactive, 5);
    model->eval();
    torch::NoGradGuard g;
    auto in = random_inputs(model->config, 2, 64);
    auto out = model->forward(in);
    expect_bit_identical(out.pyramid.fused, out.pyramid.image);
    // Perturbing the residual input changes nothing downstream of the fusion.
    auto in2 = in;
    in2.posfar = in.posfar * 3.0 + 1.0;
    in2.text = torch::randn_like(in.text);
    auto out2 = model->forward(in2);
    expect_bit_identical(out2.pyramid.fused, out.pyramid.fused);
    EXPECT_TRUE(torch::equal(out2.probs, out.probs));
    EXPECT_EQ(out.pyramid.fused.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(out.pyramid.fused[i].size(2), 64 / model->config.scales[i]);
    }
}

TEST(Model, ZeroInitSegFusedEqualsResidualPyramid) {
    auto model = toy::tiny_model(Mode::Seg, 6);
    model->eval();
    torch::NoGradGuard g;
    auto in = random_inputs(model->config, 2, 64);
    in.click_maps.zero_();
    auto out = model->forward(in);
    expect_bit_identical(out.pyramid.fused, out.pyramid.residual);
    auto in2 = in;
    in2.image = torch::randn_like(in.image);
    expect_bit_identical(model->forward(in2).pyramid.fused, out.pyramid.fused);
}

TEST(Model, OutputShapeAndRange) {
    auto model = toy::tiny_model(Mode::Interactive, 7);
    model->eval();
    torch::NoGradGuard g;
    for (int size : {64, 96}) {
        auto out = model->forward(random_inputs(model->config, 1, size));
        EXPECT_EQ(out.probs.sizes(), (std::vector<std::int64_t>{1, 1, size, size}));
        EXPECT_GE(out.probs.min().item<float>(), 0.0f);
        EXPECT_LE(out.probs.max().item<float>(), 1.0f);
    }
}

TEST(Model, ShapeMismatchIsReported) {
    auto model = toy::tiny_model(Mode::Interactive, 7);
    torch::NoGradGuard g;
    auto in = random_inputs(model->config, 1, 64);
    in.posfar = torch::rand({1, model->config.d_f, 4, 4});
    try {
        model->forward(in);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Model, GoldenForwardIsReproducible) {
    const auto values = golden_values();
    if (const char* regen = std::getenv("ADCLICK_REGENERATE_GOLDEN"); regen && std::string(regen) == "1") {
        std::filesystem::create_directories(golden_path().parent_path());
        std::ofstream(golden_path()) << values.dump(1) << '\n';
        GTEST_SKIP() << "golden fixture regenerated";
    }
    std::ifstream in(golden_path());
    ASSERT_TRUE(in) << "missing " << golden_path() << " (run with ADCLICK_REGENERATE_GOLDEN=1)";
    const auto golden = nlohmann::json::parse(in);
    for (const auto& mode : {"interactive", "seg"}) {
        const auto want = golden.at(mode).get<std::vector<double>>();
        const auto got = values.at(mode).get<std::vector<double>>();
        ASSERT_EQ(want.size(), got.size());
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << mode << " " << i;
    }
}

TEST(Model, CheckpointRoundTripIsBitIdentical) {
    toy::TempDir dir("adclick-ckpt");
    auto model = toy::tiny_model(Mode::Interactive, 8);
    {
        torch::NoGradGuard g;
        for (auto& p : model->parameters()) p.add_(torch::randn_like(p) * 0.01);
    }
    model->eval();
    torch::manual_seed(9);
    auto in = random_inputs(model->config, 1, 64);
    torch::NoGradGuard g;
    auto before = model->forward(in).probs;
    save_checkpoint(model, 42, dir.path() / "m.pt");
    auto loaded = load_checkpoint(dir.path() / "m.pt");
    EXPECT_EQ(loaded.step, 42);
    EXPECT_EQ(loaded.config, model->config);
    EXPECT_FALSE(loaded.fingerprint.empty());
    loaded.model->eval();
    EXPECT_TRUE(torch::equal(loaded.model->forward(in).probs, before));

    auto other = ModelConfig::tiny(Mode::Interactive);
    other.d_f = 32;
    other.z_dim = 32;
    try {
        load_checkpoint(dir.path() / "m.pt", &other);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CheckpointMismatch);
    }
}

TEST(Model, EveryTrainableSubmoduleGetsGradientAfterOneStep) {
    auto model = toy::tiny_model(Mode::Interactive, 10);
    model->train();
    torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(1e-3));
    torch::manual_seed(11);
    auto in = random_inputs(model->config, 2, 64);
    auto target = torch::zeros({2, 1, 64, 64});
    target.narrow(2, 20, 16).narrow(3, 24, 12).fill_(1.0);
    for (int step = 0; step < 2; ++step) {
        opt.zero_grad();
        auto out = model->forward(in);
        normalized_focal_loss(out.probs, target, 2.0).backward();
        if (step == 0) opt.step();
    }
    for (auto& [name, module] : model->trainable_submodules()) {
        bool nonzero = false;
        for (auto& p : module->parameters()) {
            if (p.grad().defined() && p.grad().abs().sum().item<double>() > 0) nonzero = true;
        }
        EXPECT_TRUE(nonzero) << name;
    }
}

TEST(Config, ValidationAndJson) {
    auto c = ModelConfig::tiny(Mode::Seg);
    nlohmann::json j = c;
    EXPECT_EQ(j.get<ModelConfig>(), c);
    nlohmann::json preset = {{"preset", "tiny"}, {"mode", "seg"}, {"d_f", 32}, {"swin_heads", 4}};
    auto p = preset.get<ModelConfig>();
    EXPECT_EQ(p.d_f, 32);
    EXPECT_EQ(p.image_size, 64);
    auto bad = c;
    bad.scales = {4, 8};
    EXPECT_THROW(bad.validate(), Error);
    bad = c;
    bad.swin_blocks = 0;
    EXPECT_THROW(bad.validate(), Error);
    EXPECT_NO_THROW(ModelConfig::full().validate());
}

TEST(Inference, PredictMaskIsDeterministicAndBounded) {
    auto model = toy::tiny_model(Mode::Interactive, 12);
    model->eval();
    InferenceInputs in{torch::randn({3, 64, 64}), torch::rand({64, 8, 8}), torch::randn({4, 64})};
    std::vector<clicks::Click> cs{{30, 30, clicks::Polarity::Positive, 1}};
    auto prev = clicks::AnomalyMask::zeros(64, 64);
    auto a = predict_mask(model, in, cs, prev, 2, 0.5f);
    auto b = predict_mask(model, in, cs, prev, 2, 0.5f);
    EXPECT_EQ(a.scores, b.scores);
    for (float v : a.scores.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}
