#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <regex>

#include "adclick/evaluation.hpp"
#include "adclick/metrics.hpp"
#include "adclick/segmode.hpp"
#include "adclick/trainer.hpp"
#include "toy.hpp"

using namespace adclick::training;

class Training : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new toy::TempDir("adclick-train");
        toy::Options o;
        o.defects_per_type = 8;
        world_ = new toy::World(toy::make_world(dir_->path(), o));
    }
    static void TearDownTestSuite() {
        delete world_;
        delete dir_;
    }
    static toy::TempDir* dir_;
    static toy::World* world_;
};
toy::TempDir* Training::dir_ = nullptr;
toy::World* Training::world_ = nullptr;

TEST_F(Training, ZeroAnomalyBatchGivesFinitePositiveLoss) {
    auto model = toy::tiny_model(network::Mode::Interactive, 1);
    const auto samples = toy::test_samples(*world_, "stripes");
    std::vector<const pipeline::LabeledSample*> good;
    std::vector<torch::Tensor> text;
    for (const auto& s : samples) {
        if (!s.defective) {
            good.push_back(&s);
            text.push_back(world_->text->canonical(s.key));
        }
    }
    ASSERT_FALSE(good.empty());
    auto batch = make_batch(good, text, std::vector<int>(good.size(), 0));
    EXPECT_EQ(batch.target.sum().item<float>(), 0.0f);
    auto out = model->forward(batch.inputs);
    TrainOptions opts;
    const auto loss = training_loss(model, out, batch, opts);
    const double nfl = loss.nfl.item<double>();
    EXPECT_TRUE(std::isfinite(loss.total.item<double>()));
    EXPECT_GT(nfl, 0.0);
    // Only background pixels: the loss is the focal term on 1 - p.
    torch::Tensor weights;
    const double background = network::normalized_focal_loss(out.probs, batch.target, 2.0, &weights).item<double>();
    EXPECT_NEAR(nfl, background, 1e-6);
}

TEST_F(Training, ShortRunLowersFixedBatchLossAndWritesArtifacts) {
    auto model = toy::tiny_model(network::Mode::Interactive, 2);
    const auto pool = toy::defect_samples(*world_);
    TrainOptions opts;
    opts.steps = 200;
    opts.batch_size = 4;
    opts.lr = 1e-4;
    opts.fixed_batch_every = 50;
    opts.click_radius = 2;
    opts.seed = 3;
    opts.log_path = (dir_->path() / "train.jsonl").string();
    opts.checkpoint_path = (dir_->path() / "m.pt").string();
    const auto report = train(model, pool, world_->text.get(), opts);
    ASSERT_EQ(report.steps.size(), 200u);
    ASSERT_GE(report.fixed_batch.size(), 2u);
    EXPECT_EQ(report.fixed_batch.front().step, 0);
    EXPECT_LT(report.fixed_batch.back().loss, report.fixed_batch.front().loss);
    for (const auto& s : report.steps) {
        EXPECT_TRUE(std::isfinite(s.loss));
        EXPECT_NEAR(s.loss, s.nfl + opts.lambda_language * s.aux, 1e-5 * std::max(1.0, s.loss));
        EXPECT_EQ(s.lr, opts.lr);
    }
    std::ifstream log(opts.log_path);
    std::string line;
    int steps = 0;
    bool start = false, end = false;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        if (j.value("event", "") == "start") start = true;
        if (j.value("event", "") == "end") end = true;
        if (j.contains("loss")) {
            ++steps;
            EXPECT_TRUE(j.contains("step") && j.contains("nfl") && j.contains("aux") && j.contains("lr"));
        }
    }
    EXPECT_TRUE(start && end);
    EXPECT_EQ(steps, 200);
    const auto loaded = network::load_checkpoint(opts.checkpoint_path);
    EXPECT_EQ(loaded.step, 200);
}

TEST_F(Training, NonFiniteInputIsReportedAsDivergence) {
    auto model = toy::tiny_model(network::Mode::Interactive, 4);
    auto pool = toy::defect_samples(*world_);
    for (auto& s : pool) s.posfar = torch::full_like(s.posfar, NAN);
    TrainOptions opts;
    opts.steps = 3;
    opts.batch_size = 2;
    opts.fixed_batch_every = 0;
    try {
        train(model, pool, world_->text.get(), opts);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Divergence);
    }
}

TEST_F(Training, SegToyRunLocalizesAnomalies) {
    auto model = toy::tiny_model(network::Mode::Seg, 5);
    std::vector<datasets::DatasetIndex> train_idx;
    for (const auto& cat : pipeline::list_categories(world_->source)) {
        train_idx.push_back(pipeline::load_split(world_->source, cat, datasets::Split::Train));
    }
    segmode::SyntheticOptions syn;
    syn.count = 160;
    syn.seed = 6;
    const auto pool = segmode::synthetic_pool(train_idx, *world_->residuals, world_->text->corpus(), syn);
    TrainOptions opts;
    opts.steps = 400;
    opts.batch_size = 8;
    opts.lr = 1e-4;
    opts.fixed_batch_every = 0;
    opts.seed = 7;
    train(model, pool, world_->text.get(), opts);

    std::vector<evaluation::AdCategory> cats;
    for (const auto& cat : pipeline::list_categories(world_->source)) {
        cats.push_back({cat, toy::test_samples(*world_, cat), segmode::defect_types_for(world_->text->corpus(), cat)});
    }
    evaluation::AdOptions ad;
    ad.maps_dir = (dir_->path() / "maps").string();
    const auto report = evaluate_ad(model, cats, world_->text.get(), ad);
    EXPECT_GT(report.mean.pixel.pixel_auroc, 0.9);
    EXPECT_EQ(report.rows.size(), 2u);
    const auto md = report.markdown();
    EXPECT_EQ(md.substr(0, md.find('\n')), "| Category | AP | PRO | P-AUROC | I-AUROC |");
    EXPECT_TRUE(std::filesystem::exists(ad.maps_dir));
}

TEST(Reports, IisTableColumnsAndPercentFormatting) {
    evaluation::IisReport r;
    evaluation::IisRow row;
    row.name = "toy";
    for (int b : r.options.budgets) row.budgets.push_back({b, {0.961, 0.983, 0.997}, 0.811});
    row.noc = 5.6;
    r.rows = {row};
    r.mean = row;
    r.mean.name = "mean";
    const auto md = r.markdown();
    const auto header = md.substr(0, md.find('\n'));
    EXPECT_EQ(header,
              "| Category | AP@2 | PRO@2 | P-AUROC@2 | mIoU@2 | AP@3 | PRO@3 | P-AUROC@3 | mIoU@3 | AP@5 | PRO@5 | "
              "P-AUROC@5 | mIoU@5 | NoC80 |");
    EXPECT_NE(md.find("| toy | 96.1 | 98.3 | 99.7 | 81.1 |"), std::string::npos);
    EXPECT_NE(md.find("| 5.6 |"), std::string::npos);
    EXPECT_EQ(evaluation::percent(NAN), "-");
    EXPECT_EQ(evaluation::percent(0.8), "80.0");
}

TEST(Reports, PixelMetricsReportUndefinedAsNan) {
    std::vector<ScoreMap> maps{ScoreMap(4, 4, 0.3f)};
    std::vector<BinaryMask> masks{BinaryMask(4, 4, 0)};
    const auto m = evaluation::pixel_metrics(maps, masks, 0.3);
    EXPECT_TRUE(std::isnan(m.ap));
    EXPECT_TRUE(std::isnan(m.pro));
    EXPECT_TRUE(std::isnan(m.pixel_auroc));
}
