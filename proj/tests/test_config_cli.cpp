#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "adclick/app.hpp"
#include "adclick/config.hpp"
#include "adclick/session.hpp"
#include "toy.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct RunResult {
    int status;
    std::string out;
    std::string err;
};

RunResult cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int status = app::run(args, out, err);
    return {status, out.str(), err.str()};
}

RunResult binary(const std::string& args, const fs::path& dir) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("\"") + ADCLICK_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                            err.string() + "\"";
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

// Error code thrown by `fn`, or "none".
std::string code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return std::string(to_string(e.code()));
    }
    return "none";
}

}  // namespace

TEST(Config, DefaultsMaterializeAndValidate) {
    const auto cfg = config::materialize(config::default_tree(), "/base");
    EXPECT_EQ(cfg.model.mode, network::Mode::Interactive);
    EXPECT_EQ(cfg.seg.model.mode, network::Mode::Seg);
    EXPECT_EQ(cfg.train.click_radius, cfg.clicks.radius);
    EXPECT_EQ(cfg.iis.budgets, (std::vector<int>{2, 3, 5}));
    EXPECT_EQ(cfg.iis.max_clicks, 20);
    EXPECT_EQ(cfg.bank_path(), cfg.output_path() / "banks");
}

TEST(Config, PrecedenceFileThenEnvironmentThenOverrides) {
    toy::TempDir dir("adclick-cfg");
    std::ofstream(dir.path() / "c.json") << R"({"seed": 1, "train": {"steps": 5, "lr": 0.5}, "train_data": {"root": "d"}})";
    auto tree = config::read_tree(dir.path() / "c.json");
    config::apply_environment(tree, {"ADCLICK_SEED=2", "ADCLICK_TRAIN__STEPS=7", "ADCLICK_NOT_A_KEY=1", "HOME=/x"});
    EXPECT_EQ(tree["seed"], 2);
    EXPECT_EQ(tree["train"]["steps"], 7);
    EXPECT_EQ(tree["train"]["lr"], 0.5);
    config::apply_override(tree, "train.steps=9");
    config::apply_override(tree, "output_dir=out dir");
    const auto cfg = config::materialize(tree, dir.path());
    EXPECT_EQ(cfg.seed, 2u);
    EXPECT_EQ(cfg.train.steps, 9);
    EXPECT_EQ(cfg.train.seed, 2u);
    EXPECT_EQ(cfg.output_dir, "out dir");
    EXPECT_EQ(fs::path(cfg.train_data.root), dir.path() / "d");
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
    toy::TempDir dir("adclick-cfg");
    std::ofstream(dir.path() / "bad.json") << R"({"train": {"stepz": 5}})";
    EXPECT_EQ(code_of([&] { config::read_tree(dir.path() / "bad.json"); }), "schema");
    std::ofstream(dir.path() / "broken.json") << "{";
    EXPECT_EQ(code_of([&] { config::read_tree(dir.path() / "broken.json"); }), "schema");
    EXPECT_EQ(code_of([&] { config::read_tree(dir.path() / "missing.json"); }), "io");
    auto tree = config::default_tree();
    EXPECT_EQ(code_of([&] { config::apply_override(tree, "nope=1"); }), "invalid_argument");
    EXPECT_EQ(code_of([&] { config::apply_override(tree, "seed"); }), "invalid_argument");
    config::apply_override(tree, "clicks.threshold=1.5");
    EXPECT_EQ(code_of([&] { config::materialize(tree, "."); }), "schema");
    tree = config::default_tree();
    config::apply_override(tree, "model.mode=\"seg\"");
    EXPECT_EQ(code_of([&] { config::materialize(tree, "."); }), "schema");
}

TEST(Cli, ErrorLineEscapesQuotesAndNewlines) {
    EXPECT_EQ(app::error_line("io", "a \"b\"\nc\\d"), "error: code=io message=\"a \\\"b\\\"\\nc\\\\d\"");
}

TEST(Cli, UsageErrorsExitTwo) {
    auto r = cli({"frobnicate"});
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("error: code=usage message=\"unknown command 'frobnicate'\""), std::string::npos);
    EXPECT_NE(r.err.find("evaluate-iis"), std::string::npos);
    EXPECT_EQ(cli({}).status, 2);
    EXPECT_EQ(cli({"--clicks", "4", "evaluate-iis"}).status, 2);
    r = cli({"--help"});
    EXPECT_EQ(r.status, 0);
    EXPECT_NE(r.out.find("build-bank"), std::string::npos);
}

TEST(Cli, BinaryReportsUsageAndRuntimeErrors) {
    toy::TempDir dir("adclick-bin");
    auto r = binary("frobnicate", dir.path());
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("code=usage"), std::string::npos);
    std::ofstream(dir.path() / "bad.json") << R"({"bogus": 1})";
    r = binary("--config \"" + (dir.path() / "bad.json").string() + "\" build-bank", dir.path());
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.err.find("error: code=schema message=\"unknown config key 'bogus'\""), std::string::npos);
    r = binary("build-bank nope=1", dir.path());
    EXPECT_EQ(r.status, 1);
    EXPECT_EQ(r.err.rfind("error: code=invalid_argument", 0), 0u);
}

class Workflow : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new toy::TempDir("adclick-cli");
        const auto r = cli({"--output-dir", (dir_->path() / "ws").string(), "make-toy"});
        ASSERT_EQ(r.status, 0) << r.err;
    }
    static void TearDownTestSuite() { delete dir_; }
    static std::vector<std::string> base(const std::string& out) {
        return {"--config", (dir_->path() / "ws" / "config.json").string(), "--output-dir", (dir_->path() / out).string()};
    }
    static RunResult run(const std::string& out, std::vector<std::string> rest) {
        auto args = base(out);
        args.insert(args.end(), rest.begin(), rest.end());
        return cli(args);
    }
    static toy::TempDir* dir_;
};
toy::TempDir* Workflow::dir_ = nullptr;

TEST_F(Workflow, ToyWorkspaceLayout) {
    const auto ws = dir_->path() / "ws";
    for (auto p : {"data", "heldout", "prompts.json", "config.json"}) EXPECT_TRUE(fs::exists(ws / p)) << p;
    EXPECT_EQ(nlohmann::json::parse(slurp(ws / "config.json")), app::toy_config_tree());
}

TEST_F(Workflow, BuildBankIsByteIdenticalAcrossRuns) {
    auto a = run("bank-a", {"build-bank"});
    ASSERT_EQ(a.status, 0) << a.err;
    auto b = run("bank-b", {"build-bank"});
    ASSERT_EQ(b.status, 0) << b.err;
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir_->path() / "bank-a" / "banks")) {
        const auto other = dir_->path() / "bank-b" / "banks" / e.path().filename();
        ASSERT_TRUE(fs::exists(other));
        EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path();
        ++files;
    }
    EXPECT_EQ(files, 2);
    std::istringstream lines(a.out);
    std::string line;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["dim"], 64);
        EXPECT_EQ(j["grid"], nlohmann::json::array({8, 8}));
    }
}

TEST_F(Workflow, TrainEvaluateAndExport) {
    auto r = run("run", {"train", "train.steps=6", "train.fixed_batch_every=3"});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto summary = nlohmann::json::parse(r.out);
    EXPECT_EQ(summary["steps"], 6);
    const fs::path ckpt = summary["checkpoint"].get<std::string>();
    ASSERT_TRUE(fs::exists(ckpt));

    r = run("run", {"--clicks", "5", "evaluate-iis", "iis.max_clicks=6"});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "| Category | AP@5 | PRO@5 | P-AUROC@5 | mIoU@5 | NoC80 |");
    EXPECT_TRUE(fs::exists(dir_->path() / "run" / "iis_results.json"));
    const auto iis = nlohmann::json::parse(slurp(dir_->path() / "run" / "iis_results.json"));
    EXPECT_TRUE(iis.contains("rows"));

    r = run("run", {"train-seg", "seg.train.steps=4", "seg.synthetic.count=16"});
    ASSERT_EQ(r.status, 0) << r.err;
    r = run("run", {"evaluate-ad"});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "| Category | AP | PRO | P-AUROC | I-AUROC |");

    // Click log for a held-out image, replayed twice through `export`.
    session::ImageCatalog catalog;
    pipeline::DataSource heldout{(dir_->path() / "ws" / "heldout").string(), "mvtec", {}, 64};
    catalog.add_index(pipeline::load_split(heldout, "grain", datasets::Split::Test));
    std::string image;
    for (const auto& e : catalog.entries()) {
        if (e.mask_path) image = e.id;
    }
    session::LabelRecord rec;
    rec.image_id = image;
    rec.category = "grain";
    rec.clicks = {{10, 12, clicks::Polarity::Positive, 1}, {40, 44, clicks::Polarity::Negative, 2}};
    rec.threshold = 0.5f;
    rec.click_radius = 2;
    rec.model_fingerprint = network::load_checkpoint(ckpt).fingerprint;
    const auto log = dir_->path() / "log.json";
    std::ofstream(log) << session::to_json(rec).dump();
    for (auto dest : {"e1", "e2"}) {
        r = run("run", {"export", "--log", log.string(), "--destination", (dir_->path() / dest).string()});
        ASSERT_EQ(r.status, 0) << r.err;
    }
    std::string stem = image;
    std::replace(stem.begin(), stem.end(), '/', '_');
    EXPECT_EQ(slurp(dir_->path() / "e1" / (stem + ".png")), slurp(dir_->path() / "e2" / (stem + ".png")));
    const auto sidecar = session::read_label_record(dir_->path() / "e1" / (stem + ".json"));
    EXPECT_EQ(sidecar.clicks, rec.clicks);

    rec.model_fingerprint = "other";
    std::ofstream(log) << session::to_json(rec).dump();
    r = run("run", {"export", "--log", log.string()});
    EXPECT_EQ(r.status, 1);
    EXPECT_EQ(r.err.rfind("error: code=checkpoint_mismatch", 0), 0u);
    rec.clicks.clear();
    std::ofstream(log) << session::to_json(rec).dump();
    r = run("run", {"export", "--log", log.string()});
    EXPECT_EQ(r.status, 1);
}
