#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>

#include "adclick/image_io.hpp"
#include "adclick/server.hpp"
#include "adclick/session.hpp"
#include "toy.hpp"

using namespace adclick::session;
using clicks::Click;
using clicks::Polarity;

namespace {

network::AdClickModel active_model(std::uint64_t seed) {
    auto model = toy::tiny_model(network::Mode::Interactive, seed);
    torch::NoGradGuard g;
    for (auto& zc : *model->zero_convs) {
        for (auto& p : zc->parameters()) p.normal_(0.0, 0.1);
    }
    model->eval();
    return model;
}

std::vector<Click> script() {
    return {{20, 30, Polarity::Positive, 0}, {40, 12, Polarity::Negative, 0}, {33, 33, Polarity::Positive, 0}};
}

}  // namespace

class Sessions : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new toy::TempDir("adclick-session");
        world_ = new toy::World(toy::make_world(dir_->path() / "world"));
    }
    static void TearDownTestSuite() {
        delete world_;
        delete dir_;
    }
    void SetUp() override {
        out_ = std::make_unique<toy::TempDir>("adclick-out");
        ctx_ = toy::service_context(*world_, active_model(7), "fp-a", out_->path());
        mgr_ = std::make_unique<SessionManager>(ctx_);
    }
    std::string defective_image() const {
        for (const auto& e : ctx_->images.entries()) {
            if (e.mask_path) return e.id;
        }
        return {};
    }
    static toy::TempDir* dir_;
    static toy::World* world_;
    std::unique_ptr<toy::TempDir> out_;
    std::shared_ptr<ServiceContext> ctx_;
    std::unique_ptr<SessionManager> mgr_;
};
toy::TempDir* Sessions::dir_ = nullptr;
toy::World* Sessions::world_ = nullptr;

TEST_F(Sessions, TokensAreUniqueAndOpaque) {
    const auto image = defective_image();
    std::set<std::string> ids;
    for (int i = 0; i < 2000; ++i) {
        const auto id = mgr_->open(image, "", "");
        EXPECT_EQ(id.size(), 32u);
        EXPECT_EQ(id.find(image), std::string::npos);
        ids.insert(id);
    }
    EXPECT_EQ(ids.size(), 2000u);
    EXPECT_EQ(mgr_->size(), 2000u);
}

TEST_F(Sessions, OpenValidatesImageCategoryAndPrompt) {
    const auto image = defective_image();
    const auto category = ctx_->images.find(image).category;
    auto expect_code = [](auto&& fn, ErrorCode code) {
        try {
            fn();
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), code);
        }
    };
    expect_code([&] { mgr_->open("nope/test/x/000", "", ""); }, ErrorCode::UnknownImage);
    expect_code([&] { mgr_->open(image, category == "grain" ? "stripes" : "grain", ""); }, ErrorCode::InvalidArgument);
    expect_code([&] { mgr_->open(image, "", "stripes/nothing"); }, ErrorCode::UnknownPrompt);
    expect_code([&] { mgr_->view("deadbeef"); }, ErrorCode::UnknownSession);
    const auto id = mgr_->open(image, category, "");
    const auto v = mgr_->view(id);
    ASSERT_TRUE(v.prompt.key.has_value());
    EXPECT_EQ(v.prompt.key->object, category);
    EXPECT_FALSE(v.prompt.text.empty());
    EXPECT_TRUE(v.clicks.empty());
    EXPECT_EQ(v.mask.rows(), 64);
    for (auto x : v.mask.scores.values()) EXPECT_EQ(x, 0.0f);
    expect_code([&] { mgr_->submit_click(id, {64, 0, Polarity::Positive, 0}); }, ErrorCode::OutOfBounds);
    expect_code([&] { mgr_->undo(id); }, ErrorCode::InvalidArgument);
}

TEST_F(Sessions, InterleavedSessionsMatchSerialRuns) {
    const auto image = defective_image();
    const auto cs = script();
    std::vector<clicks::AnomalyMask> serial;
    {
        const auto id = mgr_->open(image, "", "");
        for (const auto& c : cs) serial.push_back(mgr_->submit_click(id, c).mask);
    }
    const auto a = mgr_->open(image, "", "");
    const auto b = mgr_->open(image, "", "");
    std::vector<clicks::AnomalyMask> ra, rb;
    std::thread ta([&] {
        for (const auto& c : cs) ra.push_back(mgr_->submit_click(a, c).mask);
    });
    std::thread tb([&] {
        for (const auto& c : cs) rb.push_back(mgr_->submit_click(b, c).mask);
    });
    ta.join();
    tb.join();
    for (std::size_t i = 0; i < cs.size(); ++i) {
        EXPECT_EQ(ra[i].scores, serial[i].scores);
        EXPECT_EQ(rb[i].scores, serial[i].scores);
    }
    EXPECT_EQ(mgr_->view(a).clicks.size(), 3u);
    EXPECT_EQ(mgr_->view(a).clicks[2].index, 3);
}

TEST_F(Sessions, UndoRestoresEarlierStateAndIsDeterministic) {
    const auto id = mgr_->open(defective_image(), "", "");
    const auto cs = script();
    const auto m1 = mgr_->submit_click(id, cs[0]);
    const auto m2 = mgr_->submit_click(id, cs[1]);
    EXPECT_EQ(m1.click_count, 1u);
    EXPECT_EQ(m2.click_count, 2u);
    ASSERT_TRUE(m1.iou.has_value());
    const auto back = mgr_->undo(id);
    EXPECT_EQ(back.scores, m1.mask.scores);
    EXPECT_EQ(mgr_->view(id).clicks.size(), 1u);
    const auto again = mgr_->submit_click(id, cs[1]);
    EXPECT_EQ(again.mask.scores, m2.mask.scores);
    mgr_->undo(id);
    mgr_->undo(id);
    const auto cleared = mgr_->view(id).mask;
    for (auto x : cleared.scores.values()) EXPECT_EQ(x, 0.0f);
}

TEST_F(Sessions, PromptChangesApplyToLaterClicks) {
    const auto image = defective_image();
    const auto id = mgr_->open(image, "", "");
    const auto category = ctx_->images.find(image).category;
    auto choice = mgr_->set_prompt(id, "a faint mark somewhere", true);
    EXPECT_FALSE(choice.key.has_value());
    EXPECT_EQ(mgr_->view(id).prompt.text, "a faint mark somewhere");
    const auto keys = ctx_->text->corpus().keys_for(category);
    ASSERT_FALSE(keys.empty());
    choice = mgr_->set_prompt(id, keys.back().str(), false);
    ASSERT_TRUE(choice.key.has_value());
    EXPECT_EQ(*choice.key, keys.back());
    EXPECT_THROW(mgr_->set_prompt(id, "", true), Error);
}

TEST_F(Sessions, ExportWritesMaskAndSidecarOnceThenFreezes) {
    const auto id = mgr_->open(defective_image(), "", "");
    try {
        mgr_->export_label(id);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ZeroClickExport);
    }
    for (const auto& c : script()) mgr_->submit_click(id, c);
    const auto final_mask = mgr_->view(id).mask.binarize();
    const auto path = mgr_->export_label(id);
    EXPECT_EQ(path.parent_path().filename(), "labels");
    EXPECT_EQ(io::load_mask(path), final_mask);
    auto sidecar = path;
    sidecar.replace_extension(".json");
    const auto record = read_label_record(sidecar);
    EXPECT_EQ(record.clicks.size(), 3u);
    EXPECT_EQ(record.model_fingerprint, "fp-a");
    EXPECT_EQ(record.session_id, id);
    EXPECT_EQ(record.mask_file, path.filename().string());
    EXPECT_EQ(record.click_radius, 2);

    const auto before = std::filesystem::last_write_time(path);
    EXPECT_EQ(mgr_->export_label(id), path);
    EXPECT_EQ(std::filesystem::last_write_time(path), before);
    EXPECT_EQ(mgr_->view(id).status, Status::Exported);
    for (auto op : {0, 1, 2}) {
        try {
            if (op == 0) mgr_->submit_click(id, script()[0]);
            if (op == 1) mgr_->undo(id);
            if (op == 2) mgr_->set_prompt(id, "x", true);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::ImmutableSession);
        }
    }
}

TEST_F(Sessions, UnwritableDestinationKeepsSessionActive) {
    const auto id = mgr_->open(defective_image(), "", "");
    mgr_->submit_click(id, script()[0]);
    std::ofstream(out_->path() / "blocked") << "file";
    try {
        mgr_->export_label(id, "blocked/inside");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
    try {
        mgr_->export_label(id, "../escape");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    }
    EXPECT_EQ(mgr_->view(id).status, Status::Active);
    mgr_->submit_click(id, script()[1]);
    const auto path = mgr_->export_label(id, "custom");
    EXPECT_EQ(path.parent_path().filename(), "custom");
}

TEST_F(Sessions, ReplayReproducesExportedMaskBitExactly) {
    const auto id = mgr_->open(defective_image(), "", "");
    for (const auto& c : script()) mgr_->submit_click(id, c);
    const auto expected = mgr_->view(id).mask;
    auto sidecar = mgr_->export_label(id);
    sidecar.replace_extension(".json");
    const auto record = read_label_record(sidecar);

    // A fresh context with an identically seeded model.
    auto fresh = toy::service_context(*world_, active_model(7), "fp-a", out_->path());
    const auto replayed = replay(*fresh, record);
    EXPECT_EQ(replayed.scores, expected.scores);
    EXPECT_EQ(replayed.binarize(), expected.binarize());

    auto other = toy::service_context(*world_, active_model(7), "fp-b", out_->path());
    try {
        replay(*other, record);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CheckpointMismatch);
    }
}

TEST_F(Sessions, IdleSessionsAreEvictedAndAbandonRemoves) {
    const auto a = mgr_->open(defective_image(), "", "");
    const auto b = mgr_->open(defective_image(), "", "");
    const auto now = std::chrono::steady_clock::now();
    EXPECT_EQ(mgr_->evict_idle(now), 0u);
    EXPECT_EQ(mgr_->evict_idle(now + ctx_->idle_timeout + std::chrono::seconds(1)), 2u);
    EXPECT_EQ(mgr_->size(), 0u);
    EXPECT_THROW(mgr_->view(a), Error);
    const auto c = mgr_->open(defective_image(), "", "");
    mgr_->abandon(c);
    EXPECT_EQ(mgr_->size(), 0u);
    EXPECT_THROW(mgr_->abandon(b), Error);
}

TEST_F(Sessions, MissingModelIsReported) {
    auto ctx = toy::service_context(*world_, network::AdClickModel(nullptr), "", out_->path());
    SessionManager mgr(ctx);
    try {
        mgr.open(defective_image(), "", "");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ModelNotLoaded);
    }
}

class Http : public Sessions {
protected:
    void SetUp() override {
        Sessions::SetUp();
        std::shared_ptr<SessionManager> shared(mgr_.release());
        service_ = std::make_unique<server::HttpService>(shared);
        port_ = service_->bind("127.0.0.1", 0);
        thread_ = std::thread([this] { service_->listen(); });
        service_->wait_until_ready();
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    }
    void TearDown() override {
        service_->stop();
        thread_.join();
    }
    nlohmann::json post(const std::string& path, const nlohmann::json& body, int expect) {
        auto res = client_->Post(path, body.dump(), "application/json");
        EXPECT_TRUE(res);
        if (!res) return {};
        EXPECT_EQ(res->status, expect) << path << " " << res->body;
        return nlohmann::json::parse(res->body);
    }
    nlohmann::json get(const std::string& path, int expect) {
        auto res = client_->Get(path);
        EXPECT_TRUE(res);
        if (!res) return {};
        EXPECT_EQ(res->status, expect) << path << " " << res->body;
        return nlohmann::json::parse(res->body);
    }
    std::unique_ptr<server::HttpService> service_;
    std::unique_ptr<httplib::Client> client_;
    std::thread thread_;
    int port_ = 0;
};

TEST_F(Http, HealthImagesAndPrompts) {
    const auto health = get("/api/health", 200);
    EXPECT_EQ(health["status"], "ok");
    EXPECT_EQ(health["model_loaded"], true);
    EXPECT_EQ(health["model_fingerprint"], "fp-a");
    const auto images = get("/api/images", 200)["images"];
    EXPECT_EQ(images.size(), ctx_->images.entries().size());
    for (const auto& e : images) {
        for (auto k : {"id", "category", "defect_type", "has_mask"}) EXPECT_TRUE(e.contains(k));
    }
    const auto prompts = get("/api/prompts?category=grain", 200)["prompts"];
    ASSERT_FALSE(prompts.empty());
    for (const auto& p : prompts) {
        EXPECT_EQ(p["object"], "grain");
        EXPECT_FALSE(p["phrases"].empty());
    }
    auto png = client_->Get("/api/image?id=" + images[0]["id"].get<std::string>());
    ASSERT_TRUE(png);
    EXPECT_EQ(png->status, 200);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(png->body.substr(1, 3), "PNG");
}

TEST_F(Http, SessionLifecycle) {
    const auto created = post("/api/sessions", {{"image_id", defective_image()}}, 201);
    const std::string id = created["session_id"];
    for (auto k : {"image_id", "category", "clicks", "click_count", "status", "exported_path", "prompt_key",
                   "prompt_text", "width", "height", "threshold", "foreground_pixels", "mask_png", "overlay_png"}) {
        EXPECT_TRUE(created.contains(k)) << k;
    }
    EXPECT_EQ(created["status"], "active");
    EXPECT_EQ(created["width"], 64);
    EXPECT_EQ(created["foreground_pixels"], 0);

    const auto clicked = post("/api/sessions/" + id + "/clicks", {{"x", 20}, {"y", 30}, {"positive", true}}, 200);
    EXPECT_EQ(clicked["click_count"], 1);
    EXPECT_TRUE(clicked["iou"].is_number());
    const auto mask = io::decode_mask_png(io::base64_decode(clicked["mask_png"].get<std::string>()));
    std::size_t fg = 0;
    for (auto v : mask.values()) fg += v ? 1 : 0;
    EXPECT_EQ(clicked["foreground_pixels"], fg);
    EXPECT_EQ(clicked["clicks"][0]["x"], 20);

    post("/api/sessions/" + id + "/clicks", {{"x", 40}, {"y", 12}, {"positive", false}}, 200);
    EXPECT_EQ(post("/api/sessions/" + id + "/undo", nlohmann::json::object(), 200)["click_count"], 1);
    EXPECT_EQ(get("/api/sessions/" + id + "/mask", 200)["mask_png"], clicked["mask_png"]);
    EXPECT_EQ(post("/api/sessions/" + id + "/prompt", {{"text", "a dent"}}, 200)["prompt_text"], "a dent");

    const auto exported = post("/api/sessions/" + id + "/export", nlohmann::json::object(), 200);
    EXPECT_EQ(exported["status"], "exported");
    EXPECT_TRUE(std::filesystem::exists(exported["path"].get<std::string>()));
    EXPECT_TRUE(std::filesystem::exists(exported["sidecar"].get<std::string>()));
    EXPECT_EQ(post("/api/sessions/" + id + "/export", nlohmann::json::object(), 200)["path"], exported["path"]);
    const auto summary = get("/api/sessions/" + id, 200);
    EXPECT_EQ(summary["status"], "exported");
    EXPECT_EQ(summary["exported_path"], exported["path"]);

    const auto frozen = post("/api/sessions/" + id + "/clicks", {{"x", 1}, {"y", 1}}, 409);
    EXPECT_EQ(frozen["error"], "immutable_session");
    EXPECT_TRUE(frozen.contains("message"));

    auto del = client_->Delete("/api/sessions/" + id);
    ASSERT_TRUE(del);
    EXPECT_EQ(del->status, 200);
    EXPECT_EQ(get("/api/sessions/" + id, 404)["error"], "unknown_session");
}

TEST_F(Http, ErrorStatuses) {
    EXPECT_EQ(post("/api/sessions", {{"image_id", "nope"}}, 404)["error"], "unknown_image");
    EXPECT_EQ(post("/api/sessions", nlohmann::json::object(), 400)["error"], "schema");
    auto bad = client_->Post("/api/sessions", "{not json", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
    const std::string id = post("/api/sessions", {{"image_id", defective_image()}}, 201)["session_id"];
    EXPECT_EQ(post("/api/sessions/" + id + "/export", nlohmann::json::object(), 409)["error"], "zero_click_export");
    EXPECT_EQ(post("/api/sessions/" + id + "/clicks", {{"x", 99}, {"y", 0}}, 400)["error"], "out_of_bounds");
    EXPECT_EQ(post("/api/sessions/" + id + "/clicks", {{"x", 1.5}, {"y", 0}}, 400)["error"], "schema");
    EXPECT_EQ(post("/api/sessions/" + id + "/prompt", {{"prompt_key", "grain/none"}}, 404)["error"], "unknown_prompt");
    EXPECT_EQ(server::http_status(ErrorCode::ModelNotLoaded), 503);
    EXPECT_EQ(server::http_status(ErrorCode::Io), 500);
}
