#include "adclick/app.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "adclick/evaluation.hpp"
#include "adclick/image_io.hpp"
#include "adclick/metrics.hpp"
#include "adclick/server.hpp"
#include "adclick/session.hpp"

namespace fs = std::filesystem;

namespace adclick::app {

std::string error_line(const std::string& code, const std::string& message) {
    std::string escaped;
    for (char c : message) {
        switch (c) {
            case '"': escaped += "\\\""; break;
            case '\\': escaped += "\\\\"; break;
            case '\n': escaped += "\\n"; break;
            case '\r': break;
            default: escaped += c;
        }
    }
    return "error: code=" + code + " message=\"" + escaped + "\"";
}

nlohmann::json toy_config_tree() {
    nlohmann::json train = {{"steps", 600}, {"batch_size", 8}, {"lr", 1e-4}, {"fixed_batch_every", 1}};
    return {{"train_data", {{"root", "data"}, {"layout", "mvtec"}, {"image_size", 64}}},
            {"eval_data", {{"root", "heldout"}, {"layout", "mvtec"}, {"image_size", 64}}},
            {"prompts", "prompts.json"},
            {"text_encoder", {{"kind", "hashing"}, {"dim", 64}}},
            {"extractor", {{"kind", "conv"}, {"input_size", 64}, {"stride", 8}, {"dim", 64}, {"width", 16}}},
            {"model", {{"preset", "tiny"}, {"mode", "interactive"}}},
            {"train", train},
            {"seg", {{"model", {{"preset", "tiny"}, {"mode", "seg"}}}, {"train", train}, {"synthetic", {{"count", 240}}}}},
            {"clicks", {{"radius", 2}, {"threshold", 0.5}}},
            {"output_dir", "runs/toy"}};
}

void make_toy_workspace(const fs::path& dir, std::uint64_t seed) {
    datasets::ToyOptions train;
    train.seed = seed;
    train.test_defect_per_type = 40;
    datasets::ToyOptions heldout;
    heldout.seed = seed + 1;
    heldout.test_defect_per_type = 10;
    datasets::make_toy_dataset(dir / "data", train);
    datasets::make_toy_dataset(dir / "heldout", heldout);
    datasets::save_prompt_corpus(datasets::make_toy_corpus(train), dir / "prompts.json");
    std::ofstream out(dir / "config.json");
    out << toy_config_tree().dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / "config.json").string());
}

namespace {

struct Flags {
    std::string config;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    std::string device;
    std::string checkpoint;
    int clicks = 0;
    std::optional<int> port;
    std::vector<std::string> overrides;
    std::string log;
    std::string destination;
};

config::AppConfig load_config(const Flags& f) {
    nlohmann::json tree = nlohmann::json::object();
    fs::path base = fs::current_path();
    if (!f.config.empty()) {
        tree = config::read_tree(f.config);
        base = fs::absolute(f.config).parent_path();
    }
    config::apply_environment(tree, config::process_environment());
    for (const auto& o : f.overrides) config::apply_override(tree, o);
    if (!f.output_dir.empty()) tree["output_dir"] = f.output_dir;
    if (f.seed) tree["seed"] = *f.seed;
    if (!f.device.empty()) tree["device"] = f.device;
    if (!f.checkpoint.empty()) tree["checkpoint"] = f.checkpoint;
    if (f.port) tree["server"]["port"] = *f.port;
    auto cfg = config::materialize(tree, base);
    if (f.clicks) cfg.iis.budgets = {f.clicks};
    return cfg;
}

torch::Device parse_device(const std::string& name) {
    try {
        torch::Device device(name);
        if (device.is_cuda() && !torch::cuda::is_available()) {
            throw Error(ErrorCode::InvalidArgument, "device '" + name + "' requested but CUDA is not available");
        }
        return device;
    } catch (const c10::Error&) {
        throw Error(ErrorCode::InvalidArgument, "unknown device '" + name + "'");
    }
}

struct Runtime {
    config::AppConfig cfg;
    torch::Device device = torch::kCPU;
    std::shared_ptr<pipeline::ResidualContext> residuals;
    std::shared_ptr<pipeline::PromptEmbeddings> text;
};

Runtime make_runtime(const config::AppConfig& cfg, const pipeline::DataSource& bank_source) {
    Runtime rt;
    rt.cfg = cfg;
    rt.device = parse_device(cfg.device);
    torch::manual_seed(cfg.seed);
    std::shared_ptr<const posfar::FeatureExtractor> extractor = posfar::make_extractor(cfg.extractor);
    rt.residuals = std::make_shared<pipeline::ResidualContext>(extractor, cfg.posfar);
    pipeline::ensure_banks(*rt.residuals, bank_source, cfg.bank_path(), cfg.seed);
    if (!cfg.prompts.empty()) {
        std::shared_ptr<const language::TextEncoder> encoder = language::make_text_encoder(cfg.text_encoder);
        rt.text = std::make_shared<pipeline::PromptEmbeddings>(encoder, datasets::load_prompt_corpus(cfg.prompts));
    }
    return rt;
}

bool uses_language(const network::ModelConfig& m) { return m.use_residual_branch && m.use_language; }

void check_text(const Runtime& rt, const network::ModelConfig& model) {
    if (!uses_language(model)) return;
    if (!rt.text) throw Error(ErrorCode::EncoderUnavailable, "model uses language but no prompt corpus is configured");
    if (rt.text->encoder().dim() != model.text_dim) {
        throw Error(ErrorCode::InvalidArgument, "text encoder dim " + std::to_string(rt.text->encoder().dim()) +
                                                    " does not match model text_dim " + std::to_string(model.text_dim));
    }
}

datasets::Split labelled_split(const pipeline::DataSource& source) {
    // MVTec keeps pixel labels only in test/; KSDD2 labels both splits.
    return datasets::parse_layout(source.layout) == datasets::Layout::KSDD2 ? datasets::Split::Train : datasets::Split::Test;
}

std::vector<pipeline::LabeledSample> load_samples(const Runtime& rt, const pipeline::DataSource& source,
                                                  datasets::Split split, bool defective_only) {
    std::vector<pipeline::LabeledSample> out;
    datasets::PromptCorpus empty;
    for (const auto& category : pipeline::list_categories(source)) {
        const auto index = pipeline::load_split(source, category, split);
        if (rt.text) rt.text->corpus().validate_against(index);
        auto samples = pipeline::load_labeled_samples(index, *rt.residuals, rt.text ? rt.text->corpus() : empty, defective_only);
        out.insert(out.end(), std::make_move_iterator(samples.begin()), std::make_move_iterator(samples.end()));
    }
    return out;
}

network::LoadedCheckpoint load_model(const fs::path& path, const torch::Device& device) {
    auto loaded = network::load_checkpoint(path);
    loaded.model->to(device);
    loaded.model->eval();
    return loaded;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

int cmd_build_bank(const Flags& f, std::ostream& out) {
    const auto cfg = load_config(f);
    std::shared_ptr<const posfar::FeatureExtractor> extractor = posfar::make_extractor(cfg.extractor);
    pipeline::ResidualContext residuals(extractor, cfg.posfar);
    pipeline::ensure_banks(residuals, cfg.train_data, cfg.bank_path(), cfg.seed, true);
    for (const auto& category : residuals.categories()) {
        const auto& bank = residuals.bank(category);
        out << nlohmann::json{{"category", category},
                              {"path", (cfg.bank_path() / (category + ".bank")).string()},
                              {"vectors", bank.size()},
                              {"dim", bank.dim},
                              {"grid", {bank.grid_h, bank.grid_w}}}
                   .dump()
            << '\n';
    }
    return 0;
}

int cmd_train(const Flags& f, std::ostream& out) {
    const auto cfg = load_config(f);
    auto rt = make_runtime(cfg, cfg.train_data);
    check_text(rt, cfg.model);
    auto pool = load_samples(rt, cfg.train_data, labelled_split(cfg.train_data), true);
    torch::manual_seed(cfg.seed);
    network::AdClickModel model(cfg.model);
    model->to(rt.device);
    auto report = training::train(model, pool, rt.text.get(), cfg.train);
    out << nlohmann::json{{"checkpoint", cfg.train.checkpoint_path},
                          {"log", cfg.train.log_path},
                          {"steps", report.steps.size()},
                          {"pool", pool.size()},
                          {"final_loss", report.steps.empty() ? 0.0 : report.steps.back().loss}}
               .dump()
        << '\n';
    return 0;
}

int cmd_train_seg(const Flags& f, std::ostream& out) {
    auto cfg = load_config(f);
    if (datasets::parse_layout(cfg.train_data.layout) == datasets::Layout::KSDD2) cfg.seg.model.use_language = false;
    auto rt = make_runtime(cfg, cfg.train_data);
    check_text(rt, cfg.seg.model);
    datasets::PromptCorpus empty;
    const auto& corpus = rt.text ? rt.text->corpus() : empty;
    std::vector<pipeline::LabeledSample> pool;
    if (cfg.seg.supervision == "labels") {
        pool = segmode::label_pool(cfg.seg.labels_dir, *rt.residuals, corpus, cfg.train_data.image_size);
    } else {
        std::vector<datasets::DatasetIndex> indices;
        for (const auto& category : pipeline::list_categories(cfg.train_data)) {
            indices.push_back(pipeline::load_split(cfg.train_data, category, datasets::Split::Train));
        }
        pool = segmode::synthetic_pool(indices, *rt.residuals, corpus, cfg.seg.synthetic);
    }
    torch::manual_seed(cfg.seed);
    network::AdClickModel model(cfg.seg.model);
    model->to(rt.device);
    auto report = training::train(model, pool, rt.text.get(), cfg.seg.train);
    out << nlohmann::json{{"checkpoint", cfg.seg.train.checkpoint_path},
                          {"log", cfg.seg.train.log_path},
                          {"steps", report.steps.size()},
                          {"pool", pool.size()},
                          {"supervision", cfg.seg.supervision},
                          {"final_loss", report.steps.empty() ? 0.0 : report.steps.back().loss}}
               .dump()
        << '\n';
    return 0;
}

int cmd_evaluate_iis(const Flags& f, std::ostream& out) {
    const auto cfg = load_config(f);
    auto rt = make_runtime(cfg, cfg.eval_data);
    auto loaded = load_model(cfg.checkpoint_path(), rt.device);
    check_text(rt, loaded.config);
    auto samples = load_samples(rt, cfg.eval_data, labelled_split(cfg.eval_data), true);
    auto report = evaluation::evaluate_iis(loaded.model, samples, rt.text.get(), cfg.iis);
    auto j = report.to_json();
    j["checkpoint"] = cfg.checkpoint_path().string();
    j["model_fingerprint"] = loaded.fingerprint;
    write_text(cfg.output_path() / "iis_results.json", j.dump(2) + "\n");
    write_text(cfg.output_path() / "iis_results.md", report.markdown());
    out << report.markdown();
    return 0;
}

int cmd_evaluate_ad(const Flags& f, std::ostream& out) {
    auto cfg = load_config(f);
    auto rt = make_runtime(cfg, cfg.eval_data);
    auto loaded = load_model(cfg.seg_checkpoint_path(), rt.device);
    if (loaded.config.mode != network::Mode::Seg) {
        throw Error(ErrorCode::CheckpointMismatch, "evaluate-ad needs a checkpoint trained with train-seg");
    }
    check_text(rt, loaded.config);
    std::vector<evaluation::AdCategory> categories;
    for (const auto& category : pipeline::list_categories(cfg.eval_data)) {
        evaluation::AdCategory cat;
        cat.category = category;
        const auto index = pipeline::load_split(cfg.eval_data, category, datasets::Split::Test);
        datasets::PromptCorpus empty;
        cat.samples = pipeline::load_labeled_samples(index, *rt.residuals, rt.text ? rt.text->corpus() : empty, false);
        if (uses_language(loaded.config)) {
            cat.defect_types = segmode::defect_types_for(rt.text->corpus(), category);
        } else {
            cat.defect_types.types = {datasets::PromptKey{category, "any"}};
        }
        categories.push_back(std::move(cat));
    }
    if (!cfg.ad.maps_dir.empty() && fs::path(cfg.ad.maps_dir).is_relative()) {
        cfg.ad.maps_dir = (cfg.output_path() / cfg.ad.maps_dir).string();
    }
    auto report = evaluation::evaluate_ad(loaded.model, categories, uses_language(loaded.config) ? rt.text.get() : nullptr, cfg.ad);
    auto j = report.to_json();
    j["checkpoint"] = cfg.seg_checkpoint_path().string();
    j["model_fingerprint"] = loaded.fingerprint;
    write_text(cfg.output_path() / "ad_results.json", j.dump(2) + "\n");
    write_text(cfg.output_path() / "ad_results.md", report.markdown());
    out << report.markdown();
    return 0;
}

std::shared_ptr<session::ServiceContext> make_service_context(const config::AppConfig& cfg, Runtime& rt) {
    auto ctx = std::make_shared<session::ServiceContext>();
    if (fs::exists(cfg.checkpoint_path())) {
        auto loaded = load_model(cfg.checkpoint_path(), rt.device);
        check_text(rt, loaded.config);
        ctx->model = loaded.model;
        ctx->model_fingerprint = loaded.fingerprint;
    }
    ctx->residuals = rt.residuals;
    ctx->text = rt.text;
    for (const auto& category : pipeline::list_categories(cfg.eval_data)) {
        ctx->images.add_index(pipeline::load_split(cfg.eval_data, category, datasets::Split::Test));
    }
    ctx->image_size = cfg.eval_data.image_size;
    ctx->click_radius = cfg.clicks.radius;
    ctx->threshold = cfg.clicks.threshold;
    ctx->output_root = cfg.output_path();
    ctx->seed = cfg.seed;
    ctx->idle_timeout = std::chrono::seconds(cfg.server.idle_timeout_s);
    return ctx;
}

int cmd_serve(const Flags& f, std::ostream& out) {
    const auto cfg = load_config(f);
    auto rt = make_runtime(cfg, cfg.eval_data);
    auto ctx = make_service_context(cfg, rt);
    auto sessions = std::make_shared<session::SessionManager>(ctx);
    server::HttpService http(sessions);
    const int port = http.bind(cfg.server.host, cfg.server.port);
    out << "listening on http://" << cfg.server.host << ":" << port
        << (ctx->model ? "" : " (no checkpoint loaded)") << std::endl;
    http.listen();
    return 0;
}

int cmd_export(const Flags& f, std::ostream& out) {
    const auto cfg = load_config(f);
    if (f.log.empty()) throw Error(ErrorCode::InvalidArgument, "export needs --log <click log>");
    auto rt = make_runtime(cfg, cfg.eval_data);
    auto ctx = make_service_context(cfg, rt);
    if (!ctx->model) throw Error(ErrorCode::ModelNotLoaded, "checkpoint not found: " + cfg.checkpoint_path().string());
    auto record = session::read_label_record(f.log);
    if (record.clicks.empty()) throw Error(ErrorCode::ZeroClickExport, "click log has no clicks");
    const auto mask = session::replay(*ctx, record).binarize();

    std::optional<bool> matches;
    if (!record.mask_file.empty()) {
        const fs::path original = fs::path(f.log).parent_path() / record.mask_file;
        if (fs::exists(original)) matches = io::load_mask(original) == mask;
    }
    const fs::path dir = f.destination.empty() ? cfg.output_path() / "exports" : fs::path(f.destination);
    fs::create_directories(dir);
    std::string stem = record.image_id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    const fs::path mask_path = dir / (stem + ".png");
    io::save_mask_png(mask_path, mask);
    record.mask_file = mask_path.filename().string();
    record.model_fingerprint = ctx->model_fingerprint;
    write_text(dir / (stem + ".json"), session::to_json(record).dump(2) + "\n");
    out << nlohmann::json{{"path", mask_path.string()},
                          {"clicks", record.clicks.size()},
                          {"matches_original", matches ? nlohmann::json(*matches) : nlohmann::json(nullptr)}}
               .dump()
        << '\n';
    return 0;
}

int cmd_make_toy(const Flags& f, std::ostream& out) {
    const fs::path dir = f.output_dir.empty() ? fs::path("toy") : fs::path(f.output_dir);
    make_toy_workspace(dir, f.seed.value_or(1));
    out << nlohmann::json{{"workspace", dir.string()}, {"config", (dir / "config.json").string()}}.dump() << '\n';
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Interactive anomaly labeling: training, evaluation and the annotation service", "adclick"};
    app.require_subcommand(1);
    app.fallthrough();
    Flags f;
    app.add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--output-dir", f.output_dir, "Output root for artifacts");
    app.add_option("--seed", f.seed, "Random seed");
    app.add_option("--device", f.device, "cpu or cuda[:N]");
    app.add_option("--checkpoint", f.checkpoint, "Model checkpoint");
    app.add_option("--clicks", f.clicks, "Report a single click budget")->check(CLI::IsMember({2, 3, 5}));
    app.add_option("--port", f.port, "HTTP port for serve (0 picks a free port)");

    struct Command {
        const char* name;
        const char* help;
        int (*fn)(const Flags&, std::ostream&);
    };
    const Command commands[] = {
        {"train", "Train the interactive model", cmd_train},
        {"train-seg", "Train the automatic (seg) model", cmd_train_seg},
        {"evaluate-iis", "Click-simulation evaluation", cmd_evaluate_iis},
        {"evaluate-ad", "Automatic detection evaluation", cmd_evaluate_ad},
        {"build-bank", "Build reference banks", cmd_build_bank},
        {"serve", "Run the annotation HTTP service", cmd_serve},
        {"export", "Replay a click log and export its mask", cmd_export},
        {"make-toy", "Generate the synthetic toy workspace", cmd_make_toy},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("overrides", f.overrides, "key=value config overrides");
        if (std::string(c.name) == "export") {
            sub->add_option("--log", f.log, "Click log (exported sidecar JSON)")->check(CLI::ExistingFile);
            sub->add_option("--destination", f.destination, "Directory for the replayed export");
        }
        subs.emplace_back(sub, &c);
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string message = e.what();
        if (!args.empty() && args.front().rfind('-', 0) != 0) {
            bool known = false;
            for (const auto& c : commands) known = known || args.front() == c.name;
            if (!known) message = "unknown command '" + args.front() + "'";
        }
        err << app.help();
        err << error_line("usage", message) << '\n';
        return 2;
    }

    try {
        for (const auto& [sub, cmd] : subs) {
            if (sub->parsed()) return cmd->fn(f, out);
        }
        err << app.help();
        return 2;
    } catch (const Error& e) {
        err << error_line(std::string(to_string(e.code())), e.what()) << '\n';
    } catch (const c10::Error& e) {
        err << error_line("internal", e.what_without_backtrace()) << '\n';
    } catch (const std::exception& e) {
        err << error_line("internal", e.what()) << '\n';
    }
    return 1;
}

}  // namespace adclick::app
