#include "adclick/trainer.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "adclick/clicks.hpp"
#include "adclick/tensor_utils.hpp"

namespace adclick::training {

using network::AdClickModel;
using pipeline::LabeledSample;

void to_json(nlohmann::json& j, const TrainOptions& o) {
    j = nlohmann::json{{"steps", o.steps},
                       {"batch_size", o.batch_size},
                       {"lr", o.lr},
                       {"weight_decay", o.weight_decay},
                       {"nfl_gamma", o.nfl_gamma},
                       {"lambda_language", o.lambda_language},
                       {"contrastive_temperature", o.contrastive_temperature},
                       {"max_prior_clicks", o.max_prior_clicks},
                       {"click_jitter", o.click_jitter},
                       {"click_radius", o.click_radius},
                       {"threshold", o.threshold},
                       {"fixed_batch_size", o.fixed_batch_size},
                       {"fixed_batch_every", o.fixed_batch_every},
                       {"checkpoint_every", o.checkpoint_every},
                       {"seed", o.seed},
                       {"log_path", o.log_path},
                       {"checkpoint_path", o.checkpoint_path}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
    o.steps = j.value("steps", o.steps);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.lr = j.value("lr", o.lr);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.nfl_gamma = j.value("nfl_gamma", o.nfl_gamma);
    o.lambda_language = j.value("lambda_language", o.lambda_language);
    o.contrastive_temperature = j.value("contrastive_temperature", o.contrastive_temperature);
    o.max_prior_clicks = j.value("max_prior_clicks", o.max_prior_clicks);
    o.click_jitter = j.value("click_jitter", o.click_jitter);
    o.click_radius = j.value("click_radius", o.click_radius);
    o.threshold = j.value("threshold", o.threshold);
    o.fixed_batch_size = j.value("fixed_batch_size", o.fixed_batch_size);
    o.fixed_batch_every = j.value("fixed_batch_every", o.fixed_batch_every);
    o.checkpoint_every = j.value("checkpoint_every", o.checkpoint_every);
    o.seed = j.value("seed", o.seed);
    o.log_path = j.value("log_path", o.log_path);
    o.checkpoint_path = j.value("checkpoint_path", o.checkpoint_path);
}

Batch make_batch(const std::vector<const LabeledSample*>& samples, const std::vector<torch::Tensor>& text,
                 const std::vector<int>& groups) {
    std::vector<torch::Tensor> images;
    std::vector<torch::Tensor> residuals;
    std::vector<torch::Tensor> targets;
    for (const auto* s : samples) {
        images.push_back(s->image);
        residuals.push_back(s->posfar);
        targets.push_back(map_to_tensor(s->mask).unsqueeze(0));
    }
    Batch b;
    b.inputs.image = torch::stack(images);
    b.inputs.posfar = torch::stack(residuals);
    b.inputs.click_maps = torch::zeros({b.inputs.image.size(0), 3, b.inputs.image.size(2), b.inputs.image.size(3)});
    if (!text.empty()) {
        auto tokens = language::pad_tokens(text);
        b.inputs.text = tokens.tokens;
        b.inputs.text_mask = tokens.mask;
    }
    b.target = torch::stack(targets);
    b.groups = groups;
    return b;
}

LossTerms training_loss(AdClickModel& model, const network::ForwardOutput& output, const Batch& batch,
                        const TrainOptions& options) {
    LossTerms terms;
    terms.nfl = network::normalized_focal_loss(output.probs, batch.target, options.nfl_gamma);
    terms.aux = torch::zeros({}, terms.nfl.options());
    if (model->linguistic_encoder && batch.inputs.text.defined() && options.lambda_language > 0.0) {
        auto pooled = language::mean_pool(model->linguistic_encoder(batch.inputs.text), batch.inputs.text_mask);
        terms.aux = language::prompt_contrastive_loss(pooled, batch.groups, options.contrastive_temperature);
    }
    terms.total = terms.nfl + options.lambda_language * terms.aux;
    return terms;
}

namespace {

struct ClickState {
    std::vector<clicks::Click> history;
    clicks::AnomalyMask previous;
};

torch::Tensor click_tensor(const std::vector<ClickState>& states, int radius) {
    std::vector<torch::Tensor> maps;
    for (const auto& s : states) {
        const int h = s.previous.scores.rows();
        const int w = s.previous.scores.cols();
        maps.push_back(network::click_maps_tensor(clicks::encode_clicks(s.history, s.previous, h, w, radius)));
    }
    return torch::stack(maps);
}

void move_batch(Batch& b, const torch::Device& device) {
    auto move = [&](torch::Tensor& t) {
        if (t.defined()) t = t.to(device);
    };
    move(b.inputs.image);
    move(b.inputs.click_maps);
    move(b.inputs.posfar);
    move(b.inputs.text);
    move(b.inputs.text_mask);
    move(b.target);
}

class JsonLog {
public:
    explicit JsonLog(const std::string& path) {
        if (path.empty()) return;
        const std::filesystem::path p(path);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        out_.open(p, std::ios::app);
        if (!out_) throw Error(ErrorCode::Io, "cannot open training log " + path);
    }
    void write(const nlohmann::json& j) {
        if (out_.is_open()) out_ << j.dump() << '\n' << std::flush;
    }

private:
    std::ofstream out_;
};

}  // namespace

TrainReport train(AdClickModel& model, const std::vector<LabeledSample>& pool, const pipeline::PromptEmbeddings* text,
                  const TrainOptions& options) {
    if (pool.empty()) throw Error(ErrorCode::InvalidArgument, "training pool is empty");
    if (options.batch_size < 1 || options.steps < 0) throw Error(ErrorCode::InvalidArgument, "invalid batch size or step count");
    const bool interactive = model->config.mode == network::Mode::Interactive;
    const bool use_text = model->config.use_residual_branch && model->config.use_language;
    if (use_text && !text) throw Error(ErrorCode::EncoderUnavailable, "model uses language but no prompt embeddings were given");

    std::map<datasets::PromptKey, int> key_ids;
    for (const auto& s : pool) key_ids.emplace(s.key, static_cast<int>(key_ids.size()));

    std::mt19937_64 rng(options.seed);
    const auto device = model->decoder->head->weight.device();
    torch::optim::AdamW optimizer(model->parameters(),
                                  torch::optim::AdamWOptions(options.lr).weight_decay(options.weight_decay));
    JsonLog log(options.log_path);
    {
        nlohmann::json header{{"event", "start"}, {"options", options}, {"model", model->config},
                              {"pool_size", pool.size()}};
        log.write(header);
    }

    // Fixed monitoring batch: evenly spaced samples, one centred click each.
    std::vector<const LabeledSample*> fixed;
    const int n_fixed = std::min<int>(options.fixed_batch_size, static_cast<int>(pool.size()));
    for (int i = 0; i < n_fixed; ++i) fixed.push_back(&pool[static_cast<std::size_t>(i) * pool.size() / n_fixed]);
    Batch fixed_batch;
    if (options.fixed_batch_every > 0 && n_fixed > 0) {
        std::vector<torch::Tensor> t;
        std::vector<int> g;
        std::vector<ClickState> states;
        for (const auto* s : fixed) {
            if (use_text) t.push_back(text->canonical(s->key));
            g.push_back(key_ids.at(s->key));
            ClickState st{{}, clicks::AnomalyMask::zeros(s->mask.rows(), s->mask.cols())};
            if (interactive) {
                if (auto c = clicks::simulate_next_click(st.previous.binarize(), s->mask)) st.history.push_back(*c);
            }
            states.push_back(std::move(st));
        }
        fixed_batch = make_batch(fixed, t, g);
        fixed_batch.inputs.click_maps = click_tensor(states, options.click_radius);
        move_batch(fixed_batch, device);
    }

    TrainReport report;
    auto eval_fixed = [&](std::int64_t step) {
        if (options.fixed_batch_every <= 0 || fixed.empty()) return;
        if (step % options.fixed_batch_every != 0) return;
        torch::NoGradGuard no_grad;
        auto out = model->forward(fixed_batch.inputs);
        const double loss = training_loss(model, out, fixed_batch, options).total.item<double>();
        report.fixed_batch.push_back({step, loss});
        log.write({{"step", step}, {"fixed_batch_loss", loss}});
    };

    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::uniform_int_distribution<int> prior(0, std::max(0, options.max_prior_clicks));
    model->train();
    std::int64_t step = 0;
    try {
        eval_fixed(0);
        for (step = 1; step <= options.steps; ++step) {
            std::vector<const LabeledSample*> chosen;
            std::vector<torch::Tensor> t;
            std::vector<int> g;
            for (int i = 0; i < options.batch_size; ++i) {
                const auto* s = &pool[pick(rng)];
                chosen.push_back(s);
                if (use_text) t.push_back(text->sample(s->key, rng));
                g.push_back(key_ids.at(s->key));
            }
            Batch batch = make_batch(chosen, t, g);
            move_batch(batch, device);

            if (interactive) {
                std::vector<ClickState> states;
                for (const auto* s : chosen) {
                    ClickState st{{}, clicks::AnomalyMask::zeros(s->mask.rows(), s->mask.cols())};
                    if (auto c = clicks::sample_first_click(s->mask, rng)) st.history.push_back(*c);
                    states.push_back(std::move(st));
                }
                const int rounds = prior(rng);
                for (int r = 0; r < rounds; ++r) {
                    torch::NoGradGuard no_grad;
                    batch.inputs.click_maps = click_tensor(states, options.click_radius).to(device);
                    auto probs = model->forward(batch.inputs).probs;
                    for (std::size_t i = 0; i < states.size(); ++i) {
                        states[i].previous = clicks::AnomalyMask{tensor_to_scores(probs[static_cast<std::int64_t>(i)][0]),
                                                                 options.threshold};
                        auto next = clicks::sample_training_click(states[i].previous.binarize(), chosen[i]->mask, rng,
                                                                  options.click_jitter);
                        if (next) {
                            next->index = static_cast<int>(states[i].history.size()) + 1;
                            states[i].history.push_back(*next);
                        }
                    }
                }
                batch.inputs.click_maps = click_tensor(states, options.click_radius).to(device);
            }

            auto out = model->forward(batch.inputs);
            LossTerms terms = training_loss(model, out, batch, options);
            const double loss = terms.total.item<double>();
            if (!std::isfinite(loss)) throw Error(ErrorCode::Divergence, "non-finite loss at step " + std::to_string(step));
            optimizer.zero_grad();
            terms.total.backward();
            optimizer.step();

            StepRecord rec{step, loss, terms.nfl.item<double>(), terms.aux.item<double>(), options.lr};
            report.steps.push_back(rec);
            log.write({{"step", rec.step}, {"loss", rec.loss}, {"nfl", rec.nfl}, {"aux", rec.aux}, {"lr", rec.lr}});
            eval_fixed(step);
            if (options.checkpoint_every > 0 && step % options.checkpoint_every == 0 && !options.checkpoint_path.empty()) {
                network::save_checkpoint(model, step, options.checkpoint_path);
            }
        }
    } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFinite) throw Error(ErrorCode::Divergence, "training diverged at step " + std::to_string(step));
        throw;
    }
    model->eval();
    if (!options.checkpoint_path.empty()) network::save_checkpoint(model, options.steps, options.checkpoint_path);
    log.write({{"event", "end"}, {"steps", options.steps}});
    return report;
}

}  // namespace adclick::training
