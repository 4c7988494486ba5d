// mtcolor command-line entry points: data generation, annotation, training,
// sampling, evaluation, ablations and the HTTP service.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mtcolor/mtcolor.hpp"

namespace fs = std::filesystem;
using namespace mtcolor;

namespace {

SynthConfig synth_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
    SynthConfig c;
    for (const auto& [k, v] : parse_key_values(in, path)) {
        using detail::parse_value;
        if (k == "count") c.count = parse_value<int>(k, v);
        else if (k == "size") c.size = parse_value<int>(k, v);
        else if (k == "min_shapes") c.min_shapes = parse_value<int>(k, v);
        else if (k == "max_shapes") c.max_shapes = parse_value<int>(k, v);
        else if (k == "seed") c.seed = parse_value<std::uint64_t>(k, v);
        else throw InvalidArgument("unknown data config key '" + k + "'");
    }
    c.validate();
    return c;
}

void write_json(const std::string& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Sampler flags shared by sample/eval/ablate.
struct SamplerFlags {
    double alpha = 0.2, beta = 0.2, guidance = 3.0, eta = 0.0;
    int steps = 20;
    std::uint64_t seed = 0;
    bool luma_lock = false, clip_x0 = false;
    int threads = 1;

    void add(CLI::App* c) {
        c->add_option("--alpha", alpha, "fraction of steps spent in the instance phase")->capture_default_str();
        c->add_option("--beta", beta, "background weight at fusion")->capture_default_str();
        c->add_option("--steps", steps, "DDIM steps")->capture_default_str();
        c->add_option("--guidance", guidance, "classifier-free guidance scale")->capture_default_str();
        c->add_option("--eta", eta, "DDIM stochasticity")->capture_default_str();
        c->add_option("--seed", seed, "sampling seed")->capture_default_str();
        c->add_flag("--luma-lock", luma_lock, "keep the input luminance");
        c->add_flag("--clip-x0", clip_x0, "clamp predicted clean images to the data range");
        c->add_option("--threads", threads, "instance branches sampled concurrently")->capture_default_str();
    }
    SamplerConfig config() const {
        SamplerConfig s;
        s.alpha = alpha;
        s.beta = beta;
        s.guidance = guidance;
        s.eta = eta;
        s.ddim_steps = steps;
        s.seed = seed;
        s.luma_lock = luma_lock;
        s.clip_x0 = clip_x0;
        s.threads = threads;
        return s;
    }
};

void print_summary(const std::string& title, const std::vector<std::pair<std::string, MetricSummary>>& rows) {
    std::printf("%-22s %10s %10s %8s\n", title.c_str(), "mean", "std", "n");
    for (const auto& [name, s] : rows) std::printf("%-22s %10.4f %10.4f %8d\n", name.c_str(), s.mean, s.stddev, s.defined);
}

std::vector<Sample> limited(std::vector<Sample> data, int limit) {
    if (limit > 0 && static_cast<int>(data.size()) > limit) data.resize(static_cast<std::size_t>(limit));
    return data;
}

int cmd_gen_data(const std::string& config, const std::string& out) {
    const auto cfg = synth_config_from_file(config);
    const auto data = generate_synthetic(cfg);
    write_dataset(out, data);
    std::printf("wrote %zu images to %s\n", data.size(), out.c_str());
    return 0;
}

int cmd_annotate(const std::string& images, const std::string& detector, const std::string& primary,
                 const std::string& fallback, const std::string& out) {
    fs::path dir(images);
    if (fs::is_directory(dir / "images")) dir /= "images";
    if (!fs::is_directory(dir)) throw InvalidArgument("'" + images + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    auto det = make_detector(detector);
    auto p = make_captioner(primary);
    auto f = make_captioner(fallback);
    std::vector<AnnotatedImage> recs;
    std::map<std::string, int> sources;
    for (const auto& file : files) {
        recs.push_back(annotate_image(read_png(file.string()), file.stem().string(), *det, *p, *f));
        for (const auto& i : recs.back().instances) ++sources[i.source];
    }
    write_annotations(out, recs);
    std::printf("annotated %zu images: primary %d, fallback %d, none %d (captioner calls %d/%d)\n", recs.size(),
                sources["primary"], sources["fallback"], sources["none"], p->calls(), f->calls());
    return 0;
}

int cmd_train(int stage, const std::string& config, const std::string& data_dir, const std::string& out,
              const std::string& resume) {
    RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
    std::optional<Checkpoint> prior;
    if (!resume.empty()) prior = load_checkpoint(resume);
    if (stage == 2 && !prior)
        throw InvalidArgument("stage 2 needs the stage-1 checkpoint: pass --resume CKPT from 'train --stage 1'");
    const auto data = training_examples(read_dataset(data_dir));
    const int log_every = std::max(1, rc.train.log_every);
    auto res = train_stage(stage, data, rc, prior ? &*prior : nullptr, out, [&](int it, double loss, double lr) {
        if (it % log_every == 0 || it == rc.train.iterations)
            std::printf("stage %d iter %d loss %.5f lr %.3g\n", stage, it, loss, lr);
        std::fflush(stdout);
    });
    std::printf("saved %s (stages done:", out.c_str());
    for (int s : completed_stages(res.checkpoint)) std::printf(" %d", s);
    std::printf(")\n");
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& gray, const std::string& ann_path, int index,
               const SamplerFlags& flags, const std::string& out) {
    const auto c = load_checkpoint(ckpt);
    const auto model = load_model(c);
    const auto img = read_png(gray);
    AnnotatedImage ann;
    ann.width = img.width;
    ann.height = img.height;
    if (!ann_path.empty()) {
        const auto recs = read_annotations(ann_path);
        if (index < 0 || index >= static_cast<int>(recs.size()))
            throw InvalidArgument("--index " + std::to_string(index) + " outside the " +
                                  std::to_string(recs.size()) + " records of " + ann_path);
        ann = recs[static_cast<std::size_t>(index)];
    }
    auto res = colorize(colorize_request(ann, gray_of(img), flags.config()), model, load_schedule(c));
    res.provenance["checkpoint_hash"] = checkpoint_hash(serialize_checkpoint(c));
    write_png(out, image_from_planar(res.rgb, img.width, img.height));
    write_json(out + ".json", res.provenance);
    std::printf("%s\n", res.provenance.dump().c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& metrics, int limit,
             const SamplerFlags& flags, const std::string& out) {
    const auto names = split_list(metrics);
    for (const auto& n : names)
        if (n != "colorfulness" && n != "psnr" && n != "ssim" && n != "fidelity")
            throw InvalidArgument("unknown metric '" + n + "' (colorfulness, psnr, ssim, fidelity)");
    const auto data = limited(read_dataset(data_dir), limit);
    std::optional<Checkpoint> c;
    std::optional<Denoiser<float>> model;
    std::optional<NoiseSchedule> sched;
    if (!ckpt.empty()) {
        c = load_checkpoint(ckpt);
        model.emplace(load_model(*c));
        sched = load_schedule(*c);
    }
    std::map<std::string, std::vector<double>> values;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : data) {
        // Without a checkpoint the dataset images themselves are scored.
        RgbImage img = s.image;
        if (model)
            img = image_from_planar(colorize(colorize_request(s.ann, gray_of(s.image), flags.config()), *model, *sched).rgb,
                                    s.image.width, s.image.height);
        nlohmann::json row = {{"image_id", s.ann.image_id}};
        for (const auto& n : names) {
            double v = 0;
            if (n == "colorfulness") v = colorfulness(img);
            else if (n == "psnr") v = psnr(img, s.image);
            else if (n == "ssim") v = ssim(img, s.image);
            else v = instance_color_fidelity(img, s.ann).value_or(std::nan(""));
            values[n].push_back(v);
            row[n] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
        }
        rows.push_back(row);
    }
    nlohmann::json summary = nlohmann::json::object();
    std::vector<std::pair<std::string, MetricSummary>> table;
    for (const auto& n : names) {
        auto s = summarize(values[n]);
        auto j = to_json(s);
        j.erase("values");
        summary[n] = j;
        table.emplace_back(n, s);
    }
    nlohmann::json report = {{"images", data.size()}, {"rows", rows}, {"summary", summary}};
    report["source"] = c ? nlohmann::json{{"checkpoint", ckpt}, {"sampler", to_json(flags.config())}}
                         : nlohmann::json{{"ground_truth", data_dir}};
    write_json(out, report);
    print_summary("metric", table);
    return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& data_dir, const std::string& variants, int limit,
               bool leakage, const SamplerFlags& flags, const std::string& out) {
    std::vector<Variant> vs;
    for (const auto& v : split_list(variants)) vs.push_back(variant_from_string(v));
    const auto c = load_checkpoint(ckpt);
    const auto model = load_model(c);
    const auto sched = load_schedule(c);
    const auto data = limited(read_dataset(data_dir), limit);
    nlohmann::json rows = nlohmann::json::array();
    std::printf("%-12s %10s %10s %12s %12s\n", "variant", "fidelity", "std", "leak ratio", "pooled leak");
    for (auto v : vs) {
        const auto score = evaluate_variant(model, sched, data, flags.config(), v, leakage);
        rows.push_back(to_json(score));
        const double pooled = score.leak_inside > 0 ? score.leak_outside / score.leak_inside : std::nan("");
        std::printf("%-12s %10.4f %10.4f %12.4f %12.4f\n", to_string(v), score.fidelity.mean, score.fidelity.stddev,
                    score.leakage_ratio.mean, pooled);
        std::fflush(stdout);
    }
    write_json(out, {{"checkpoint", ckpt},
                     {"images", data.size()},
                     {"sampler", to_json(flags.config())},
                     {"variants", rows}});
    return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const std::string& ckpt, const std::string& addr, const std::string& static_dir, int workers,
              int queue) {
    const auto [host, port] = resolve_address(addr);
    ServiceConfig cfg;
    cfg.workers = workers;
    cfg.queue_capacity = static_cast<std::size_t>(std::max(1, queue));
    ColorizeService svc(load_checkpoint(ckpt), cfg);
    httplib::Server srv;
    svc.mount(srv);
    if (!static_dir.empty() && !srv.set_mount_point("/", static_dir))
        throw InvalidArgument("static directory '" + static_dir + "' does not exist");
    g_server = &srv;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    if (!srv.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    std::printf("serving %s on http://%s:%d (checkpoint %s)\n", ckpt.c_str(), host.c_str(), port,
                svc.checkpoint_hash_hex().c_str());
    std::fflush(stdout);
    srv.listen_after_bind();
    g_server = nullptr;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mtcolor: instance-aware diffusion colorization"};
    app.require_subcommand(1);

    std::string config, out, data, ckpt, resume, images, detector = "components", primary = "palette",
                                                           fallback = "small-fail", gray, ann;
    int stage = 1, index = 0, limit = 0, workers = 1, queue = 8;
    std::string metrics = "colorfulness,psnr,ssim,fidelity", variants = "full,no-mask,no-instance,ddim";
    std::string addr = "127.0.0.1:8080", static_dir;
    bool no_leakage = false;
    SamplerFlags sflags;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
    gen->add_option("--config", config, "key = value file (count, size, min_shapes, max_shapes, seed)")->required();
    gen->add_option("--out", out, "output dataset directory")->required();

    auto* annot = app.add_subcommand("annotate", "detect, crop, caption and validate a folder of images");
    annot->add_option("--images", images, "directory of PNG images (or a dataset directory)")->required();
    annot->add_option("--detector", detector, "components")->capture_default_str();
    annot->add_option("--primary", primary, "palette | refusal | failing | small-fail")->capture_default_str();
    annot->add_option("--fallback", fallback, "palette | refusal | failing | small-fail")->capture_default_str();
    annot->add_option("--out", out, "annotation JSONL file")->required();

    auto* train = app.add_subcommand("train", "train one stage");
    train->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--config", config, "key = value run config");
    train->add_option("--data", data, "dataset directory")->required();
    train->add_option("--out", out, "checkpoint to write")->required();
    train->add_option("--resume", resume, "stage-1 checkpoint (stage 2) or a partial checkpoint to continue");

    auto* sample = app.add_subcommand("sample", "colorize one grayscale image");
    sample->add_option("--ckpt", ckpt, "checkpoint")->required();
    sample->add_option("--gray", gray, "grayscale (or RGB) PNG at the model size")->required();
    sample->add_option("--ann", ann, "annotation JSONL holding the masks and texts");
    sample->add_option("--index", index, "record of --ann to use")->capture_default_str();
    sample->add_option("--out", out, "output PNG; provenance goes to OUT.json")->required();
    sflags.add(sample);

    auto* eval = app.add_subcommand("eval", "metric report on a dataset");
    eval->add_option("--ckpt", ckpt, "checkpoint; omit to score the dataset images themselves");
    eval->add_option("--data", data, "dataset directory")->required();
    eval->add_option("--metrics", metrics, "comma list")->capture_default_str();
    eval->add_option("--limit", limit, "evaluate the first N images only");
    eval->add_option("--out", out, "report file")->required();
    sflags.add(eval);

    auto* ablate = app.add_subcommand("ablate", "fidelity and leakage of the ablation variants");
    ablate->add_option("--ckpt", ckpt, "checkpoint")->required();
    ablate->add_option("--data", data, "dataset directory")->required();
    ablate->add_option("--variants", variants, "comma list of full, no-mask, no-instance, ddim")->capture_default_str();
    ablate->add_option("--limit", limit, "use the first N images only");
    ablate->add_flag("--no-leakage", no_leakage, "skip the leakage probe");
    ablate->add_option("--out", out, "report file")->required();
    sflags.add(ablate);

    auto* serve = app.add_subcommand("serve", "HTTP service (MTCOLOR_ADDR overrides --addr)");
    serve->add_option("--ckpt", ckpt, "checkpoint")->required();
    serve->add_option("--addr", addr, "HOST:PORT")->capture_default_str();
    serve->add_option("--static", static_dir, "directory served at /");
    serve->add_option("--workers", workers, "sampler workers")->capture_default_str();
    serve->add_option("--queue", queue, "queued job bound")->capture_default_str();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_gen_data(config, out);
        if (*annot) return cmd_annotate(images, detector, primary, fallback, out);
        if (*train) return cmd_train(stage, config, data, out, resume);
        if (*sample) return cmd_sample(ckpt, gray, ann, index, sflags, out);
        if (*eval) return cmd_eval(ckpt, data, metrics, limit, sflags, out);
        if (*ablate) return cmd_ablate(ckpt, data, variants, limit, !no_leakage, sflags, out);
        if (*serve) return cmd_serve(ckpt, addr, static_dir, workers, queue);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
