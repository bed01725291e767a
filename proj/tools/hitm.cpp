// hitm: adversarial-attack toolkit for a tiny one-stage object detector.
// Subcommands cover the full workflow: synthetic dataset generation, detector
// training, image-specific and universal perturbation attacks, clean-vs-
// attacked evaluation, and a frame-stream proxy demonstrating perturbation
// injection between a camera and a detection system.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hitm/attack.hpp"
#include "hitm/detector.hpp"
#include "hitm/metrics.hpp"
#include "hitm/nms.hpp"
#include "hitm/ppm.hpp"
#include "hitm/scenes.hpp"
#include "hitm/serialize.hpp"
#include "hitm/stream.hpp"

namespace {

using nlohmann::json;

// Defaults for every tunable, overridden first by --config JSON, then by
// explicit flags.
struct Settings {
    // scenes
    std::string family = "f1";
    int count = 20;
    std::uint64_t scene_seed = 1;
    // detector
    int epochs = 50;
    double lr = 5e-3;
    std::uint64_t train_seed = 1;
    // attack
    std::string loss = "pcb";
    std::string mode = "fab";
    std::string init = "zero";
    double eps = 8.0 / 255.0;
    double alpha = 2.0 / 255.0;
    double decay = 0.98;
    int iters = 100;
    std::uint64_t attack_seed = 0;
    // nms
    double conf = 0.5;
    double iou = 0.45;
    // stream
    double fps = 0.0;
    bool online = false;
};

void require_keys(const json& j, std::initializer_list<const char*> known,
                  const std::string& section) {
    if (!j.is_object())
        throw std::runtime_error("config: section '" + section +
                                 "' must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok)
            throw std::runtime_error("config: unknown key '" +
                                     (section.empty() ? key : section + "." + key) +
                                     "'");
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& into) {
    if (j.contains(key)) j.at(key).get_to(into);
}

void apply_config(Settings& s, const json& doc) {
    require_keys(doc, {"scenes", "detector", "attack", "nms", "stream"}, "");
    if (doc.contains("scenes")) {
        const json& j = doc.at("scenes");
        require_keys(j, {"family", "count", "seed"}, "scenes");
        maybe(j, "family", s.family);
        maybe(j, "count", s.count);
        maybe(j, "seed", s.scene_seed);
    }
    if (doc.contains("detector")) {
        const json& j = doc.at("detector");
        require_keys(j, {"epochs", "lr", "seed"}, "detector");
        maybe(j, "epochs", s.epochs);
        maybe(j, "lr", s.lr);
        maybe(j, "seed", s.train_seed);
    }
    if (doc.contains("attack")) {
        const json& j = doc.at("attack");
        require_keys(j, {"loss", "mode", "init", "eps", "alpha", "decay",
                         "iters", "seed"},
                     "attack");
        maybe(j, "loss", s.loss);
        maybe(j, "mode", s.mode);
        maybe(j, "init", s.init);
        maybe(j, "eps", s.eps);
        maybe(j, "alpha", s.alpha);
        maybe(j, "decay", s.decay);
        maybe(j, "iters", s.iters);
        maybe(j, "seed", s.attack_seed);
    }
    if (doc.contains("nms")) {
        const json& j = doc.at("nms");
        require_keys(j, {"conf", "iou"}, "nms");
        maybe(j, "conf", s.conf);
        maybe(j, "iou", s.iou);
    }
    if (doc.contains("stream")) {
        const json& j = doc.at("stream");
        require_keys(j, {"fps", "online"}, "stream");
        maybe(j, "fps", s.fps);
        maybe(j, "online", s.online);
    }
}

/// Finds --config before CLI11 runs, so config values can seed the flag
/// defaults and flags still win.
json prescan_config(int argc, char** argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config") {
            if (i + 1 >= argc)
                throw std::runtime_error("--config requires a file argument");
            path = argv[i + 1];
        } else if (arg.rfind("--config=", 0) == 0) {
            path = arg.substr(9);
        }
    }
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

hitm::attack::AttackConfig attack_config_from(const Settings& s) {
    hitm::attack::AttackConfig cfg;
    cfg.loss = hitm::io::loss_from_name(s.loss);
    cfg.mode = hitm::io::mode_from_name(s.mode);
    cfg.init = hitm::io::init_from_name(s.init);
    cfg.epsilon = s.eps;
    cfg.alpha = s.alpha;
    cfg.decay = s.decay;
    cfg.iterations = s.iters;
    cfg.seed = s.attack_seed;
    cfg.validate();
    return cfg;
}

void write_metrics(const std::string& path,
                   const hitm::metrics::MetricSeries& series) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("metrics: cannot open " + path);
    series.write_csv(out);
}

std::unique_ptr<hitm::stream::ByteStream> open_in(const std::string& tcp_listen) {
    if (tcp_listen.empty())
        return std::make_unique<hitm::stream::FdStream>(0, -1, false);
    const auto [host, port] = hitm::stream::parse_endpoint(tcp_listen);
    return std::make_unique<hitm::stream::FdStream>(
        hitm::stream::tcp_listen_accept(host, port), -1, true);
}

std::unique_ptr<hitm::stream::ByteStream> open_out(const std::string& tcp_to) {
    if (tcp_to.empty())
        return std::make_unique<hitm::stream::FdStream>(-1, 1, false);
    const auto [host, port] = hitm::stream::parse_endpoint(tcp_to);
    return std::make_unique<hitm::stream::FdStream>(
        -1, hitm::stream::tcp_connect(host, port), true);
}

int run(int argc, char** argv) {
    Settings s;
    apply_config(s, prescan_config(argc, argv));

    CLI::App app{"Adversarial perturbation toolkit for a tiny one-stage "
                 "object detector"};
    app.require_subcommand(1);
    std::string config_path;  // consumed by the prescan; declared so it parses
    app.add_option("--config", config_path,
                   "JSON config with sections scenes/detector/attack/nms/stream"
                   " (flags override)");

    // ------------------------------------------------------------ gen-scenes
    auto* gen = app.add_subcommand("gen-scenes", "Generate a synthetic scene set");
    gen->fallthrough();
    std::string gen_out, gen_family_json;
    gen->add_option("--family", s.family, "Built-in family id (f1..f7)")
        ->capture_default_str();
    gen->add_option("--family-json", gen_family_json,
                    "JSON file with a custom family config (overrides --family)");
    gen->add_option("--count", s.count, "Number of scenes")
        ->capture_default_str();
    gen->add_option("--seed", s.scene_seed, "Generator seed")
        ->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->callback([&] {
        hitm::scenes::FamilyConfig family;
        if (!gen_family_json.empty()) {
            std::ifstream in(gen_family_json);
            if (!in)
                throw std::runtime_error("cannot open " + gen_family_json);
            family = hitm::io::family_config_from_json(json::parse(in));
        } else {
            family = hitm::scenes::family_by_id(s.family);
        }
        const auto scenes = hitm::scenes::generate(family, s.count, s.scene_seed);
        hitm::io::save_scenes(gen_out, scenes);
        std::cout << "wrote " << scenes.size() << " scenes (family "
                  << family.id << ") to " << gen_out << '\n';
    });

    // ----------------------------------------------------------------- train
    auto* train = app.add_subcommand("train", "Train the detector on a scene set");
    train->fallthrough();
    std::string train_scenes, train_out;
    train->add_option("--scenes", train_scenes, "Scene directory")->required();
    train->add_option("--epochs", s.epochs, "Training epochs")
        ->capture_default_str();
    train->add_option("--lr", s.lr, "Learning rate")->capture_default_str();
    train->add_option("--seed", s.train_seed, "Init + shuffle seed")
        ->capture_default_str();
    train->add_option("--out", train_out, "Weight file to write")->required();
    train->callback([&] {
        const auto scenes = hitm::io::load_scenes(train_scenes);
        std::vector<hitm::det::Sample> samples;
        samples.reserve(scenes.size());
        for (const auto& scene : scenes)
            samples.push_back({scene.image, scene.truth});
        auto weights = hitm::det::DetectorWeights::random_init(s.train_seed);
        const auto report =
            hitm::det::train(weights, samples, s.epochs, s.lr, s.train_seed);
        for (std::size_t e = 0; e < report.epoch_mean_loss.size(); ++e)
            std::cout << "epoch " << e
                      << " mean_loss=" << report.epoch_mean_loss[e] << '\n';
        hitm::io::save_weights(train_out, weights);
        std::cout << "wrote weights to " << train_out << '\n';
    });

    // ---------------------------------------------------------------- attack
    auto* atk = app.add_subcommand(
        "attack", "Image-specific perturbation attack on one image");
    atk->fallthrough();
    std::string atk_weights, atk_image, atk_out, atk_metrics;
    atk->add_option("--weights", atk_weights, "Detector weight file")->required();
    atk->add_option("--image", atk_image, "Input PPM image")->required();
    atk->add_option("--loss", s.loss, "pc|pcb|tog")->capture_default_str();
    atk->add_option("--mode", s.mode, "fab|vanish")->capture_default_str();
    atk->add_option("--eps", s.eps, "L-inf budget in [0,1] units")
        ->capture_default_str();
    atk->add_option("--alpha", s.alpha, "Initial step size")
        ->capture_default_str();
    atk->add_option("--decay", s.decay, "Step-size decay per iteration")
        ->capture_default_str();
    atk->add_option("--iters", s.iters, "Iteration count")
        ->capture_default_str();
    atk->add_option("--init", s.init, "zero|uniform")->capture_default_str();
    atk->add_option("--seed", s.attack_seed, "Seed for uniform init")
        ->capture_default_str();
    atk->add_option("--out", atk_out, "Perturbation file to write")->required();
    atk->add_option("--metrics", atk_metrics, "Per-iteration metric CSV");
    atk->callback([&] {
        const auto weights = hitm::io::load_weights(atk_weights);
        const auto image = hitm::load_ppm(atk_image);
        const auto cfg = attack_config_from(s);
        const hitm::NmsConfig nms_cfg{s.conf, s.iou};
        const auto outcome =
            hitm::attack::attack_image(image, weights, cfg, nms_cfg);
        hitm::io::save_perturbation(atk_out, outcome.perturbation);
        write_metrics(atk_metrics, outcome.series);
        const auto& last = outcome.series.records.back();
        std::cout << "iterations=" << outcome.perturbation.iterations_done
                  << " final_boxes=" << last.num_boxes
                  << " final_loss=" << last.adv_loss << '\n'
                  << "wrote perturbation to " << atk_out << '\n';
    });

    // ------------------------------------------------------------- train-uap
    auto* uap = app.add_subcommand(
        "train-uap", "Train a universal perturbation over a scene set");
    uap->fallthrough();
    std::string uap_weights, uap_scenes, uap_out, uap_metrics;
    uap->add_option("--weights", uap_weights, "Detector weight file")->required();
    uap->add_option("--scenes", uap_scenes, "Scene directory")->required();
    uap->add_option("--loss", s.loss, "pc|pcb|tog")->capture_default_str();
    uap->add_option("--mode", s.mode, "fab|vanish")->capture_default_str();
    uap->add_option("--eps", s.eps, "L-inf budget in [0,1] units")
        ->capture_default_str();
    uap->add_option("--alpha", s.alpha, "Initial step size")
        ->capture_default_str();
    uap->add_option("--decay", s.decay, "Step-size decay per epoch")
        ->capture_default_str();
    uap->add_option("--iters", s.iters, "Epoch count")->capture_default_str();
    uap->add_option("--init", s.init, "zero|uniform")->capture_default_str();
    uap->add_option("--seed", s.attack_seed, "Seed for uniform init")
        ->capture_default_str();
    uap->add_option("--out", uap_out, "Perturbation file to write")->required();
    uap->add_option("--metrics", uap_metrics, "Per-epoch metric CSV");
    uap->callback([&] {
        const auto weights = hitm::io::load_weights(uap_weights);
        const auto scenes = hitm::io::load_scenes(uap_scenes);
        std::vector<hitm::Tensor> images;
        images.reserve(scenes.size());
        for (const auto& scene : scenes) images.push_back(scene.image);
        const auto cfg = attack_config_from(s);
        const hitm::NmsConfig nms_cfg{s.conf, s.iou};
        const auto outcome =
            hitm::attack::attack_universal(images, weights, cfg, nms_cfg);
        hitm::io::save_perturbation(uap_out, outcome.perturbation);
        write_metrics(uap_metrics, outcome.series);
        const auto& last = outcome.series.records.back();
        std::cout << "epochs=" << outcome.perturbation.iterations_done
                  << " mean_boxes=" << last.num_boxes
                  << " mean_loss=" << last.adv_loss << '\n'
                  << "wrote perturbation to " << uap_out << '\n';
    });

    // ------------------------------------------------------------------ eval
    auto* ev = app.add_subcommand(
        "eval", "Clean-vs-attacked metrics and AP over a scene set");
    ev->fallthrough();
    std::string ev_weights, ev_scenes, ev_uap, ev_metrics;
    ev->add_option("--weights", ev_weights, "Detector weight file")->required();
    ev->add_option("--scenes", ev_scenes, "Scene directory")->required();
    ev->add_option("--uap", ev_uap, "Perturbation file to apply")->required();
    ev->add_option("--metrics", ev_metrics, "Per-scene metric CSV");
    ev->callback([&] {
        const auto weights = hitm::io::load_weights(ev_weights);
        const auto scenes = hitm::io::load_scenes(ev_scenes);
        const auto delta = hitm::io::load_perturbation(ev_uap);
        const hitm::NmsConfig nms_cfg{s.conf, s.iou};

        hitm::metrics::MetricSeries series;
        std::vector<std::vector<hitm::Detection>> clean_dets, adv_dets;
        std::vector<hitm::GroundTruth> truths;
        double clean_boxes = 0.0, adv_boxes = 0.0;
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            const auto clean_raw = hitm::det::forward(weights, scenes[i].image);
            const auto adv_raw = hitm::det::forward(
                weights,
                hitm::attack::adversarial_image(scenes[i].image, delta.delta));
            const auto loss = hitm::attack::AdversarialLoss::make(
                delta.config.loss, delta.config.mode, clean_raw);
            series.records.push_back(
                {static_cast<int>(i),
                 hitm::metrics::mean_confidence_variation(adv_raw, clean_raw),
                 static_cast<double>(
                     hitm::metrics::number_of_boxes(adv_raw, nms_cfg)),
                 hitm::metrics::relative_box_variation(adv_raw, clean_raw,
                                                       nms_cfg),
                 loss.evaluate(adv_raw).value});
            clean_dets.push_back(hitm::nms(clean_raw, nms_cfg));
            adv_dets.push_back(hitm::nms(adv_raw, nms_cfg));
            truths.push_back(scenes[i].truth);
            clean_boxes += static_cast<double>(clean_dets.back().size());
            adv_boxes += static_cast<double>(adv_dets.back().size());
        }
        write_metrics(ev_metrics, series);

        const auto clean_ap = hitm::metrics::average_precision(clean_dets, truths);
        const auto adv_ap = hitm::metrics::average_precision(adv_dets, truths);
        const double n = static_cast<double>(scenes.size());
        double mcv = 0.0, rbv = 0.0;
        for (const auto& r : series.records) {
            mcv += r.mean_conf_variation;
            rbv += r.relative_box_variation;
        }
        std::cout << "scenes=" << scenes.size() << " family="
                  << scenes.front().family << '\n'
                  << "clean: boxes_mean=" << clean_boxes / n
                  << " map=" << clean_ap.map << '\n'
                  << "adv:   boxes_mean=" << adv_boxes / n
                  << " map=" << adv_ap.map << " mcv_mean=" << mcv / n
                  << " rbv_mean=" << rbv / n << '\n';
    });

    // ---------------------------------------------------------------- stream
    auto* st = app.add_subcommand("stream",
                                  "Frame-stream roles: source, inject, sink");
    st->require_subcommand(1);
    st->fallthrough();

    auto* src = st->add_subcommand("source", "Emit scenes as a frame stream");
    src->fallthrough();
    std::string src_scenes, src_tcp;
    src->add_option("--scenes", src_scenes, "Scene directory")->required();
    src->add_option("--fps", s.fps, "Throttle (0 = unthrottled)")
        ->capture_default_str();
    src->add_option("--tcp", src_tcp, "Connect and send to host:port "
                                      "(default: stdout)");
    src->callback([&] {
        const auto scenes = hitm::io::load_scenes(src_scenes);
        std::vector<hitm::Tensor> images;
        for (const auto& scene : scenes) images.push_back(scene.image);
        auto out = open_out(src_tcp);
        const auto report = hitm::stream::run_source(images, *out, s.fps);
        std::cerr << "source: sent " << report.frames << " frames\n";
    });

    auto* inj = st->add_subcommand("inject",
                                   "Add the perturbation to frames in transit");
    inj->fallthrough();
    std::string inj_uap, inj_weights, inj_tcp_in, inj_tcp_out;
    inj->add_option("--uap", inj_uap, "Perturbation file")->required();
    inj->add_flag("--online", s.online,
                  "One PGD step per frame instead of a fixed delta");
    inj->add_option("--weights", inj_weights,
                    "Detector weights (required with --online)");
    inj->add_option("--tcp-in", inj_tcp_in,
                    "Listen for the source on host:port (default: stdin)");
    inj->add_option("--tcp-out", inj_tcp_out,
                    "Connect and send to the sink at host:port "
                    "(default: stdout)");
    inj->callback([&] {
        auto delta = hitm::io::load_perturbation(inj_uap);
        hitm::det::DetectorWeights weights;
        if (s.online) {
            if (inj_weights.empty())
                throw std::runtime_error("--online requires --weights");
            weights = hitm::io::load_weights(inj_weights);
        }
        auto in = open_in(inj_tcp_in);
        auto out = open_out(inj_tcp_out);
        const auto report = hitm::stream::run_inject(
            *in, *out, std::move(delta),
            s.online ? hitm::stream::InjectMode::Online
                     : hitm::stream::InjectMode::Static,
            s.online ? &weights : nullptr);
        std::cerr << "inject: processed " << report.frames << " frames\n";
    });

    auto* snk = st->add_subcommand("sink", "Run detection on a frame stream");
    snk->fallthrough();
    std::string snk_weights, snk_tcp;
    snk->add_option("--weights", snk_weights, "Detector weight file")
        ->required();
    snk->add_option("--tcp", snk_tcp,
                    "Listen for frames on host:port (default: stdin)");
    snk->callback([&] {
        const auto weights = hitm::io::load_weights(snk_weights);
        auto in = open_in(snk_tcp);
        const hitm::NmsConfig nms_cfg{s.conf, s.iou};
        const auto report =
            hitm::stream::run_sink(*in, weights, nms_cfg, &std::cout);
        std::cout << "frames=" << report.frames.size()
                  << " seconds=" << report.seconds << " fps=" << report.fps
                  << '\n';
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message and usage hint
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
