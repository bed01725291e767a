#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hitm/attack.hpp"
#include "hitm/detector.hpp"
#include "hitm/ppm.hpp"
#include "hitm/scenes.hpp"
#include "hitm/tensor.hpp"

// File formats:
//   weights       "PCBWGT01" + u32-LE JSON header length + JSON + f64-LE payload
//   perturbation  "PCBUAP01" + same layout
//   scene dirs    frame_NNNNNN.ppm files + truth.json
// All multi-byte integers and floats are little-endian regardless of host.

namespace hitm::io {

using nlohmann::json;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4)
        throw std::runtime_error(std::string(what) + ": truncated length field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64_payload(std::ostream& out, const std::vector<double>& data) {
    for (double d : data) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i)
            b[i] = static_cast<unsigned char>(bits >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
    }
}

inline void read_f64_payload(std::istream& in, std::vector<double>& data,
                             const char* what) {
    for (double& d : data) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        if (in.gcount() != 8)
            throw std::runtime_error(std::string(what) + ": truncated payload");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        d = std::bit_cast<double>(bits);
    }
}

inline void check_magic(std::istream& in, const char* magic, const char* what) {
    char got[8];
    in.read(got, 8);
    if (in.gcount() != 8 || std::memcmp(got, magic, 8) != 0)
        throw std::runtime_error(std::string(what) + ": bad magic, expected " +
                                 magic);
}

inline json read_header(std::istream& in, const char* what) {
    const std::uint32_t len = read_u32(in, what);
    if (len > (1u << 20))
        throw std::runtime_error(std::string(what) + ": oversized header");
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (static_cast<std::uint32_t>(in.gcount()) != len)
        throw std::runtime_error(std::string(what) + ": truncated header");
    return json::parse(text);
}

inline void write_header(std::ostream& out, const json& header) {
    const std::string text = header.dump();
    write_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline std::vector<std::pair<const char*, Tensor*>> weight_layers(
    det::DetectorWeights& w) {
    return {{"conv1.kernels", &w.conv1.kernels}, {"conv1.bias", &w.conv1.bias},
            {"conv2.kernels", &w.conv2.kernels}, {"conv2.bias", &w.conv2.bias},
            {"conv3.kernels", &w.conv3.kernels}, {"conv3.bias", &w.conv3.bias},
            {"head.kernels", &w.head.kernels},   {"head.bias", &w.head.bias}};
}

inline std::vector<std::pair<const char*, const Tensor*>> weight_layers(
    const det::DetectorWeights& w) {
    std::vector<std::pair<const char*, const Tensor*>> out;
    for (const auto& [name, tensor] :
         weight_layers(const_cast<det::DetectorWeights&>(w)))
        out.emplace_back(name, tensor);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------- weights

inline void save_weights(std::ostream& out, const det::DetectorWeights& w) {
    json header;
    header["grid"] = w.grid;
    header["anchors_per_cell"] = w.anchors_per_cell;
    header["num_classes"] = w.num_classes;
    header["anchor_priors"] = w.anchor_priors;
    json layers = json::array();
    for (const auto& [name, tensor] : detail::weight_layers(w))
        layers.push_back({{"name", name}, {"shape", tensor->shape}});
    header["layers"] = layers;
    out.write("PCBWGT01", 8);
    detail::write_header(out, header);
    for (const auto& [name, tensor] : detail::weight_layers(w))
        detail::write_f64_payload(out, tensor->data);
    if (!out) throw std::runtime_error("weights: write failed");
}

inline void save_weights(const std::string& path, const det::DetectorWeights& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("weights: cannot open " + path);
    save_weights(out, w);
}

inline det::DetectorWeights load_weights(std::istream& in) {
    detail::check_magic(in, "PCBWGT01", "weights");
    const json header = detail::read_header(in, "weights");
    det::DetectorWeights w = det::DetectorWeights::zeros();
    w.grid = header.at("grid").get<int>();
    w.anchors_per_cell = header.at("anchors_per_cell").get<int>();
    w.num_classes = header.at("num_classes").get<int>();
    w.anchor_priors =
        header.at("anchor_priors").get<std::vector<std::array<double, 2>>>();
    const auto layers = detail::weight_layers(w);
    const json& listed = header.at("layers");
    if (listed.size() != layers.size())
        throw std::runtime_error("weights: header lists " +
                                 std::to_string(listed.size()) +
                                 " layers, expected " +
                                 std::to_string(layers.size()));
    // The payload follows the header's layer order; require the canonical one.
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& [name, tensor] = layers[i];
        if (listed[i].at("name").get<std::string>() != name)
            throw std::runtime_error(std::string("weights: expected layer ") +
                                     name + " at position " + std::to_string(i));
        if (listed[i].at("shape").get<std::vector<std::size_t>>() != tensor->shape)
            throw std::runtime_error(std::string("weights: layer ") + name +
                                     " has unexpected shape in header");
        detail::read_f64_payload(in, tensor->data, "weights");
    }
    w.check_architecture();
    return w;
}

inline det::DetectorWeights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("weights: cannot open " + path);
    try {
        return load_weights(in);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

// ----------------------------------------------------------- perturbation

inline const char* loss_name(attack::LossKind k) {
    switch (k) {
        case attack::LossKind::PC: return "pc";
        case attack::LossKind::PCB: return "pcb";
        case attack::LossKind::TOG: return "tog";
    }
    throw std::logic_error("loss_name: bad kind");
}

inline attack::LossKind loss_from_name(const std::string& name) {
    if (name == "pc") return attack::LossKind::PC;
    if (name == "pcb") return attack::LossKind::PCB;
    if (name == "tog") return attack::LossKind::TOG;
    throw std::runtime_error("unknown loss kind '" + name +
                             "' (expected pc|pcb|tog)");
}

inline const char* mode_name(attack::Mode m) {
    return m == attack::Mode::Fabrication ? "fabrication" : "vanishing";
}

inline attack::Mode mode_from_name(const std::string& name) {
    if (name == "fabrication" || name == "fab") return attack::Mode::Fabrication;
    if (name == "vanishing" || name == "vanish") return attack::Mode::Vanishing;
    throw std::runtime_error("unknown attack mode '" + name +
                             "' (expected fab|vanish)");
}

inline const char* init_name(attack::Init i) {
    return i == attack::Init::Zero ? "zero" : "uniform";
}

inline attack::Init init_from_name(const std::string& name) {
    if (name == "zero") return attack::Init::Zero;
    if (name == "uniform") return attack::Init::Uniform;
    throw std::runtime_error("unknown init kind '" + name +
                             "' (expected zero|uniform)");
}

inline void save_perturbation(std::ostream& out, const attack::Perturbation& p) {
    json header;
    header["shape"] = p.delta.shape;
    header["epsilon"] = p.config.epsilon;
    header["decay"] = p.config.decay;
    header["alpha"] = p.config.alpha;
    header["iterations"] = p.config.iterations;
    header["loss"] = loss_name(p.config.loss);
    header["mode"] = mode_name(p.config.mode);
    header["init"] = init_name(p.config.init);
    header["seed"] = p.config.seed;
    header["iterations_done"] = p.iterations_done;
    out.write("PCBUAP01", 8);
    detail::write_header(out, header);
    detail::write_f64_payload(out, p.delta.data);
    if (!out) throw std::runtime_error("perturbation: write failed");
}

inline void save_perturbation(const std::string& path,
                              const attack::Perturbation& p) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("perturbation: cannot open " + path);
    save_perturbation(out, p);
}

inline attack::Perturbation load_perturbation(std::istream& in) {
    detail::check_magic(in, "PCBUAP01", "perturbation");
    const json header = detail::read_header(in, "perturbation");
    attack::Perturbation p;
    const auto shape = header.at("shape").get<std::vector<std::size_t>>();
    p.delta = Tensor(shape);
    p.config.epsilon = header.at("epsilon").get<double>();
    p.config.decay = header.at("decay").get<double>();
    p.config.alpha = header.at("alpha").get<double>();
    p.config.iterations = header.at("iterations").get<int>();
    p.config.loss = loss_from_name(header.at("loss").get<std::string>());
    p.config.mode = mode_from_name(header.at("mode").get<std::string>());
    p.config.init = init_from_name(header.at("init").get<std::string>());
    p.config.seed = header.at("seed").get<std::uint64_t>();
    p.iterations_done = header.at("iterations_done").get<int>();
    detail::read_f64_payload(in, p.delta.data, "perturbation");
    p.config.validate();
    if (p.delta.max_abs() > p.config.epsilon + 1e-15)
        throw std::runtime_error("perturbation: payload exceeds epsilon budget");
    return p;
}

inline attack::Perturbation load_perturbation(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("perturbation: cannot open " + path);
    try {
        return load_perturbation(in);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

// ------------------------------------------------------------ scene dirs

inline std::string frame_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%06d.ppm", index);
    return buf;
}

inline void save_scenes(const std::string& dir,
                        const std::vector<scenes::Scene>& list) {
    if (list.empty())
        throw std::invalid_argument("save_scenes: empty scene list");
    std::filesystem::create_directories(dir);
    json frames = json::array();
    for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string name = frame_filename(static_cast<int>(i));
        save_ppm((std::filesystem::path(dir) / name).string(), list[i].image);
        json objects = json::array();
        for (const TruthBox& tb : list[i].truth)
            objects.push_back({{"class", tb.cls},
                               {"cx", tb.box.cx},
                               {"cy", tb.box.cy},
                               {"w", tb.box.w},
                               {"h", tb.box.h}});
        frames.push_back({{"file", name}, {"objects", objects}});
    }
    json doc;
    doc["family"] = list.front().family;
    doc["frames"] = frames;
    std::ofstream out(std::filesystem::path(dir) / "truth.json");
    if (!out) throw std::runtime_error("save_scenes: cannot write truth.json");
    out << doc.dump(2) << '\n';
}

inline std::vector<scenes::Scene> load_scenes(const std::string& dir) {
    const std::filesystem::path truth_path =
        std::filesystem::path(dir) / "truth.json";
    std::ifstream in(truth_path);
    if (!in)
        throw std::runtime_error("load_scenes: cannot open " +
                                 truth_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(truth_path.string() + ": " + e.what());
    }
    const std::string family = doc.at("family").get<std::string>();
    std::vector<scenes::Scene> list;
    for (const json& frame : doc.at("frames")) {
        scenes::Scene scene;
        scene.family = family;
        scene.image = load_ppm(
            (std::filesystem::path(dir) / frame.at("file").get<std::string>())
                .string());
        for (const json& obj : frame.at("objects")) {
            TruthBox tb;
            tb.cls = obj.at("class").get<int>();
            tb.box = {obj.at("cx").get<double>(), obj.at("cy").get<double>(),
                      obj.at("w").get<double>(), obj.at("h").get<double>()};
            scene.truth.push_back(tb);
        }
        list.push_back(std::move(scene));
    }
    if (list.empty())
        throw std::runtime_error("load_scenes: no frames listed in " +
                                 truth_path.string());
    return list;
}

/// Parses a family config from JSON, rejecting unknown keys so config typos
/// fail loudly.
inline scenes::FamilyConfig family_config_from_json(const json& j) {
    static const char* known[] = {"id",    "background_mean", "background_jitter",
                                  "noise", "min_size",        "max_size"};
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok)
            throw std::runtime_error("family config: unknown key '" + key + "'");
    }
    scenes::FamilyConfig f;
    if (j.contains("id")) f.id = j.at("id").get<std::string>();
    if (j.contains("background_mean"))
        f.background_mean = j.at("background_mean").get<std::array<double, 3>>();
    if (j.contains("background_jitter"))
        f.background_jitter = j.at("background_jitter").get<double>();
    if (j.contains("noise")) f.noise = j.at("noise").get<double>();
    if (j.contains("min_size")) f.min_size = j.at("min_size").get<double>();
    if (j.contains("max_size")) f.max_size = j.at("max_size").get<double>();
    f.validate();
    return f;
}

}  // namespace hitm::io
