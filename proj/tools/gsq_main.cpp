#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gsq/codec.h"
#include "gsq/container.h"
#include "gsq/metrics.h"
#include "gsq/trainer.h"

namespace fs = std::filesystem;
using namespace gsq;

namespace {

// Exit codes are a stable contract: 0 ok, 1 usage, 2 data/format, 3 numeric.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<Camera> read_camera_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open camera file " + path);
    std::vector<Camera> cams;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        Vec3 pos, look, up;
        double fov;
        int width, height;
        ls >> pos.x() >> pos.y() >> pos.z() >> look.x() >> look.y() >> look.z() >> up.x() >>
            up.y() >> up.z() >> fov >> width >> height;
        if (!ls) throw FormatError("malformed camera line: " + line);
        cams.push_back(Camera::look_at(pos, look, up, fov, width, height));
    }
    if (cams.empty()) throw FormatError("camera file has no cameras: " + path);
    return cams;
}

int cmd_gen(int scenes, int test_scenes, const std::string& out, uint64_t seed,
            const std::string& complexity) {
    const Complexity cx = complexity == "small" ? Complexity::Small : Complexity::Tiny;
    const DatasetSplit split = build_dataset(scenes, std::max(1, test_scenes), seed, cx);
    fs::create_directories(out);
    write_manifest(split, out + "/manifest.txt");
    for (const auto* list : {&split.train, &split.test}) {
        for (const SceneSpec& spec : *list) {
            const Scene arch = archived_scene(spec);
            write_ply(arch, out + "/" + spec.id + "_archived.ply");
            write_ply(simulate_change(arch, spec.change), out + "/" + spec.id + "_changed.ply");
        }
    }
    std::cout << "wrote " << split.train.size() << " train + " << split.test.size()
              << " test scenes to " << out << "\n";
    return kExitOk;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& config,
              const std::string& model_config, uint64_t seed) {
    DatasetSplit split = read_manifest(data + "/manifest.txt");
    TrainConfig tcfg;
    if (!config.empty()) tcfg = parse_train_config(config);
    if (seed != 0) tcfg.seed = seed;
    ModelConfig mcfg;
    if (!model_config.empty()) mcfg = load_model_config(model_config);
    if (static_cast<int>(split.train.size()) > tcfg.n_train_scenes)
        split.train.resize(tcfg.n_train_scenes);
    TrainResult result = train_loop(split, tcfg, mcfg);
    save_model(result.model, out);
    save_train_config(tcfg, out + "/train.cfg");
    write_train_log_csv(result.log, out + "/train_log.csv");
    std::cout << "trained on " << split.train.size() << " scenes for " << tcfg.epochs
              << " epochs; model written to " << out << "\n";
    return kExitOk;
}

int cmd_compress(const std::string& ply, const std::string& model_dir, const std::string& out) {
    CodecModel model = load_model(model_dir);
    if (!model.codebooks_ready()) throw ConfigError("model has no codebook pack");
    std::vector<std::string> warnings;
    const Scene scene = read_ply(ply, &warnings);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
    CodeStream codes = compress_scene(model, scene);
    write_scene_file(codes, out);

    StorageParams sp;
    sp.blocks_per_axis = codes.blocks_per_axis;
    sp.rvq_depth = codes.rvq_depth;
    sp.codebook_size = codes.codebook_size;
    sp.count = codes.block_count();
    const int64_t bits = storage_bits(sp, StorageMode::Icgs);
    if (bits != payload_bits(codes)) throw NumericError("storage accounting mismatch");
    std::cout << "blocks " << codes.block_count() << "\n";
    std::cout << "payload_bits " << bits << "\n";
    std::cout << "payload_bytes " << (bits + 7) / 8 << "\n";
    std::cout << "file_bytes " << fs::file_size(out) << "\n";
    return kExitOk;
}

int cmd_decompress(const std::string& gsq, const std::string& model_dir,
                   const std::vector<std::string>& images, const std::string& cameras,
                   const std::string& out, const std::vector<double>& bounds) {
    CodecModel model = load_model(model_dir);
    const CodeStream codes = read_scene_file(gsq);
    check_codebook_binding(codes, model.pack());

    Aabb box;
    if (!bounds.empty()) {
        if (bounds.size() != 6) throw FormatError("--bounds needs 6 numbers (lo xyz, hi xyz)");
        box.lo = Vec3(bounds[0], bounds[1], bounds[2]);
        box.hi = Vec3(bounds[3], bounds[4], bounds[5]);
    }

    std::vector<FeaturePyramid> pyramids;
    if (!images.empty()) {
        if (cameras.empty()) throw FormatError("--images requires --cameras");
        const std::vector<Camera> cams = read_camera_file(cameras);
        if (cams.size() != images.size())
            throw FormatError("camera count does not match image count");
        for (size_t i = 0; i < images.size(); ++i)
            pyramids.push_back(extract_feature_pyramid(read_png(images[i]), cams[i]));
    }
    const GridScene decoded =
        decompress_scene(model, codes, box, pyramids.empty() ? nullptr : &pyramids);
    write_ply(grid_to_scene(decoded), out);
    std::cout << "decoded " << decoded.cells.size() << " cells"
              << (pyramids.empty() ? " (unconditioned)" : " (image-conditioned)") << " to "
              << out << "\n";
    return kExitOk;
}

int cmd_render(const std::string& ply, const std::string& cameras, const std::string& out) {
    const Scene scene = read_ply(ply);
    const std::vector<Camera> cams = read_camera_file(cameras);
    fs::create_directories(out);
    for (size_t i = 0; i < cams.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "view%03zu.png", i);
        write_png(render(scene, cams[i]), out + "/" + name);
    }
    std::cout << "rendered " << cams.size() << " views to " << out << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& pred, const std::string& truth_dir, const std::string& out,
             const std::string& gsq_path) {
    const Scene decoded = read_ply(pred);
    const std::vector<Camera> cams = read_camera_file(truth_dir + "/cams.txt");
    std::vector<Image> truth;
    for (size_t i = 0; i < cams.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "view%03zu.png", i);
        truth.push_back(read_png(truth_dir + "/" + name));
    }
    EvalReport report = evaluate_scene_against_images(decoded, truth, cams);
    if (!gsq_path.empty()) report.storage_bits = payload_bits(read_scene_file(gsq_path));
    std::ofstream os(out);
    if (!os) throw FormatError("cannot open " + out);
    os << report.to_csv();
    std::cout << report.summary() << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gsq: block-quantized Gaussian splat scene codec"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    app.add_option("--seed", seed, "global seed")->capture_default_str();

    auto* gen = app.add_subcommand("gen", "generate a procedural dataset");
    int gen_scenes = 8, gen_test = 2;
    std::string gen_out = "data", gen_complexity = "tiny";
    gen->add_option("--scenes", gen_scenes, "training scene count")->capture_default_str();
    gen->add_option("--test-scenes", gen_test, "test scene count")->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--complexity", gen_complexity, "tiny|small")->capture_default_str();

    auto* train = app.add_subcommand("train", "train the codec on a dataset");
    std::string train_data, train_out = "model", train_cfg, train_mcfg;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "model output directory")->capture_default_str();
    train->add_option("--config", train_cfg, "training config (key = value)");
    train->add_option("--model-config", train_mcfg, "model config (key = value)");

    auto* compress = app.add_subcommand("compress", "compress a splat PLY into a .gsq archive");
    std::string c_ply, c_model, c_out = "scene.gsq";
    compress->add_option("ply", c_ply, "input scene.ply")->required();
    compress->add_option("--model", c_model, "model directory")->required();
    compress->add_option("--out", c_out, "output .gsq path")->capture_default_str();

    auto* decompress = app.add_subcommand("decompress", "decode a .gsq archive to a PLY");
    std::string d_gsq, d_model, d_cams, d_out = "scene.ply";
    std::vector<std::string> d_images;
    std::vector<double> d_bounds;
    decompress->add_option("gsq", d_gsq, "input .gsq path")->required();
    decompress->add_option("--model", d_model, "model directory")->required();
    decompress->add_option("--images", d_images, "conditioning images (PNG)");
    decompress->add_option("--cameras", d_cams, "camera file for the conditioning images");
    decompress->add_option("--out", d_out, "output .ply path")->capture_default_str();
    decompress->add_option("--bounds", d_bounds,
                           "scene bounds (lo xyz, hi xyz); default unit cube");

    auto* rendercmd = app.add_subcommand("render", "render a splat PLY from cameras");
    std::string r_ply, r_cams, r_out = "renders";
    rendercmd->add_option("ply", r_ply, "input scene.ply")->required();
    rendercmd->add_option("--camera", r_cams, "camera file")->required();
    rendercmd->add_option("--out", r_out, "output directory")->capture_default_str();

    auto* evalcmd = app.add_subcommand("eval", "evaluate a decoded scene against ground truth");
    std::string e_pred, e_truth, e_out = "report.csv", e_gsq;
    evalcmd->add_option("--pred", e_pred, "decoded scene.ply")->required();
    evalcmd->add_option("--truth", e_truth, "directory with cams.txt and viewNNN.png")
        ->required();
    evalcmd->add_option("--out", e_out, "report CSV path")->capture_default_str();
    evalcmd->add_option("--gsq", e_gsq, "scene archive to report payload storage for");

    for (CLI::App* sub : {gen, train, compress, decompress, rendercmd, evalcmd})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_scenes, gen_test, gen_out, seed, gen_complexity);
        if (train->parsed()) return cmd_train(train_data, train_out, train_cfg, train_mcfg, seed);
        if (compress->parsed()) return cmd_compress(c_ply, c_model, c_out);
        if (decompress->parsed())
            return cmd_decompress(d_gsq, d_model, d_images, d_cams, d_out, d_bounds);
        if (rendercmd->parsed()) return cmd_render(r_ply, r_cams, r_out);
        if (evalcmd->parsed()) return cmd_eval(e_pred, e_truth, e_out, e_gsq);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
