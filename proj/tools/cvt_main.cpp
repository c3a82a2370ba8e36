// cvt: cross-view transformer pipeline driver.
//
// Subcommands: generate-data, train, eval, ablate, dropout-test,
// visualize-attention, gradcheck. Exit codes: 0 success, 1 domain error
// (one-line diagnostic on stderr), 2 usage error (usage text).
// Every run writes run.json (effective config, seed, version) under --out.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "cvt/ablation.hpp"
#include "cvt/eval.hpp"
#include "cvt/gradcheck.hpp"
#include "cvt/model.hpp"
#include "cvt/scene.hpp"
#include "cvt/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config file: flat JSON object or key=value lines ('#' comments).
// Keys use the long option names without the leading dashes.
std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::map<std::string, std::string> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const std::exception& e) {
      throw std::runtime_error("config: parse error in " + path + ": " + e.what());
    }
    for (const auto& [key, value] : j.items())
      out[key] = value.is_string() ? value.get<std::string>() : value.dump();
    return out;
  }
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto notspace = line.find_first_not_of(" \t\r\n");
    if (notspace == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config: line " + std::to_string(lineno) + " of " + path +
                       " is not key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r\n");
      const auto e = s.find_last_not_of(" \t\r\n");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// Merge config-file values under CLI flags: flags win, unknown keys are
// rejected, every key must name a declared option of the subcommand.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  const auto kv = load_config_file(path);
  for (const auto& [key, value] : kv) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt) throw UsageError("config: unknown key '" + key + "' for subcommand " +
                               cmd->get_name());
    if (opt->count() > 0) continue;  // explicit flag overrides the file
    if (opt->get_expected_min() == 0)
      opt->add_result(value == "true" || value == "1" ? "true" : "false");
    else
      opt->add_result(value);
  }
  // re-run parsing hooks so the values land in the bound variables
  for (const auto& [key, value] : kv) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt && opt->count() > 0) opt->run_callback();
  }
}

void write_run_json(const std::string& out_dir, const std::string& command, const json& config) {
  fs::create_directories(out_dir);
  json j;
  j["command"] = command;
  j["version"] = kVersion;
  j["config"] = config;
  std::ofstream os(fs::path(out_dir) / "run.json", std::ios::trunc);
  if (!os) throw std::runtime_error("run.json: cannot write under " + out_dir);
  os << j.dump(2) << "\n";
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoull(tok));
  if (out.empty()) throw UsageError("expected a comma-separated seed list, got '" + s + "'");
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

// Dataset-dependent model config: image and output dims come from the
// manifest, everything else from flags.
cvt::ModelConfig model_config_for(const cvt::Sample& probe, int d, int heads, int d_head,
                                  int latent, const std::string& embedding, bool no_phi_keys,
                                  bool no_refinement, double temperature) {
  cvt::ModelConfig cfg;
  cfg.d = d;
  cfg.heads = heads;
  cfg.d_head = d_head;
  cfg.latent_h = latent;
  cfg.latent_w = latent;
  cfg.image_h = probe.image_h;
  cfg.image_w = probe.image_w;
  cfg.out_h = probe.grid.h;
  cfg.out_w = probe.grid.w;
  cfg.channels = probe.grid.channels;
  cfg.embedding = cvt::embedding_mode_from_name(embedding);
  cfg.keys_use_phi = !no_phi_keys;
  cfg.refine_queries = !no_refinement;
  cfg.temperature = temperature;
  cfg.rig_cameras = static_cast<int>(probe.calibs.size());
  cfg.validate();
  return cfg;
}

struct CommonModelFlags {
  int d = 32;
  int heads = 4;
  int d_head = 8;
  int latent = 8;
  std::string embedding = "camera-aware-linear";
  bool no_phi_keys = false;
  bool no_refinement = false;
  double temperature = 1.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d", d, "embedding width D");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--d-head", d_head, "per-head width");
    cmd->add_option("--latent", latent, "latent grid side length");
    cmd->add_option("--embedding", embedding,
                    "delta mode: none|learned-per-camera|camera-aware-fourier|camera-aware-linear");
    cmd->add_flag("--no-phi-keys", no_phi_keys, "drop image features from attention keys");
    cmd->add_flag("--no-refinement", no_refinement, "freeze queries at the initial map embedding");
    cmd->add_option("--temperature", temperature, "softmax temperature");
  }

  json to_json() const {
    return {{"d", d},
            {"heads", heads},
            {"d_head", d_head},
            {"latent", latent},
            {"embedding", embedding},
            {"no_phi_keys", no_phi_keys},
            {"no_refinement", no_refinement},
            {"temperature", temperature}};
  }
};

int run_cli(int argc, char** argv) {
  CLI::App app{"cross-view transformer for map-view segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  int threads = 1;
  app.add_option("--threads", threads, "worker thread cap (1 = bit-exact reproducible)");

  // ---- generate-data ----
  auto* gen = app.add_subcommand("generate-data", "synthesize a multi-camera dataset");
  std::string gen_out, gen_config;
  std::uint64_t gen_seed = 1;
  int gen_count = 16;
  cvt::SceneConfig scene_cfg;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--config", gen_config, "config file (key=value or JSON)");
  gen->add_option("--seed", gen_seed, "base seed; sample i uses seed+i");
  gen->add_option("--count", gen_count, "number of samples");
  gen->add_option("--cameras", scene_cfg.rig.cameras, "rig size");
  gen->add_option("--image-h", scene_cfg.rig.image_h, "image height");
  gen->add_option("--image-w", scene_cfg.rig.image_w, "image width");
  gen->add_option("--grid-h", scene_cfg.grid_h, "label grid rows");
  gen->add_option("--grid-w", scene_cfg.grid_w, "label grid cols");
  gen->add_option("--extent-x", scene_cfg.extent_x, "map extent along x (m)");
  gen->add_option("--extent-y", scene_cfg.extent_y, "map extent along y (m)");
  gen->add_option("--min-boxes", scene_cfg.min_boxes, "minimum vehicles");
  gen->add_option("--max-boxes", scene_cfg.max_boxes, "maximum vehicles");

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  std::string train_data, train_out, train_config;
  cvt::TrainConfig tcfg;
  CommonModelFlags train_model;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--config", train_config, "config file (key=value or JSON)");
  train->add_option("--seed", tcfg.seed, "training seed");
  train->add_flag("--verbose", tcfg.verbose, "per-epoch progress on stderr");
  train->add_option("--epochs", tcfg.epochs, "epochs");
  train->add_option("--batch", tcfg.batch_size, "batch size");
  train->add_option("--lr", tcfg.max_lr, "one-cycle peak learning rate");
  train->add_option("--weight-decay", tcfg.weight_decay, "AdamW weight decay");
  train->add_option("--gamma", tcfg.focal_gamma, "focal loss gamma");
  train->add_option("--alpha", tcfg.focal_alpha, "focal loss alpha");
  train_model.attach(train);

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_data, eval_ckpt, eval_out, eval_bins = "0,5,10,15,20", eval_split = "val";
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->add_option("--distance-bins", eval_bins, "comma-separated distances (m)");
  eval->add_option("--split", eval_split, "all|train|val");

  // ---- dropout-test ----
  auto* drop = app.add_subcommand("dropout-test", "camera-dropout robustness sweep");
  std::string drop_data, drop_ckpt, drop_out;
  int drop_max = 2, drop_trials = 3;
  std::uint64_t drop_seed = 1;
  drop->add_option("--data", drop_data, "dataset directory")->required();
  drop->add_option("--checkpoint", drop_ckpt, "checkpoint directory")->required();
  drop->add_option("--out", drop_out, "output directory")->required();
  drop->add_option("--max-drop", drop_max, "largest number of dropped cameras");
  drop->add_option("--trials", drop_trials, "random subsets per dropout count");
  drop->add_option("--seed", drop_seed, "subset-selection seed");

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "train and score attention-mechanism variants");
  std::string ab_data, ab_out, ab_seeds = "1,2,3", ab_config;
  CommonModelFlags ab_model;
  cvt::TrainConfig ab_tcfg;
  ablate->add_option("--data", ab_data, "dataset directory")->required();
  ablate->add_option("--out", ab_out, "output directory")->required();
  ablate->add_option("--config", ab_config, "config file (key=value or JSON)");
  ablate->add_option("--seeds", ab_seeds, "comma-separated training seeds (>= 3)");
  ablate->add_option("--epochs", ab_tcfg.epochs, "epochs per variant");
  ablate->add_option("--batch", ab_tcfg.batch_size, "batch size");
  ablate->add_option("--lr", ab_tcfg.max_lr, "one-cycle peak learning rate");
  ablate->add_option("--weight-decay", ab_tcfg.weight_decay, "AdamW weight decay");
  ab_model.attach(ablate);

  // ---- visualize-attention ----
  auto* viz = app.add_subcommand("visualize-attention", "export attention maps for query cells");
  std::string viz_data, viz_ckpt, viz_out, viz_cells;
  int viz_sample = 0, viz_auto = 0;
  viz->add_option("--data", viz_data, "dataset directory")->required();
  viz->add_option("--checkpoint", viz_ckpt, "checkpoint directory")->required();
  viz->add_option("--out", viz_out, "output directory")->required();
  viz->add_option("--sample", viz_sample, "sample index within the dataset");
  viz->add_option("--cells", viz_cells, "query cells as i,j;i,j;...");
  viz->add_option("--auto-cells", viz_auto, "pick up to N vehicle-occupied query cells");

  // ---- gradcheck ----
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks for ops and the model");
  std::string gc_out;
  std::uint64_t gc_seed = 42;
  gc->add_option("--out", gc_out, "output directory")->required();
  gc->add_option("--seed", gc_seed, "input seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic
    return 2;
  }
  cvt::set_threads(threads);

  // ------------------------------------------------------------------
  if (gen->parsed()) {
    apply_config_file(gen, gen_config);
    if (gen_count < 1) throw std::runtime_error("generate-data: count must be >= 1");
    cvt::generate_dataset(scene_cfg, gen_seed, gen_count, gen_out);
    write_run_json(gen_out, "generate-data",
                   {{"seed", gen_seed},
                    {"count", gen_count},
                    {"threads", threads},
                    {"cameras", scene_cfg.rig.cameras},
                    {"image_h", scene_cfg.rig.image_h},
                    {"image_w", scene_cfg.rig.image_w},
                    {"grid_h", scene_cfg.grid_h},
                    {"grid_w", scene_cfg.grid_w},
                    {"extent_x", scene_cfg.extent_x},
                    {"extent_y", scene_cfg.extent_y},
                    {"min_boxes", scene_cfg.min_boxes},
                    {"max_boxes", scene_cfg.max_boxes}});
    std::printf("wrote %d samples under %s\n", gen_count, gen_out.c_str());
    return 0;
  }

  if (train->parsed()) {
    apply_config_file(train, train_config);
    const auto all = cvt::load_samples(train_data);
    std::vector<cvt::Sample> train_set, val_set;
    cvt::split_dataset(all, train_set, val_set);
    const auto cfg = model_config_for(all[0], train_model.d, train_model.heads,
                                      train_model.d_head, train_model.latent,
                                      train_model.embedding, train_model.no_phi_keys,
                                      train_model.no_refinement, train_model.temperature);
    auto params = cvt::ModelParams<float>::init(cfg, tcfg.seed);
    auto trainable = params.trainable();
    auto state = cvt::AdamWState<float>::init(trainable);
    const auto result = cvt::train_run(params, cfg, tcfg, train_set, val_set, &state);

    fs::create_directories(train_out);
    {
      std::ofstream os(fs::path(train_out) / "history.csv", std::ios::trunc);
      os << cvt::history_csv(result.history);
    }
    cvt::save_checkpoint((fs::path(train_out) / "checkpoint").string(), params, cfg, &state);
    json config = train_model.to_json();
    config["seed"] = tcfg.seed;
    config["epochs"] = tcfg.epochs;
    config["batch"] = tcfg.batch_size;
    config["lr"] = tcfg.max_lr;
    config["weight_decay"] = tcfg.weight_decay;
    config["gamma"] = tcfg.focal_gamma;
    config["alpha"] = tcfg.focal_alpha;
    config["data"] = train_data;
    config["threads"] = threads;
    config["train_samples"] = train_set.size();
    config["val_samples"] = val_set.size();
    write_run_json(train_out, "train", config);
    const auto& last = result.history.back();
    std::printf("final epoch %d: loss %.6f, val IoU vehicle %.4f driveable %.4f\n", last.epoch,
                last.train_loss, last.val_iou_vehicle, last.val_iou_driveable);
    return 0;
  }

  if (eval->parsed()) {
    auto ckpt = cvt::load_checkpoint(eval_ckpt);
    const auto all = cvt::load_samples(eval_data);
    std::vector<cvt::Sample> train_set, val_set;
    cvt::split_dataset(all, train_set, val_set);
    const auto& samples = eval_split == "all" ? all : (eval_split == "train" ? train_set : val_set);
    if (samples.empty()) throw std::runtime_error("eval: split '" + eval_split + "' is empty");
    if (samples[0].grid.h != ckpt.model_cfg.out_h || samples[0].grid.w != ckpt.model_cfg.out_w ||
        samples[0].image_h != ckpt.model_cfg.image_h ||
        samples[0].image_w != ckpt.model_cfg.image_w)
      throw std::runtime_error("eval: dataset dims do not match the checkpoint model config");

    const auto overall = cvt::evaluate_model(ckpt.params, ckpt.model_cfg, samples);
    const auto bins =
        cvt::distance_binned_iou(ckpt.params, ckpt.model_cfg, samples, parse_double_list(eval_bins));

    fs::create_directories(eval_out);
    std::ofstream os(fs::path(eval_out) / "report.csv", std::ios::trunc);
    os << "metric,d_min,iou_vehicle,flag_vehicle,iou_driveable,flag_driveable\n";
    char line[256];
    std::snprintf(line, sizeof(line), "overall,,%.9g,%d,%.9g,%d\n", overall[0].value,
                  overall[0].empty_union ? 1 : 0, overall[1].value, overall[1].empty_union ? 1 : 0);
    os << line;
    for (const auto& bin : bins) {
      std::snprintf(line, sizeof(line), "distance,%.9g,%.9g,%d,%.9g,%d\n", bin.d_min,
                    bin.per_channel[0].value, bin.per_channel[0].empty_union ? 1 : 0,
                    bin.per_channel[1].value, bin.per_channel[1].empty_union ? 1 : 0);
      os << line;
    }
    write_run_json(eval_out, "eval",
                   {{"data", eval_data},
                    {"checkpoint", eval_ckpt},
                    {"split", eval_split},
                    {"distance_bins", eval_bins},
                    {"threads", threads},
                    {"samples", samples.size()}});
    std::printf("IoU vehicle %.4f driveable %.4f over %zu samples\n", overall[0].value,
                overall[1].value, samples.size());
    return 0;
  }

  if (drop->parsed()) {
    auto ckpt = cvt::load_checkpoint(drop_ckpt);
    const auto all = cvt::load_samples(drop_data);
    std::vector<cvt::Sample> train_set, val_set;
    cvt::split_dataset(all, train_set, val_set);
    const auto& samples = val_set.empty() ? all : val_set;
    const int rig = static_cast<int>(samples[0].calibs.size());
    if (drop_max >= rig)
      throw std::runtime_error("dropout-test: max-drop " + std::to_string(drop_max) +
                               " must be below the rig size " + std::to_string(rig));
    fs::create_directories(drop_out);
    std::ofstream os(fs::path(drop_out) / "dropout.csv", std::ios::trunc);
    os << "dropped,iou_vehicle,iou_driveable\n";
    for (int m = 0; m <= drop_max; ++m) {
      const auto point =
          cvt::camera_dropout_eval(ckpt.params, ckpt.model_cfg, samples, m, drop_trials, drop_seed);
      char line[128];
      std::snprintf(line, sizeof(line), "%d,%.9g,%.9g\n", m, point.per_channel[0].value,
                    point.per_channel[1].value);
      os << line;
      std::printf("drop %d: IoU vehicle %.4f driveable %.4f\n", m, point.per_channel[0].value,
                  point.per_channel[1].value);
    }
    write_run_json(drop_out, "dropout-test",
                   {{"data", drop_data},
                    {"checkpoint", drop_ckpt},
                    {"max_drop", drop_max},
                    {"trials", drop_trials},
                    {"seed", drop_seed},
                    {"threads", threads}});
    return 0;
  }

  if (ablate->parsed()) {
    apply_config_file(ablate, ab_config);
    const auto seeds = parse_seed_list(ab_seeds);
    const auto all = cvt::load_samples(ab_data);
    std::vector<cvt::Sample> train_set, val_set;
    cvt::split_dataset(all, train_set, val_set);
    const auto base = model_config_for(all[0], ab_model.d, ab_model.heads, ab_model.d_head,
                                       ab_model.latent, ab_model.embedding, ab_model.no_phi_keys,
                                       ab_model.no_refinement, ab_model.temperature);
    const auto rows = cvt::run_ablation_suite(train_set, val_set, base, ab_tcfg, seeds);
    fs::create_directories(ab_out);
    {
      std::ofstream os(fs::path(ab_out) / "ablation.csv", std::ios::trunc);
      os << cvt::ablation_csv(rows);
    }
    for (const char* name :
         {"full", "no-delta", "no-phi-keys", "no-refinement", "learned-per-camera", "fourier"})
      std::printf("%-20s median vehicle IoU %.4f\n", name, cvt::median_iou(rows, name));
    json config = ab_model.to_json();
    config["seeds"] = ab_seeds;
    config["epochs"] = ab_tcfg.epochs;
    config["batch"] = ab_tcfg.batch_size;
    config["lr"] = ab_tcfg.max_lr;
    config["data"] = ab_data;
    config["threads"] = threads;
    write_run_json(ab_out, "ablate", config);
    return 0;
  }

  if (viz->parsed()) {
    auto ckpt = cvt::load_checkpoint(viz_ckpt);
    const auto dirs = cvt::list_sample_dirs(viz_data);
    if (viz_sample < 0 || viz_sample >= static_cast<int>(dirs.size()))
      throw std::runtime_error("visualize-attention: sample index " + std::to_string(viz_sample) +
                               " outside the dataset of " + std::to_string(dirs.size()));
    const auto sample = cvt::read_sample(dirs[viz_sample]);

    std::vector<std::pair<int, int>> cells;
    if (!viz_cells.empty()) {
      std::istringstream is(viz_cells);
      std::string pair;
      while (std::getline(is, pair, ';')) {
        const auto comma = pair.find(',');
        if (comma == std::string::npos)
          throw UsageError("visualize-attention: cells must be i,j;i,j");
        cells.emplace_back(std::stoi(pair.substr(0, comma)), std::stoi(pair.substr(comma + 1)));
      }
    }
    if (viz_auto > 0) {
      // vehicle-occupied latent cells: any vehicle label inside the cell's
      // out_h/latent_h x out_w/latent_w footprint
      const auto& cfg = ckpt.model_cfg;
      const int sy = cfg.out_h / cfg.latent_h, sx = cfg.out_w / cfg.latent_w;
      for (int i = 0; i < cfg.latent_h && static_cast<int>(cells.size()) < viz_auto; ++i)
        for (int j = 0; j < cfg.latent_w && static_cast<int>(cells.size()) < viz_auto; ++j) {
          bool occupied = false;
          for (int y = i * sy; y < (i + 1) * sy && !occupied; ++y)
            for (int x = j * sx; x < (j + 1) * sx && !occupied; ++x)
              occupied = sample.label[static_cast<std::size_t>(y) * cfg.out_w + x] != 0;
          if (occupied) cells.emplace_back(i, j);
        }
    }
    if (cells.empty())
      throw std::runtime_error("visualize-attention: no query cells given (use --cells or --auto-cells)");

    cvt::export_attention_maps(ckpt.params, ckpt.model_cfg, sample, cells, viz_out);
    write_run_json(viz_out, "visualize-attention",
                   {{"data", viz_data},
                    {"checkpoint", viz_ckpt},
                    {"sample", viz_sample},
                    {"cells", viz_cells},
                    {"auto_cells", viz_auto},
                    {"threads", threads}});
    std::printf("exported %zu query cells\n", cells.size());
    return 0;
  }

  if (gc->parsed()) {
    const auto entries = cvt::run_gradcheck(gc_seed, true);
    fs::create_directories(gc_out);
    std::ofstream os(fs::path(gc_out) / "gradcheck.csv", std::ios::trunc);
    os << "check,max_rel_err,tolerance,pass\n";
    bool all_pass = true;
    for (const auto& e : entries) {
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%.6e,%.0e,%d\n", e.name.c_str(), e.max_rel_err,
                    e.tolerance, e.pass() ? 1 : 0);
      os << line;
      std::printf("%-44s %.3e  (tol %.0e)  %s\n", e.name.c_str(), e.max_rel_err, e.tolerance,
                  e.pass() ? "ok" : "FAIL");
      all_pass = all_pass && e.pass();
    }
    write_run_json(gc_out, "gradcheck", {{"seed", gc_seed}, {"threads", threads}});
    if (!all_pass) throw std::runtime_error("gradcheck: tolerances exceeded");
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
