#include "cvt/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cvt/bt1.hpp"

namespace fs = std::filesystem;

namespace cvt {

std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_iou_vehicle,val_iou_driveable,lr\n";
  char line[256];
  for (const auto& e : history) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss,
                  e.val_iou_vehicle, e.val_iou_driveable, e.lr);
    os << line;
  }
  return os.str();
}

void split_dataset(const std::vector<Sample>& all, std::vector<Sample>& train,
                   std::vector<Sample>& val) {
  train.clear();
  val.clear();
  for (std::size_t i = 0; i < all.size(); ++i)
    (i % 5 == 4 ? val : train).push_back(all[i]);
}

std::vector<Sample> load_samples(const std::string& dataset_dir, int limit) {
  std::vector<Sample> out;
  for (const auto& dir : list_sample_dirs(dataset_dir)) {
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    out.push_back(read_sample(dir));
  }
  if (out.empty()) throw std::runtime_error("dataset: no samples under " + dataset_dir);
  return out;
}

TrainResult train_run(ModelParams<float>& params, const ModelConfig& model_cfg,
                      const TrainConfig& cfg, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, AdamWState<float>* resume_state) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train_run: empty training set");

  auto trainable = params.trainable();
  AdamWState<float> local_state = AdamWState<float>::init(trainable);
  AdamWState<float>& state = resume_state ? *resume_state : local_state;
  if (state.m.size() != trainable.size())
    throw std::invalid_argument("train_run: resume state does not match parameter list");

  const std::size_t n = train_set.size();
  const long steps_per_epoch =
      static_cast<long>((n + cfg.batch_size - 1) / static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = steps_per_epoch * cfg.epochs;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainResult result;
  long global_step = state.step;
  const long planned_total = total_steps + state.step;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed ^ (0x5851f42d4c957f2dull + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    long loss_count = 0;
    double last_lr = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      for (auto& p : trainable) p.zero_grad();

      Tensor<float> batch_loss;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const Sample& s = train_set[order[bi]];
        const auto out = forward(sample_inputs(s), params, model_cfg);
        const auto loss = focal_loss(out.logits, s.label, static_cast<float>(cfg.focal_gamma),
                                     static_cast<float>(cfg.focal_alpha));
        batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
      }
      batch_loss = scale(batch_loss, 1.0f / static_cast<float>(stop - start));
      const double loss_value = batch_loss.item();
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train_run: non-finite loss at step " +
                                 std::to_string(global_step));
      batch_loss.backward();

      last_lr = one_cycle_lr(global_step, planned_total, cfg.max_lr);
      adamw_step(trainable, state, last_lr, cfg.weight_decay);
      loss_sum += loss_value;
      ++loss_count;
      ++global_step;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(loss_count);
    stats.lr = last_lr;
    if (!val_set.empty()) {
      const auto val = evaluate_model(params, model_cfg, val_set);
      stats.val_iou_vehicle = val[0].value;
      stats.val_iou_driveable = val.size() > 1 ? val[1].value : 0.0;
    }
    result.history.push_back(stats);
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d/%d loss %.5f val_iou %.4f/%.4f lr %.2e\n", epoch + 1,
                   cfg.epochs, stats.train_loss, stats.val_iou_vehicle, stats.val_iou_driveable,
                   last_lr);
  }
  return result;
}

// ---------------------------------------------------------------------------

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["d"] = cfg.d;
  j["heads"] = cfg.heads;
  j["d_head"] = cfg.d_head;
  j["resolutions"] = cfg.resolutions;
  j["latent_h"] = cfg.latent_h;
  j["latent_w"] = cfg.latent_w;
  j["image_h"] = cfg.image_h;
  j["image_w"] = cfg.image_w;
  j["out_h"] = cfg.out_h;
  j["out_w"] = cfg.out_w;
  j["channels"] = cfg.channels;
  j["enc_widths"] = cfg.enc_widths;
  j["dec_widths"] = cfg.dec_widths;
  j["embedding"] = embedding_mode_name(cfg.embedding);
  j["keys_use_phi"] = cfg.keys_use_phi;
  j["refine_queries"] = cfg.refine_queries;
  j["temperature"] = cfg.temperature;
  j["rig_cameras"] = cfg.rig_cameras;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.d_head = j.at("d_head").get<int>();
  cfg.resolutions = j.at("resolutions").get<int>();
  cfg.latent_h = j.at("latent_h").get<int>();
  cfg.latent_w = j.at("latent_w").get<int>();
  cfg.image_h = j.at("image_h").get<int>();
  cfg.image_w = j.at("image_w").get<int>();
  cfg.out_h = j.at("out_h").get<int>();
  cfg.out_w = j.at("out_w").get<int>();
  cfg.channels = j.at("channels").get<int>();
  for (int i = 0; i < 4; ++i) cfg.enc_widths[i] = j.at("enc_widths").at(i).get<int>();
  for (int i = 0; i < 3; ++i) cfg.dec_widths[i] = j.at("dec_widths").at(i).get<int>();
  cfg.embedding = embedding_mode_from_name(j.at("embedding").get<std::string>());
  cfg.keys_use_phi = j.at("keys_use_phi").get<bool>();
  cfg.refine_queries = j.at("refine_queries").get<bool>();
  cfg.temperature = j.at("temperature").get<double>();
  cfg.rig_cameras = j.at("rig_cameras").get<int>();
  return cfg;
}

namespace {

std::vector<std::uint32_t> to_dims(const Shape& s) {
  std::vector<std::uint32_t> out;
  for (auto d : s) out.push_back(static_cast<std::uint32_t>(d));
  return out;
}

}  // namespace

void save_checkpoint(const std::string& dir, ModelParams<float>& params,
                     const ModelConfig& model_cfg, const AdamWState<float>* optim) {
  fs::create_directories(dir);
  nlohmann::json index;
  index["version"] = 1;
  index["model_config"] = model_config_to_json(model_cfg);

  nlohmann::json tensors = nlohmann::json::array();
  int file_id = 0;
  std::size_t trainable_id = 0;
  params.visit([&](const std::string& name, Tensor<float>& t) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "t%04d.bt1", file_id);
    write_bt1((fs::path(dir) / fname).string(), to_dims(t.shape()), t.data());
    nlohmann::json rec;
    rec["name"] = name;
    rec["file"] = fname;
    rec["shape"] = to_dims(t.shape());
    rec["trainable"] = t.requires_grad();
    if (optim && t.requires_grad()) {
      char mname[32], vname[32];
      std::snprintf(mname, sizeof(mname), "m%04d.bt1", file_id);
      std::snprintf(vname, sizeof(vname), "v%04d.bt1", file_id);
      write_bt1((fs::path(dir) / mname).string(), to_dims(t.shape()), optim->m[trainable_id]);
      write_bt1((fs::path(dir) / vname).string(), to_dims(t.shape()), optim->v[trainable_id]);
      rec["optim_m"] = mname;
      rec["optim_v"] = vname;
    }
    if (t.requires_grad()) ++trainable_id;
    tensors.push_back(rec);
    ++file_id;
  });
  index["tensors"] = tensors;
  if (optim) index["optim_step"] = optim->step;

  std::ofstream os(fs::path(dir) / "params.json", std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write params.json under " + dir);
  os << index.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path index_path = fs::path(dir) / "params.json";
  std::ifstream is(index_path);
  if (!is) throw std::runtime_error("checkpoint: missing " + index_path.string());
  nlohmann::json index;
  try {
    is >> index;
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint: parse error in " + index_path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.model_cfg = model_config_from_json(index.at("model_config"));
  ckpt.params = ModelParams<float>::init(ckpt.model_cfg, 0);

  // Stage everything before touching params: no partial loads.
  struct Loaded {
    std::vector<float> data;
    std::vector<float> m, v;
    bool has_optim = false;
  };
  std::vector<std::pair<std::string, Loaded>> staged;
  for (const auto& rec : index.at("tensors")) {
    const std::string name = rec.at("name").get<std::string>();
    const std::string file = rec.at("file").get<std::string>();
    const Bt1Tensor t = read_bt1((fs::path(dir) / file).string());
    const auto want = rec.at("shape").get<std::vector<std::uint32_t>>();
    if (t.dims != want || t.dtype != Bt1Dtype::F32)
      throw std::runtime_error("checkpoint: tensor " + name + " in " + file +
                               " does not match the recorded shape");
    Loaded l;
    l.data = t.f32;
    if (rec.contains("optim_m")) {
      const Bt1Tensor m = read_bt1((fs::path(dir) / rec.at("optim_m").get<std::string>()).string());
      const Bt1Tensor v = read_bt1((fs::path(dir) / rec.at("optim_v").get<std::string>()).string());
      if (m.dims != want || v.dims != want)
        throw std::runtime_error("checkpoint: optimizer moments for " + name +
                                 " do not match the parameter shape");
      l.m = m.f32;
      l.v = v.f32;
      l.has_optim = true;
    }
    staged.emplace_back(name, std::move(l));
  }

  std::size_t cursor = 0;
  bool any_optim = false;
  ckpt.params.visit([&](const std::string& name, Tensor<float>& t) {
    if (cursor >= staged.size() || staged[cursor].first != name)
      throw std::runtime_error("checkpoint: parameter " + name + " missing from index");
    auto& l = staged[cursor].second;
    if (l.data.size() != t.numel())
      throw std::runtime_error("checkpoint: parameter " + name + " has wrong element count");
    t.data() = l.data;
    if (t.requires_grad() && l.has_optim) {
      ckpt.optim.m.push_back(std::move(l.m));
      ckpt.optim.v.push_back(std::move(l.v));
      any_optim = true;
    } else if (t.requires_grad()) {
      ckpt.optim.m.emplace_back(t.numel(), 0.f);
      ckpt.optim.v.emplace_back(t.numel(), 0.f);
    }
    ++cursor;
  });
  if (cursor != staged.size())
    throw std::runtime_error("checkpoint: index lists " + std::to_string(staged.size()) +
                             " tensors but the model has " + std::to_string(cursor));
  ckpt.has_optim = any_optim;
  if (index.contains("optim_step")) ckpt.optim.step = index.at("optim_step").get<long>();
  return ckpt;
}

}  // namespace cvt
