#include "resprobe/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "resprobe/gradcheck.hpp"
#include "resprobe/serialize.hpp"

namespace resprobe::runner {

namespace fs = std::filesystem;
using nlohmann::json;

std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string> kKnownProbes = {"cosine",       "l2_ratio",   "drop",
                                            "intermediate", "borderline", "grad_norm"};

train::TrainConfig train_from_json(const json& j) {
  nn::reject_unknown_keys(
      j, {"epochs", "batch_size", "momentum", "lr_schedule", "augment", "seed"}, "train");
  train::TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
  for (const auto& p : j.at("lr_schedule")) {
    nn::reject_unknown_keys(p, {"until", "lr"}, "train.lr_schedule");
    train::LrPoint pt;
    pt.until_epoch = p.contains("until") ? p.at("until").get<int>() : -1;
    pt.lr = p.at("lr").get<double>();
    c.lr_schedule.push_back(pt);
  }
  if (j.contains("augment")) {
    nn::reject_unknown_keys(j.at("augment"), {"flip", "translate_pixels"}, "train.augment");
    c.augment.flip = j.at("augment").value("flip", false);
    c.augment.translate_pixels = j.at("augment").value("translate_pixels", 0);
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

json train_to_json(const train::TrainConfig& c) {
  json sched = json::array();
  for (const auto& p : c.lr_schedule) {
    json e{{"lr", p.lr}};
    if (p.until_epoch != -1) e["until"] = p.until_epoch;
    sched.push_back(e);
  }
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"momentum", c.momentum},
              {"lr_schedule", sched},
              {"augment", {{"flip", c.augment.flip}, {"translate_pixels", c.augment.translate_pixels}}},
              {"seed", c.seed}};
}

DataConfig data_from_json(const json& j) {
  DataConfig c;
  c.kind = j.at("kind").get<std::string>();
  if (c.kind == "cifar10" || c.kind == "cifar100") {
    nn::reject_unknown_keys(j, {"kind", "train_paths", "test_paths", "subset_size", "seed"},
                            "data");
    c.train_paths = j.at("train_paths").get<std::vector<std::string>>();
    c.test_paths = j.at("test_paths").get<std::vector<std::string>>();
    if (j.contains("subset_size")) c.subset_size = j.at("subset_size").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  } else if (c.kind == "idx") {
    nn::reject_unknown_keys(
        j, {"kind", "train_images", "train_labels", "test_images", "test_labels", "class_count"},
        "data");
    c.train_images = j.at("train_images").get<std::string>();
    c.train_labels = j.at("train_labels").get<std::string>();
    c.test_images = j.at("test_images").get<std::string>();
    c.test_labels = j.at("test_labels").get<std::string>();
    c.class_count = j.value("class_count", 10);
  } else if (c.kind == "clusters") {
    nn::reject_unknown_keys(j,
                            {"kind", "n_per_class", "test_per_class", "class_count", "image_shape",
                             "separation", "seed"},
                            "data");
    c.n_per_class = j.at("n_per_class").get<int>();
    c.test_per_class = j.value("test_per_class", c.n_per_class / 5 + 1);
    c.class_count = j.at("class_count").get<int>();
    auto sh = j.at("image_shape");
    if (!sh.is_array() || sh.size() != 3)
      throw std::invalid_argument("data.image_shape must be [C, H, W]");
    c.image_shape = {sh[0].get<int64_t>(), sh[1].get<int64_t>(), sh[2].get<int64_t>()};
    c.separation = j.at("separation").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  } else if (c.kind == "textures") {
    nn::reject_unknown_keys(j,
                            {"kind", "classes", "train_per_class", "test_per_class", "noise",
                             "confuse", "template_amplitude", "max_shift", "subset_size", "seed"},
                            "data");
    c.textures.classes = j.value("classes", 10);
    c.textures.train_per_class = j.value("train_per_class", 500);
    c.textures.test_per_class = j.value("test_per_class", 200);
    c.textures.noise = j.value("noise", 0.6);
    c.textures.confuse = j.value("confuse", 0.0);
    c.textures.template_amplitude = j.value("template_amplitude", 1.0);
    c.textures.max_shift = j.value("max_shift", 3);
    c.textures.seed = j.value("seed", uint64_t{7});
    if (j.contains("subset_size")) c.subset_size = j.at("subset_size").get<int>();
    c.seed = c.textures.seed;
  } else {
    throw std::invalid_argument("unknown data kind '" + c.kind + "'");
  }
  return c;
}

json data_to_json(const DataConfig& c) {
  json j{{"kind", c.kind}};
  if (c.kind == "cifar10" || c.kind == "cifar100") {
    j["train_paths"] = c.train_paths;
    j["test_paths"] = c.test_paths;
    if (c.subset_size) j["subset_size"] = *c.subset_size;
    j["seed"] = c.seed;
  } else if (c.kind == "idx") {
    j["train_images"] = c.train_images;
    j["train_labels"] = c.train_labels;
    j["test_images"] = c.test_images;
    j["test_labels"] = c.test_labels;
    j["class_count"] = c.class_count;
  } else if (c.kind == "clusters") {
    j["n_per_class"] = c.n_per_class;
    j["test_per_class"] = c.test_per_class;
    j["class_count"] = c.class_count;
    j["image_shape"] = {c.image_shape[0], c.image_shape[1], c.image_shape[2]};
    j["separation"] = c.separation;
    j["seed"] = c.seed;
  } else if (c.kind == "textures") {
    j["classes"] = c.textures.classes;
    j["train_per_class"] = c.textures.train_per_class;
    j["test_per_class"] = c.textures.test_per_class;
    j["noise"] = c.textures.noise;
    j["confuse"] = c.textures.confuse;
    j["template_amplitude"] = c.textures.template_amplitude;
    j["max_shift"] = c.textures.max_shift;
    if (c.subset_size) j["subset_size"] = *c.subset_size;
    j["seed"] = c.textures.seed;
  }
  return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  nn::reject_unknown_keys(j,
                          {"run_id", "output_dir", "architecture", "train", "sharing", "unroll",
                           "probes", "data"},
                          "config");
  ExperimentConfig c;
  c.run_id = j.at("run_id").get<std::string>();
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos)
    throw std::invalid_argument("run_id must be a nonempty path-free name");
  c.output_dir = j.value("output_dir", std::string("runs"));
  c.architecture = nn::architecture_from_json(j.at("architecture"));
  c.training = train_from_json(j.at("train"));
  if (j.contains("sharing") && !j.at("sharing").is_null())
    c.sharing = nn::sharing_from_json(j.at("sharing"));
  if (j.contains("unroll") && !j.at("unroll").is_null()) {
    nn::reject_unknown_keys(j.at("unroll"), {"extra_steps", "alpha"}, "unroll");
    share::UnrollSpec u;
    u.extra_steps = j.at("unroll").at("extra_steps").get<int>();
    u.alpha = j.at("unroll").value("alpha", 1.0);
    u.validate();
    c.unroll = u;
  }
  if (j.contains("probes")) {
    nn::reject_unknown_keys(j.at("probes"), {"every_epochs", "enabled", "batch_size"}, "probes");
    c.probes.every_epochs = j.at("probes").value("every_epochs", 0);
    c.probes.batch_size = j.at("probes").value("batch_size", 64);
    if (j.at("probes").contains("enabled"))
      c.probes.enabled = j.at("probes").at("enabled").get<std::vector<std::string>>();
    for (const auto& p : c.probes.enabled)
      if (!kKnownProbes.count(p))
        throw std::invalid_argument("probes.enabled references unknown probe '" + p + "'");
  }
  c.data = data_from_json(j.at("data"));
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  json j = json::parse(is);
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json j{{"run_id", run_id},
         {"output_dir", output_dir},
         {"architecture", nn::to_json(architecture)},
         {"train", train_to_json(training)},
         {"probes",
          {{"every_epochs", probes.every_epochs},
           {"enabled", probes.enabled},
           {"batch_size", probes.batch_size}}},
         {"data", data_to_json(data)}};
  if (sharing) j["sharing"] = nn::to_json(*sharing);
  if (unroll) j["unroll"] = {{"extra_steps", unroll->extra_steps}, {"alpha", unroll->alpha}};
  return j;
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

LoadedData load_data(const DataConfig& cfg) {
  LoadedData out;
  if (cfg.kind == "cifar10" || cfg.kind == "cifar100") {
    data::CifarOptions train_opts{cfg.kind == "cifar100" ? 100 : 10, cfg.subset_size, cfg.seed,
                                  "train"};
    out.train = data::load_cifar_binary(cfg.train_paths, train_opts);
    data::CifarOptions val_opts{train_opts.classes, std::nullopt, cfg.seed, "val"};
    out.val = data::load_cifar_binary(cfg.test_paths, val_opts);
  } else if (cfg.kind == "idx") {
    out.train = data::load_idx(cfg.train_images, cfg.train_labels, "train", cfg.class_count);
    out.val = data::load_idx(cfg.test_images, cfg.test_labels, "val", cfg.class_count);
  } else if (cfg.kind == "clusters") {
    out.train = data::synthetic_clusters(cfg.n_per_class, cfg.class_count, cfg.image_shape,
                                         cfg.separation, cfg.seed);
    out.train.split = "train";
    out.val = data::synthetic_clusters(cfg.test_per_class, cfg.class_count, cfg.image_shape,
                                       cfg.separation, cfg.seed + 1);
    out.val.split = "val";
    return out;  // clusters are already centered; no pixel standardization
  } else if (cfg.kind == "textures") {
    auto [train_raw, test_raw] = data::synthetic_textures(cfg.textures);
    int64_t n = static_cast<int64_t>(train_raw.labels.size());
    std::vector<double> px(train_raw.pixels.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = train_raw.pixels[i] / 255.0;
    out.train.images = Tensor::from({n, 3, 32, 32}, std::move(px));
    out.train.labels = train_raw.labels;
    out.train.class_count = cfg.textures.classes;
    out.train.split = "train";
    int64_t nv = static_cast<int64_t>(test_raw.labels.size());
    std::vector<double> pv(test_raw.pixels.size());
    for (size_t i = 0; i < pv.size(); ++i) pv[i] = test_raw.pixels[i] / 255.0;
    out.val.images = Tensor::from({nv, 3, 32, 32}, std::move(pv));
    out.val.labels = test_raw.labels;
    out.val.class_count = cfg.textures.classes;
    out.val.split = "val";
    if (cfg.subset_size) out.train = data::balanced_subset(out.train, *cfg.subset_size, cfg.seed);
  } else {
    throw std::invalid_argument("unknown data kind '" + cfg.kind + "'");
  }
  data::NormStats stats = data::compute_norm_stats(out.train);
  data::apply_norm(out.train, stats);
  data::apply_norm(out.val, stats);
  return out;
}

const data::Dataset& pick_split(const LoadedData& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val" || split == "test") return d.val;
  throw std::invalid_argument("split must be train, val or test; got '" + split + "'");
}

nn::Model build_configured_model(const ExperimentConfig& cfg) {
  if (cfg.sharing)
    return share::build_shared_model(cfg.architecture, *cfg.sharing, cfg.training.seed);
  return nn::build_model(cfg.architecture, cfg.training.seed);
}

// ---------------------------------------------------------------------------
// Probe row emission
// ---------------------------------------------------------------------------

namespace {

bool probe_enabled(const ProbesConfig& cfg, const std::string& name) {
  return std::find(cfg.enabled.begin(), cfg.enabled.end(), name) != cfg.enabled.end();
}

void probes_csv_header(std::ostream& os) {
  os << "schema_version,run_id,epoch,split,probe,block,stage,value,n_excluded\n";
}

void probe_row(std::ostream& os, const std::string& run_id, int epoch, const std::string& split,
               const std::string& probe, int block, int stage, double value, int n_excluded) {
  os << kCsvSchemaVersion << ',' << run_id << ',' << epoch << ',' << split << ',' << probe << ','
     << block << ',' << stage << ',' << csv_double(value) << ',' << n_excluded << '\n';
}

std::vector<probes::ProbeRecord> emit_probe_rows(std::ostream& os, nn::Model& model,
                                                 const LoadedData& datasets,
                                                 const std::string& split,
                                                 const std::string& run_id, int epoch,
                                                 const ProbesConfig& cfg, std::ostream& log) {
  const data::Dataset& ds = pick_split(datasets, split);
  const int nb = model.num_blocks();
  std::vector<probes::ProbeRecord> records(static_cast<size_t>(nb));
  for (int b = 0; b < nb; ++b) {
    records[b].block_index = b;
    records[b].stage_index = model.stage_of_block(b);
    records[b].split = split;
  }

  if (probe_enabled(cfg, "cosine") || probe_enabled(cfg, "l2_ratio")) {
    auto sweep = probes::cosine_l2_sweep(model, ds, cfg.batch_size);
    for (int b = 0; b < nb; ++b) {
      int stage = model.stage_of_block(b);
      records[b].cosine_loss = sweep.cosine[b].value;
      records[b].l2_ratio = sweep.l2_ratio[b].value;
      if (probe_enabled(cfg, "cosine"))
        probe_row(os, run_id, epoch, split, "cosine", b, stage, sweep.cosine[b].value,
                  sweep.cosine[b].excluded);
      if (probe_enabled(cfg, "l2_ratio"))
        probe_row(os, run_id, epoch, split, "l2_ratio", b, stage, sweep.l2_ratio[b].value,
                  sweep.l2_ratio[b].excluded);
    }
  }
  if (probe_enabled(cfg, "drop")) {
    for (int b = 0; b < nb; ++b) {
      double acc = probes::drop_block_eval(model, b, ds);
      records[b].drop_accuracy = acc;
      probe_row(os, run_id, epoch, split, "drop_acc", b, model.stage_of_block(b), acc, 0);
    }
  }
  if (probe_enabled(cfg, "intermediate")) {
    int first = model.first_block_of_stage(model.last_stage());
    for (int b = first; b < nb; ++b) {
      double acc = probes::intermediate_accuracy(model, b, ds);
      records[b].intermediate_accuracy = acc;
      probe_row(os, run_id, epoch, split, "intermediate_acc", b, model.stage_of_block(b), acc, 0);
    }
  }
  if (probe_enabled(cfg, "borderline")) {
    auto groups = probes::borderline_split(model, ds, 0.1);
    probe_row(os, run_id, epoch, split, "borderline_count", -1, -1,
              static_cast<double>(groups.borderline.size()), 0);
    int first = model.first_block_of_stage(model.last_stage());
    int last = nb - 1;
    int window_first = std::max(first, last - 4);  // last five depths
    auto table = probes::group_metrics(model, groups, window_first, last, ds);
    for (size_t g = 0; g < table.group_names.size(); ++g) {
      for (size_t d = 0; d < table.blocks.size(); ++d) {
        if (!table.values[g][d]) continue;
        const auto& m = *table.values[g][d];
        const std::string& gn = table.group_names[g];
        int stage = model.stage_of_block(table.blocks[d]);
        probe_row(os, run_id, epoch, split, "group_loss:" + gn, table.blocks[d], stage, m.loss, 0);
        probe_row(os, run_id, epoch, split, "group_acc:" + gn, table.blocks[d], stage, m.accuracy,
                  0);
        probe_row(os, run_id, epoch, split, "group_entropy:" + gn, table.blocks[d], stage,
                  m.entropy, 0);
      }
    }
  }
  if (probe_enabled(cfg, "grad_norm")) {
    if (model.stages.size() < 2) {
      log << "probe grad_norm skipped: model has a single stage\n";
    } else {
      int64_t take = std::min<int64_t>(ds.size(), cfg.batch_size);
      std::vector<int> idx(static_cast<size_t>(take));
      for (int64_t i = 0; i < take; ++i) idx[i] = static_cast<int>(i);
      auto [batch, labels] = data::gather(ds, idx);
      auto rep = probes::grad_norm_ratio(model, batch, labels);
      probe_row(os, run_id, epoch, split, "grad_norm_ratio", -1, -1,
                rep.infinite ? std::numeric_limits<double>::infinity() : rep.ratio, 0);
    }
  }
  return records;
}

nlohmann::json records_json(const std::vector<probes::ProbeRecord>& records, int epoch) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : records) {
    rows.push_back({{"epoch", epoch},
                    {"split", r.split},
                    {"block", r.block_index},
                    {"stage", r.stage_index},
                    {"cosine_loss", r.cosine_loss},
                    {"l2_ratio", r.l2_ratio},
                    {"drop_accuracy", r.drop_accuracy},
                    {"intermediate_accuracy", r.intermediate_accuracy}});
  }
  return rows;
}

void write_summary(const fs::path& run_dir, const ExperimentConfig& cfg, double final_val,
                   double best_val, int epochs_done, const nlohmann::json& probe_records) {
  json summary{{"schema_version", kCsvSchemaVersion},
               {"run_id", cfg.run_id},
               {"epochs", epochs_done},
               {"final_val_accuracy", final_val},
               {"best_val_accuracy", best_val},
               {"probe_records", probe_records},
               {"files", {"config.json", "metrics.csv", "probes.csv", "final.ckpt", "best.ckpt"}}};
  std::ofstream os(run_dir / "summary.json");
  os << summary.dump(2) << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

RunResult run_train(const ExperimentConfig& cfg, const std::string& out_override) {
  cfg.training.validate();
  fs::path root = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
  fs::path run_dir = root / cfg.run_id;
  if (fs::exists(run_dir))
    throw std::runtime_error("run directory already exists (run_id must be unique per output "
                             "root): " +
                             run_dir.string());
  fs::create_directories(run_dir);

  {
    std::ofstream os(run_dir / "config.json");
    os << cfg.to_json().dump(2) << "\n";
  }

  LoadedData datasets = load_data(cfg.data);
  nn::Model model = build_configured_model(cfg);
  auto opt = train::OptimizerState::for_model(model);

  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "schema_version,epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds\n";
  std::ofstream probes_csv(run_dir / "probes.csv");
  probes_csv_header(probes_csv);
  std::ofstream log(run_dir / "run.log");

  double best_val = -1.0, final_val = 0.0;
  nlohmann::json probe_records = nlohmann::json::array();
  for (int epoch = 0; epoch < cfg.training.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto tm = train::train_epoch(model, datasets.train, cfg.training, epoch, opt);
    auto ev = train::evaluate(model, datasets.val);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << kCsvSchemaVersion << ',' << epoch << ',' << csv_double(lr_at(cfg.training.lr_schedule, epoch))
            << ',' << csv_double(tm.loss) << ',' << csv_double(tm.accuracy) << ','
            << csv_double(ev.loss) << ',' << csv_double(ev.accuracy) << ',' << csv_double(wall)
            << '\n';
    metrics.flush();
    final_val = ev.accuracy;
    if (ev.accuracy > best_val) {
      best_val = ev.accuracy;
      nn::save_checkpoint((run_dir / "best.ckpt").string(), model, cfg.training.seed, epoch);
    }
    bool probe_now = !cfg.probes.enabled.empty() &&
                     ((cfg.probes.every_epochs > 0 && (epoch + 1) % cfg.probes.every_epochs == 0) ||
                      epoch + 1 == cfg.training.epochs);
    if (probe_now) {
      auto train_records =
          emit_probe_rows(probes_csv, model, datasets, "train", cfg.run_id, epoch, cfg.probes, log);
      auto val_records =
          emit_probe_rows(probes_csv, model, datasets, "val", cfg.run_id, epoch, cfg.probes, log);
      probes_csv.flush();
      for (auto& row : records_json(train_records, epoch)) probe_records.push_back(row);
      for (auto& row : records_json(val_records, epoch)) probe_records.push_back(row);
    }
  }
  nn::save_checkpoint((run_dir / "final.ckpt").string(), model, cfg.training.seed,
                      cfg.training.epochs - 1);
  write_summary(run_dir, cfg, final_val, best_val, cfg.training.epochs, probe_records);
  return {run_dir, final_val, best_val};
}

void run_probe(const std::string& checkpoint_path, const ExperimentConfig& cfg,
               const std::string& split, const fs::path& out_dir, std::ostream& log) {
  auto ck = nn::load_checkpoint(checkpoint_path);
  LoadedData datasets = load_data(cfg.data);
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "probes.csv");
  probes_csv_header(os);
  ProbesConfig pc = cfg.probes;
  if (pc.enabled.empty())
    pc.enabled = {"cosine", "l2_ratio", "drop", "intermediate", "borderline", "grad_norm"};
  auto records = emit_probe_rows(os, ck.model, datasets, split, cfg.run_id, ck.epoch, pc, log);
  json summary{{"schema_version", kCsvSchemaVersion},
               {"run_id", cfg.run_id},
               {"checkpoint_epoch", ck.epoch},
               {"split", split},
               {"probe_records", records_json(records, ck.epoch)}};
  std::ofstream sos(out_dir / "summary.json");
  sos << summary.dump(2) << "\n";
}

void run_drop_scan(const std::string& checkpoint_path, const ExperimentConfig& cfg,
                   const std::string& split, const fs::path& out_dir, std::ostream& log) {
  auto ck = nn::load_checkpoint(checkpoint_path);
  LoadedData datasets = load_data(cfg.data);
  const data::Dataset& ds = pick_split(datasets, split);
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "drop_scan.csv");
  probes_csv_header(os);
  auto ev = train::evaluate(ck.model, ds);
  probe_row(os, cfg.run_id, ck.epoch, split, "baseline_acc", -1, -1, ev.accuracy, 0);
  for (int b = 0; b < ck.model.num_blocks(); ++b) {
    probe_row(os, cfg.run_id, ck.epoch, split, "drop_acc", b, ck.model.stage_of_block(b),
              probes::drop_block_eval(ck.model, b, ds), 0);
  }
  log << "drop scan of " << ck.model.num_blocks() << " blocks written\n";
}

void run_unroll(const std::string& checkpoint_path, const ExperimentConfig& cfg,
                const std::string& split, const fs::path& out_dir, std::ostream& log) {
  if (!cfg.unroll) throw std::invalid_argument("config has no unroll section");
  auto ck = nn::load_checkpoint(checkpoint_path);
  LoadedData datasets = load_data(cfg.data);
  const data::Dataset& ds = pick_split(datasets, split);

  auto um = share::unroll_last_block(ck.model, *cfg.unroll,
                                     datasets.train, std::min(cfg.probes.batch_size, 64));

  // example groups come from the base model's predictions
  auto groups = probes::borderline_split(ck.model, ds, 0.1);
  std::vector<std::vector<uint8_t>> member(3, std::vector<uint8_t>(ds.size(), 0));
  const std::vector<const std::vector<int>*> lists = {&groups.borderline, &groups.correct,
                                                      &groups.all};
  const std::vector<std::string> group_names = {"borderline", "correct", "all"};
  for (int g = 0; g < 3; ++g)
    for (int s : *lists[g]) member[g][s] = 1;

  const int steps = cfg.unroll->extra_steps;
  struct Acc {
    double loss = 0, acc = 0, ent = 0, cos = 0, l2 = 0;
    int64_t n = 0, cos_n = 0, cos_excl = 0;
  };
  std::vector<std::vector<Acc>> acc(3, std::vector<Acc>(static_cast<size_t>(steps) + 1));

  const int batch_size = std::max(8, std::min(cfg.probes.batch_size, 64));
  for (int64_t start = 0; start < ds.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(ds.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(ds, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto tr = share::unrolled_forward(tape, um, batch, /*retain=*/false);

    int64_t n = end - start;
    for (int step = 0; step <= steps; ++step) {
      // per-step metrics plug the classifier onto this step's state; the
      // cosine pairs the block output with the gradient of that plugged
      // classifier's loss at the state
      Tape head_tape;
      head_tape.write_leaf_grads = false;
      Tensor h_leaf = tr.h[step].clone();
      h_leaf.set_retain_grad(true);
      Tensor logits = nn::head_logits(head_tape, ck.model, h_leaf, Mode::eval);
      LossValue head_loss = ops::softmax_cross_entropy(head_tape, logits, labels);
      if (step < steps) head_tape.backward(head_loss);
      auto probs = ops::softmax_rows(logits);
      int64_t k = logits.size(1);
      int64_t per = tr.h[step].numel() / n;
      const auto& hv = tr.h[step].data();
      const std::vector<double>* grad = step < steps ? &h_leaf.grad() : nullptr;
      const std::vector<double>* fv = step < steps ? &tr.F[step].data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = probs.data() + i * k;
        int y = labels[i];
        double loss = -std::log(std::max(p[y], 1e-300));
        double entropy = 0.0;
        for (int64_t j = 0; j < k; ++j)
          if (p[j] > 0.0) entropy -= p[j] * std::log(p[j]);
        int arg = 0;
        for (int64_t j = 1; j < k; ++j)
          if (p[j] > p[arg]) arg = static_cast<int>(j);
        double cosv = 0.0, l2v = 0.0;
        bool cos_ok = false;
        if (step < steps) {
          const double* fp = fv->data() + i * per;
          const double* gp = grad->data() + i * per;
          const double* hp = hv.data() + i * per;
          double nf = 0, ng = 0, nh = 0, fg = 0;
          for (int64_t q = 0; q < per; ++q) {
            nf += fp[q] * fp[q];
            ng += gp[q] * gp[q];
            nh += hp[q] * hp[q];
            fg += fp[q] * gp[q];
          }
          nf = std::sqrt(nf);
          ng = std::sqrt(ng);
          nh = std::sqrt(nh);
          if (nf > 0 && ng > 0) {
            cosv = fg / (nf * ng);
            cos_ok = true;
          }
          l2v = nh > 0 ? um.spec.alpha * nf / nh : 0.0;
        }
        int sample = static_cast<int>(start + i);
        for (int g = 0; g < 3; ++g) {
          if (!member[g][sample]) continue;
          Acc& a = acc[g][step];
          a.loss += loss;
          a.ent += entropy;
          a.acc += arg == y ? 1.0 : 0.0;
          ++a.n;
          if (step < steps) {
            if (cos_ok) {
              a.cos += cosv;
              ++a.cos_n;
            } else {
              ++a.cos_excl;
            }
            a.l2 += l2v;
          }
        }
      }
    }
  }

  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "unroll.csv");
  os << "schema_version,step,split,group,loss,accuracy,entropy,cosine,l2_ratio\n";
  for (int step = 0; step <= steps; ++step) {
    for (int g = 0; g < 3; ++g) {
      const Acc& a = acc[g][step];
      os << kCsvSchemaVersion << ',' << step << ',' << split << ',' << group_names[g] << ',';
      if (a.n == 0) {
        os << ",,,,\n";
        continue;
      }
      double dn = static_cast<double>(a.n);
      os << csv_double(a.loss / dn) << ',' << csv_double(a.acc / dn) << ','
         << csv_double(a.ent / dn) << ',';
      if (step < steps && a.cos_n > 0) os << csv_double(a.cos / a.cos_n);
      os << ',';
      if (step < steps) os << csv_double(a.l2 / dn);
      os << '\n';
      if (a.cos_excl > 0)
        log << "unroll step " << step << " group " << group_names[g] << ": " << a.cos_excl
            << " zero-norm samples excluded from cosine\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking suite
// ---------------------------------------------------------------------------

void GradcheckReport::add(const std::string& name, double value, double tolerance,
                          bool higher_is_better) {
  Entry e{name, value, tolerance, higher_is_better,
          higher_is_better ? value >= tolerance : value <= tolerance};
  pass = pass && e.pass;
  entries.push_back(e);
}

namespace {

// weighted scalar readout so redistribution bugs cannot cancel out
double weighted(Tape& tape, const Tensor& out, const std::vector<double>& w) {
  Tensor flat = ops::reshape(tape, out, {1, out.numel()});
  Tensor wt = Tensor::from({out.numel(), 1}, w);
  Tensor s = ops::matmul(tape, flat, wt);
  return s.item();
}

std::vector<double> rand_weights(Rng& rng, int64_t n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// relu inputs pushed away from the kink so finite differences stay clean
Tensor rand_tensor_off_kink(Rng& rng, Shape shape, double margin = 0.05) {
  Tensor t = rand_tensor(rng, std::move(shape));
  for (auto& v : t.data())
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  return t;
}

struct PrimitiveCheck {
  const char* name;
  // builds fn(x) and returns (scalar fn for FD, backward gradient of x)
  std::function<double(uint64_t seed)> max_rel_error;
};

double check_against_fd(const std::function<Tensor(Tape&, const Tensor&)>& apply, const Tensor& x0,
                        Rng& wrng, double eps = 1e-5) {
  // backward route
  Tape tape;
  Tensor x = x0.clone();
  x.set_requires_grad(true);
  Tensor out = apply(tape, x);
  std::vector<double> w = rand_weights(wrng, out.numel());
  Tensor s = [&] {
    Tensor flat = ops::reshape(tape, out, {1, out.numel()});
    Tensor wt = Tensor::from({out.numel(), 1}, w);
    return ops::matmul(tape, flat, wt);
  }();
  tape.backward(s);
  std::vector<double> got = x.grad();

  auto fn = [&](const Tensor& probe) {
    Tape t2;
    Tensor out2 = apply(t2, probe);
    return weighted(t2, out2, w);
  };
  Tensor fd = gradcheck::finite_diff_grad(fn, x0, eps);
  return gradcheck::max_rel_error(got, fd.data(), 1e-6);
}

double model_loss(nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                  Mode mode) {
  Tape tape;
  tape.write_leaf_grads = false;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = mode});
  LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
  return loss.total.item();
}

// FD check of sampled parameter coordinates of a whole model under
// train-mode forward (batch statistics differentiate; running statistics
// are write-only and cannot influence the value).
double model_param_fd_error(nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                            uint64_t seed, int coords_per_param, double eps = 1e-5) {
  auto params = model.parameters();
  Tape tape;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::train});
  LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
  tape.backward(loss);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.tensor.has_grad())
      throw std::runtime_error("parameter '" + p.name + "' received no gradient");
    const auto& grad = p.tensor.grad();
    auto& values = p.tensor.data();
    Rng pick = Rng::derive(seed, 0xc0de, pi);
    int64_t n = p.tensor.numel();
    int take = static_cast<int>(std::min<int64_t>(coords_per_param, n));
    for (int t = 0; t < take; ++t) {
      int64_t k = static_cast<int64_t>(pick.below(static_cast<uint64_t>(n)));
      double orig = values[k];
      values[k] = orig + eps;
      double up = model_loss(model, batch, labels, Mode::train);
      values[k] = orig - eps;
      double down = model_loss(model, batch, labels, Mode::train);
      values[k] = orig;
      double fd = (up - down) / (2.0 * eps);
      double denom = std::max({1e-6, std::fabs(fd), std::fabs(grad[k])});
      worst = std::max(worst, std::fabs(fd - grad[k]) / denom);
    }
  }
  for (auto& p : params) p.tensor.clear_grad();
  return worst;
}

}  // namespace

GradcheckReport run_gradcheck(uint64_t seed) {
  GradcheckReport report;
  const double kTol = 1e-4;
  const int kSeeds = 20;

  auto over_seeds = [&](const std::function<double(Rng&, Rng&)>& one) {
    double worst = 0.0;
    for (int s = 0; s < kSeeds; ++s) {
      Rng rng = Rng::derive(seed, 0xabc, static_cast<uint64_t>(s));
      Rng wrng = Rng::derive(seed, 0xdef, static_cast<uint64_t>(s));
      worst = std::max(worst, one(rng, wrng));
    }
    return worst;
  };

  // sum first: its gradient is analytically all-ones
  report.add("sum", over_seeds([](Rng& rng, Rng&) {
               Tensor x = rand_tensor(rng, {3, 4});
               Tape tape;
               Tensor xx = x.clone();
               xx.set_requires_grad(true);
               Tensor s = ops::sum(tape, xx);
               tape.backward(s);
               double worst = 0.0;
               for (double g : xx.grad()) worst = std::max(worst, std::fabs(g - 1.0));
               return worst;
             }),
             1e-12);

  report.add("reshape", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor(rng, {2, 6});
               return check_against_fd(
                   [](Tape& t, const Tensor& v) { return ops::reshape(t, v, {3, 4}); }, x, wrng);
             }),
             kTol);

  report.add("matmul", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor a = rand_tensor(rng, {3, 4});
               Tensor b = rand_tensor(rng, {4, 5});
               double ea = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::matmul(t, v, b); }, a, wrng);
               double eb = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::matmul(t, a, v); }, b, wrng);
               return std::max(ea, eb);
             }),
             kTol);

  report.add("add", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor a = rand_tensor(rng, {2, 3, 2, 2});
               Tensor b = rand_tensor(rng, {2, 3, 2, 2});
               return check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::add(t, v, b); }, a, wrng);
             }),
             kTol);

  report.add("scalar_multiply", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor a = rand_tensor(rng, {7});
               return check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::scale(t, v, -1.7); }, a, wrng);
             }),
             kTol);

  report.add("bias_add", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor(rng, {3, 5});
               Tensor b = rand_tensor(rng, {5});
               double ex = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::bias_add(t, v, b); }, x, wrng);
               double eb = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::bias_add(t, x, v); }, b, wrng);
               return std::max(ex, eb);
             }),
             kTol);

  report.add("relu", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor_off_kink(rng, {4, 6});
               return check_against_fd(
                   [](Tape& t, const Tensor& v) { return ops::relu(t, v); }, x, wrng);
             }),
             kTol);

  report.add("conv2d", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor(rng, {2, 3, 5, 5});
               Tensor w = rand_tensor(rng, {4, 3, 3, 3});
               Tensor b = rand_tensor(rng, {4});
               double ex = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::conv2d(t, v, w, b, 2, 1); }, x,
                   wrng);
               double ew = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::conv2d(t, x, v, b, 1, 1); }, w,
                   wrng);
               double eb = check_against_fd(
                   [&](Tape& t, const Tensor& v) { return ops::conv2d(t, x, w, v, 1, 0); }, b,
                   wrng);
               return std::max({ex, ew, eb});
             }),
             kTol);

  report.add("avg_pool2d", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor(rng, {2, 2, 6, 6});
               return check_against_fd(
                   [](Tape& t, const Tensor& v) { return ops::avg_pool2d(t, v, 2, 2, 2, 2); }, x,
                   wrng);
             }),
             kTol);

  auto bn_error = [](Rng& rng, Rng& wrng, Mode mode) {
    Tensor x = rand_tensor(rng, {3, 4, 3, 3});
    Tensor gamma = rand_tensor(rng, {4}, 0.5, 1.5);
    Tensor beta = rand_tensor(rng, {4}, -0.5, 0.5);
    std::vector<double> rm(4), rv(4, 1.0);
    for (auto& m : rm) m = rng.uniform(-0.2, 0.2);
    auto with = [&](const Tensor& xx, const Tensor& g, const Tensor& bt) {
      return [&, xx, g, bt](Tape& t, const Tensor& v, int which) {
        std::vector<double> m = rm, va = rv;  // running stats copy per call
        ops::BatchNormArgs args{mode, 0.1, 1e-5, &m, &va};
        const Tensor& ax = which == 0 ? v : xx;
        const Tensor& ag = which == 1 ? v : g;
        const Tensor& ab = which == 2 ? v : bt;
        return ops::batchnorm(t, ax, ag, ab, args);
      };
    };
    auto f = with(x, gamma, beta);
    double ex = check_against_fd(
        [&](Tape& t, const Tensor& v) { return f(t, v, 0); }, x, wrng);
    double eg = check_against_fd(
        [&](Tape& t, const Tensor& v) { return f(t, v, 1); }, gamma, wrng);
    double eb = check_against_fd(
        [&](Tape& t, const Tensor& v) { return f(t, v, 2); }, beta, wrng);
    return std::max({ex, eg, eb});
  };
  report.add("batchnorm_train",
             over_seeds([&](Rng& rng, Rng& wrng) { return bn_error(rng, wrng, Mode::train); }),
             kTol);
  report.add("batchnorm_eval",
             over_seeds([&](Rng& rng, Rng& wrng) { return bn_error(rng, wrng, Mode::eval); }),
             kTol);

  report.add("softmax_cross_entropy", over_seeds([](Rng& rng, Rng&) {
               Tensor logits = rand_tensor(rng, {4, 5}, -2.0, 2.0);
               std::vector<int> labels = {0, 2, 4, 1};
               Tape tape;
               Tensor x = logits.clone();
               x.set_requires_grad(true);
               LossValue loss = ops::softmax_cross_entropy(tape, x, labels);
               tape.backward(loss);
               auto fn = [&](const Tensor& probe) {
                 Tape t2;
                 return ops::softmax_cross_entropy(t2, probe, labels).total.item();
               };
               Tensor fd = gradcheck::finite_diff_grad(fn, logits, 1e-5);
               return gradcheck::max_rel_error(x.grad(), fd.data(), 1e-6);
             }),
             kTol);

  report.add("flatten", over_seeds([](Rng& rng, Rng& wrng) {
               Tensor x = rand_tensor(rng, {2, 3, 2, 2});
               return check_against_fd(
                   [](Tape& t, const Tensor& v) { return ops::flatten(t, v); }, x, wrng);
             }),
             kTol);

  // whole desk models, train-mode forward, sampled parameter coordinates
  {
    nn::ArchitectureConfig arch;
    arch.family = nn::Family::original;
    arch.stages = {{2, 6}, {2, 8}};
    arch.stem_channels = 6;
    arch.input_shape = {2, 8, 8};
    arch.num_classes = 3;
    arch.shortcut = nn::ShortcutKind::conv1x1;
    Rng brng = Rng::derive(seed, 0xba7c4);
    Tensor batch = rand_tensor(brng, {2, 2, 8, 8});
    std::vector<int> labels = {0, 2};

    nn::Model plain = nn::build_model(arch, seed + 11);
    report.add("model_original", model_param_fd_error(plain, batch, labels, seed, 4), kTol);

    nn::SharingSpec naive{1, nn::BnShareMode::naive, 0.1};
    nn::Model shared_naive = share::build_shared_model(arch, naive, seed + 12);
    report.add("model_shared_naive", model_param_fd_error(shared_naive, batch, labels, seed, 4),
               kTol);

    nn::SharingSpec ubn{1, nn::BnShareMode::ubn_full, 0.1};
    nn::Model shared_ubn = share::build_shared_model(arch, ubn, seed + 13);
    report.add("model_shared_ubn", model_param_fd_error(shared_ubn, batch, labels, seed, 4), kTol);

    // tied-weight gradient: every coordinate of one shared conv kernel
    {
      nn::Model m = share::build_shared_model(arch, ubn, seed + 14);
      auto params = m.parameters();
      Tape tape;
      auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::train});
      LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
      tape.backward(loss);
      Tensor wshared = m.stages[1][1]->conv1.weight;
      const auto grad = wshared.grad();
      auto& values = wshared.data();
      double worst = 0.0;
      const double eps = 1e-5;
      for (size_t k = 0; k < values.size(); ++k) {
        double orig = values[k];
        values[k] = orig + eps;
        double up = model_loss(m, batch, labels, Mode::train);
        values[k] = orig - eps;
        double down = model_loss(m, batch, labels, Mode::train);
        values[k] = orig;
        double fd = (up - down) / (2.0 * eps);
        double denom = std::max({1e-6, std::fabs(fd), std::fabs(grad[k])});
        worst = std::max(worst, std::fabs(fd - grad[k]) / denom);
      }
      for (auto& p : params) p.tensor.clear_grad();
      report.add("shared_weight_accumulation", worst, kTol);
    }
  }

  // first-layer gradient-step identity on dense-equivalent stems
  {
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
      nn::ArchitectureConfig arch;
      arch.family = nn::Family::single_repr;
      arch.stages = {{2, 6 + (i % 3)}};
      arch.stem_channels = 6 + (i % 3);
      arch.input_shape = {4 + (i % 2), 1, 1};
      arch.num_classes = 3;
      arch.shortcut = nn::ShortcutKind::none;
      nn::Model m = nn::build_model(arch, seed + 100 + static_cast<uint64_t>(i));
      Rng srng = Rng::derive(seed, 0x5a3, static_cast<uint64_t>(i));
      Tensor sample = rand_tensor(srng, {1, arch.input_shape[0], 1, 1});
      auto check = probes::first_layer_gradient_step_check(m, sample, i % 3, 1e-6);
      worst = std::max(worst, check.rel_error);
    }
    report.add("first_layer_step_identity", worst, 1e-6);
  }

  // Taylor residual decay on a fresh desk model. At initialization a
  // block moves representations as far as they are long, which flips
  // relu signs everywhere; scaling the probed block's output keeps the
  // expansion point inside a smooth region.
  {
    nn::ArchitectureConfig arch;
    arch.family = nn::Family::single_repr;
    arch.stages = {{4, 8}};
    arch.stem_channels = 8;
    arch.input_shape = {3, 8, 8};
    arch.num_classes = 4;
    arch.shortcut = nn::ShortcutKind::none;
    nn::Model m = nn::build_model(arch, seed + 200);
    for (auto& v : m.stages[0][2]->conv2.weight.data()) v *= 2e-4;
    for (auto& v : m.stages[0][2]->conv2.bias.data()) v *= 2e-4;
    Rng brng = Rng::derive(seed, 0x7a7);
    Tensor batch = rand_tensor(brng, {24, 3, 8, 8});
    std::vector<int> labels(24);
    for (int i = 0; i < 24; ++i) labels[i] = i % 4;
    auto rep = probes::taylor_residual_check(m, batch, labels, 2);
    std::vector<double> slopes;
    for (const auto& s : rep.samples)
      if (s.kink_free && !s.degenerate) slopes.push_back(s.slope);
    double median = 0.0;
    if (!slopes.empty()) {
      std::sort(slopes.begin(), slopes.end());
      median = slopes[slopes.size() / 2];
    }
    report.add("taylor_slope_median", median, 1.5, /*higher_is_better=*/true);
  }

  return report;
}

void print_report(const GradcheckReport& report, std::ostream& os) {
  for (const auto& e : report.entries) {
    os << (e.pass ? "[ok]   " : "[FAIL] ") << e.name << ": " << csv_double(e.value)
       << (e.higher_is_better ? " (want >= " : " (want <= ") << csv_double(e.tolerance) << ")\n";
  }
  os << (report.pass ? "gradcheck passed" : "gradcheck FAILED") << "\n";
}

}  // namespace resprobe::runner
