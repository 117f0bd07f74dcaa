// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/experiment.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <ostream>

#include "pemma/lora.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pemma {

std::string ExperimentConfig::data_dir() const { return (fs::path(out_dir) / "data").string(); }

std::string ExperimentConfig::checkpoint_dir(std::string_view name) const {
  return (fs::path(out_dir) / "checkpoints" / name).string();
}

std::string ExperimentConfig::report_dir() const { return (fs::path(out_dir) / "reports").string(); }

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

namespace {

json to_json(const ModelConfig& c) {
  return json{{"blocks", c.blocks},   {"dim", c.dim},
              {"heads", c.heads},     {"patch", c.patch},
              {"input_size", c.input_size}, {"skip_features", c.skip_features},
              {"seed", c.seed}};
}

void from_json_model(const json& j, ModelConfig& c) {
  c.blocks = j.at("blocks").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.patch = j.at("patch").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.skip_features = j.at("skip_features").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
}

json to_json(const TrainConfig& c) {
  json groups;
  if (c.trainable_groups.has_value()) {
    groups = json::array();
    for (ParamGroup g : *c.trainable_groups) groups.push_back(std::string(to_string(g)));
  }
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"val_every", c.val_every},
              {"seed", c.seed},
              {"trainable_groups", groups},
              {"dice_w", c.dice_w},
              {"ce_w", c.ce_w},
              {"crops_per_sample", c.crops_per_sample},
              {"flip_prob", c.flip_prob},
              {"rot_prob", c.rot_prob},
              {"modalities", std::string(to_string(c.modalities))}};
}

void from_json_train(const json& j, TrainConfig& c) {
  c.lr = j.at("lr").get<float>();
  c.weight_decay = j.at("weight_decay").get<float>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_steps = j.at("max_steps").get<int>();
  c.val_every = j.at("val_every").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  if (j.at("trainable_groups").is_null()) {
    c.trainable_groups.reset();
  } else {
    std::set<ParamGroup> groups;
    for (const json& g : j.at("trainable_groups")) groups.insert(parse_group(g.get<std::string>()));
    c.trainable_groups = groups;
  }
  c.dice_w = j.at("dice_w").get<float>();
  c.ce_w = j.at("ce_w").get<float>();
  c.crops_per_sample = j.at("crops_per_sample").get<int>();
  c.flip_prob = j.at("flip_prob").get<float>();
  c.rot_prob = j.at("rot_prob").get<float>();
  c.modalities = parse_modalities(j.at("modalities").get<std::string>());
}

json to_json(const PhantomSpec& s) {
  return json{{"tumor_r_min", s.tumor_r_min}, {"tumor_r_max", s.tumor_r_max},
              {"lymph_r_min", s.lymph_r_min}, {"lymph_r_max", s.lymph_r_max},
              {"ct_contrast", s.ct_contrast}, {"pet_snr", s.pet_snr},
              {"noise_sigma_ct", s.noise_sigma_ct}, {"noise_sigma_pet", s.noise_sigma_pet}};
}

void from_json_phantom(const json& j, PhantomSpec& s) {
  s.tumor_r_min = j.at("tumor_r_min").get<float>();
  s.tumor_r_max = j.at("tumor_r_max").get<float>();
  s.lymph_r_min = j.at("lymph_r_min").get<float>();
  s.lymph_r_max = j.at("lymph_r_max").get<float>();
  s.ct_contrast = j.at("ct_contrast").get<float>();
  s.pet_snr = j.at("pet_snr").get<float>();
  s.noise_sigma_ct = j.at("noise_sigma_ct").get<float>();
  s.noise_sigma_pet = j.at("noise_sigma_pet").get<float>();
}

json to_json(const DataConfig& c) {
  json splits = json::object();
  for (const auto& [name, s] : c.splits) {
    splits[name] = json{{"train_count", s.train_count}, {"val_count", s.val_count}, {"phantom", to_json(s.phantom)}};
  }
  return json{{"seed", c.seed}, {"dims", c.dims}, {"splits", splits}};
}

void from_json_data(const json& j, DataConfig& c) {
  c.seed = j.at("seed").get<uint64_t>();
  c.dims = j.at("dims").get<std::array<int, 3>>();
  c.splits.clear();
  for (const auto& [name, js] : j.at("splits").items()) {
    SplitSpec s;
    s.train_count = js.at("train_count").get<int>();
    s.val_count = js.at("val_count").get<int>();
    from_json_phantom(js.at("phantom"), s.phantom);
    s.phantom.dims = c.dims;
    c.splits[name] = s;
  }
}

json to_json(const AdaptationConfig& c) {
  return json{{"method", c.method},
              {"rank", c.rank},
              {"alpha", c.alpha},
              {"beta", c.beta},
              {"routing", std::string(to_string(c.routing))},
              {"init", std::string(to_string(c.init))},
              {"w_c", c.w_c}};
}

void from_json_adaptation(const json& j, AdaptationConfig& c) {
  c.method = j.at("method").get<std::string>();
  if (c.method != "early" && c.method != "late" && c.method != "pemma") {
    throw ConfigError(format_msg("unknown adaptation method '", c.method, "'"));
  }
  c.rank = j.at("rank").get<int>();
  c.alpha = j.at("alpha").get<float>();
  c.beta = j.at("beta").get<float>();
  c.routing = parse_routing(j.at("routing").get<std::string>());
  c.init = parse_init_strategy(j.at("init").get<std::string>());
  c.w_c = j.at("w_c").get<float>();
}

json experiment_to_json(const ExperimentConfig& c) {
  return json{{"seed", c.seed},         {"model", to_json(c.model)},
              {"data", to_json(c.data)}, {"pretrain", to_json(c.pretrain)},
              {"adapt", to_json(c.adapt)}, {"finetune", to_json(c.finetune)},
              {"adaptation", to_json(c.adaptation)}, {"out_dir", c.out_dir}};
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c = [] {
    ExperimentConfig base;
    base.model.seed = 0;
    base.data = default_data_config(0);
    base.pretrain.seed = 0;
    base.adapt.seed = 0;
    base.finetune.seed = 0;
    base.finetune.max_steps = 500;
    return base;
  }();
  c.seed = j.at("seed").get<uint64_t>();
  from_json_model(j.at("model"), c.model);
  from_json_data(j.at("data"), c.data);
  from_json_train(j.at("pretrain"), c.pretrain);
  from_json_train(j.at("adapt"), c.adapt);
  from_json_train(j.at("finetune"), c.finetune);
  from_json_adaptation(j.at("adaptation"), c.adaptation);
  c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

}  // namespace

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.model.seed = 0;
  c.data = default_data_config(0);
  c.pretrain.seed = 0;
  c.pretrain.modalities = Modalities::kC;
  c.adapt.seed = 0;
  c.finetune.seed = 0;
  c.finetune.max_steps = 500;
  return c;
}

void resolve_seeds(ExperimentConfig& cfg) {
  const Rng top(cfg.seed);
  if (cfg.model.seed == 0) cfg.model.seed = top.fork("model").seed();
  if (cfg.data.seed == 0) cfg.data.seed = top.fork("data").seed();
  if (cfg.pretrain.seed == 0) cfg.pretrain.seed = top.fork("pretrain").seed();
  if (cfg.adapt.seed == 0) cfg.adapt.seed = top.fork("adapt").seed();
  if (cfg.finetune.seed == 0) cfg.finetune.seed = top.fork("finetune").seed();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(format_msg("cannot open config '", path, "'"));
  json file_json;
  try {
    in >> file_json;
  } catch (const json::exception& e) {
    throw ConfigError(format_msg("malformed config '", path, "': ", e.what()));
  }
  json merged = experiment_to_json(default_experiment_config());
  merged.merge_patch(file_json);
  try {
    return experiment_from_json(merged);
  } catch (const json::exception& e) {
    throw ConfigError(format_msg("invalid config '", path, "': ", e.what()));
  }
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(format_msg("--set expects key=value, got '", assignment, "'"));
  }
  std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  for (char& ch : key) {
    if (ch == '.') ch = '/';
  }
  json j = experiment_to_json(cfg);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // plain string
  }
  try {
    j[json::json_pointer("/" + key)] = parsed;
    cfg = experiment_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(format_msg("invalid override '", assignment, "': ", e.what()));
  }
}

std::string experiment_config_json(const ExperimentConfig& cfg) { return experiment_to_json(cfg).dump(2); }

// ---------------------------------------------------------------------------
// Pipeline state (latest checkpoints per method chain, task records)
// ---------------------------------------------------------------------------

namespace {

struct TaskRecord {
  std::string task;
  std::string method;
  std::string adapter_dir;  // relative to out_dir
  std::string model_dir;
  DiceResult dice;
  uint64_t logits_hash = 0;
};

struct PipelineState {
  std::map<std::string, std::string> latest;  // chain name -> checkpoint dir (relative)
  std::vector<TaskRecord> tasks;
  float late_w_c = 0.5f;
};

std::string state_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.report_dir()) / "pipeline_state.json").string();
}

PipelineState load_state(const ExperimentConfig& cfg) {
  PipelineState st;
  std::ifstream in(state_path(cfg));
  if (!in) return st;
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(format_msg("malformed pipeline state: ", e.what()));
  }
  const json latest = j.value("latest", json::object());
  for (const auto& [k, v] : latest.items()) st.latest[k] = v.get<std::string>();
  st.late_w_c = j.value("late_w_c", 0.5f);
  const json tasks = j.value("tasks", json::array());
  for (const json& t : tasks) {
    TaskRecord r;
    r.task = t.at("task").get<std::string>();
    r.method = t.at("method").get<std::string>();
    r.adapter_dir = t.at("adapter_dir").get<std::string>();
    r.model_dir = t.at("model_dir").get<std::string>();
    r.dice.tumor = t.at("dice").at("tumor").get<float>();
    r.dice.lymph = t.at("dice").at("lymph").get<float>();
    r.dice.avg = t.at("dice").at("avg").get<float>();
    r.logits_hash = std::stoull(t.at("logits_hash").get<std::string>(), nullptr, 16);
    st.tasks.push_back(std::move(r));
  }
  return st;
}

void save_state(const ExperimentConfig& cfg, const PipelineState& st) {
  fs::create_directories(cfg.report_dir());
  json j;
  j["latest"] = json::object();
  for (const auto& [k, v] : st.latest) j["latest"][k] = v;
  j["late_w_c"] = st.late_w_c;
  j["tasks"] = json::array();
  for (const TaskRecord& r : st.tasks) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r.logits_hash));
    j["tasks"].push_back(json{{"task", r.task},
                              {"method", r.method},
                              {"adapter_dir", r.adapter_dir},
                              {"model_dir", r.model_dir},
                              {"dice", json{{"tumor", r.dice.tumor}, {"lymph", r.dice.lymph}, {"avg", r.dice.avg}}},
                              {"logits_hash", std::string(buf)}});
  }
  std::ofstream out(state_path(cfg), std::ios::trunc);
  out << j.dump(2) << "\n";
}

std::string abs_ckpt(const ExperimentConfig& cfg, const std::string& rel) {
  return (fs::path(cfg.out_dir) / rel).string();
}

DatasetManifest open_manifest(const ExperimentConfig& cfg) {
  const std::string path = (fs::path(cfg.data_dir()) / "manifest.json").string();
  if (!fs::exists(path)) {
    throw ConfigError(format_msg("dataset manifest not found at '", path, "'; run gen-data first"));
  }
  return read_dataset_manifest(path);
}

void write_report_file(const ExperimentConfig& cfg, const std::string& name, const std::string& body) {
  fs::create_directories(cfg.report_dir());
  std::ofstream out(fs::path(cfg.report_dir()) / name, std::ios::trunc);
  out << body << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void run_gen_data(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  generate_dataset(cfg.data, cfg.data_dir());
  log_info("dataset written to ", cfg.data_dir());
}

TrainReport run_pretrain(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  const DatasetManifest manifest = open_manifest(cfg);
  SegModel model = build_unimodal(cfg.model, Topology::kUnimodalCt);
  SplitData data = load_split_data(manifest, cfg.data_dir(), "pretrain");
  TrainConfig tc = cfg.pretrain;
  tc.modalities = Modalities::kC;
  TrainReport report = train(model, data, tc, cfg.checkpoint_dir("pretrain_ct"));
  write_report_file(cfg, "pretrain_report.json", report.to_json());
  return report;
}

TrainReport run_adapt(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  const DatasetManifest manifest = open_manifest(cfg);
  const std::string pre_dir = cfg.checkpoint_dir("pretrain_ct");
  if (!fs::exists(fs::path(pre_dir) / "manifest.json")) {
    throw ConfigError("pretrained checkpoint missing; run pretrain first");
  }
  SegModel pretrained = load_model(pre_dir);
  SplitData data = load_split_data(manifest, cfg.data_dir(), "adapt");
  PipelineState st = load_state(cfg);
  TrainReport report;
  const AdaptationConfig& ad = cfg.adaptation;

  if (ad.method == "pemma") {
    SegModel model = build_pemma(pretrained, ad.rank, ad.alpha, ad.beta, ad.routing);
    TrainConfig tc = cfg.adapt;
    tc.modalities = Modalities::kCP;
    report = train(model, data, tc, cfg.checkpoint_dir("adapt_pemma"));
    st.latest["pemma"] = "checkpoints/adapt_pemma";
  } else if (ad.method == "early") {
    SegModel model = build_early_fusion(pretrained, ad.init);
    TrainConfig tc = cfg.adapt;
    tc.modalities = Modalities::kCP;
    report = train(model, data, tc, cfg.checkpoint_dir("adapt_early"));
    st.latest["early"] = "checkpoints/adapt_early";
  } else {  // late: train the PET branch, keep the CT branch pretrained
    LateFusionPair pair = build_late_fusion(pretrained);
    TrainConfig tc = cfg.adapt;
    tc.modalities = Modalities::kP;
    report = train(pair.pet_model, data, tc, cfg.checkpoint_dir("adapt_late_pet"));
    save_checkpoint(pair.ct_model, cfg.checkpoint_dir("adapt_late_ct"));
    st.latest["late_ct"] = "checkpoints/adapt_late_ct";
    st.latest["late_pet"] = "checkpoints/adapt_late_pet";
    st.late_w_c = ad.w_c;
  }
  save_state(cfg, st);
  write_report_file(cfg, format_msg("adapt_", ad.method, "_report.json"), report.to_json());
  return report;
}

TrainReport run_finetune(ExperimentConfig cfg, const std::string& task, Modalities mods, bool lora_only,
                         const std::string& method) {
  resolve_seeds(cfg);
  if (task != "task1" && task != "task2") {
    throw ConfigError(format_msg("unknown task '", task, "' (expected task1 or task2)"));
  }
  if (method != "pemma" && method != "early" && method != "late") {
    throw ConfigError(format_msg("unknown finetune method '", method, "'"));
  }
  if (lora_only && method != "pemma") throw ConfigError("--lora-only applies to the pemma method");
  const DatasetManifest manifest = open_manifest(cfg);
  SplitData data = load_split_data(manifest, cfg.data_dir(), task);
  PipelineState st = load_state(cfg);

  TrainConfig tc = cfg.finetune;
  tc.modalities = mods;
  // independent stream per (task, method, modalities) leg of the chain
  tc.seed = tc.seed ^ fnv1a(format_msg(task, "/", method, "/", to_string(mods)));

  const std::string mods_tag(to_string(mods));
  TrainReport report;

  if (method == "pemma") {
    auto it = st.latest.find("pemma");
    if (it == st.latest.end()) throw ConfigError("no pemma checkpoint yet; run adapt --method pemma first");
    SegModel model = load_model(abs_ckpt(cfg, it->second));
    tc.trainable_groups = lora_only
                              ? std::set<ParamGroup>{ParamGroup::kLora}
                              : std::set<ParamGroup>{ParamGroup::kPetPe, ParamGroup::kLora, ParamGroup::kPetSk};
    const std::string name = format_msg("finetune_", task, "_pemma_", mods_tag);
    report = train(model, data, tc, cfg.checkpoint_dir(name));
    st.latest["pemma"] = "checkpoints/" + name;

    // reload the selected-best weights before recording task completion
    SegModel best = load_model(cfg.checkpoint_dir(name));
    const std::string adapter_name = format_msg("adapters_", task);
    const std::set<ParamGroup> lora_group{ParamGroup::kLora};
    save_checkpoint(best, cfg.checkpoint_dir(adapter_name), &lora_group);
    TaskRecord rec;
    rec.task = task;
    rec.method = method;
    rec.adapter_dir = "checkpoints/" + adapter_name;
    rec.model_dir = "checkpoints/" + name;
    rec.dice = evaluate_split(best, data.val, Modalities::kCP);
    rec.logits_hash = val_logits_hash(best, data.val, Modalities::kCP);
    std::erase_if(st.tasks, [&](const TaskRecord& r) { return r.task == task && r.method == method; });
    st.tasks.push_back(std::move(rec));
  } else if (method == "early") {
    auto it = st.latest.find("early");
    if (it == st.latest.end()) throw ConfigError("no early-fusion checkpoint yet; run adapt --method early first");
    SegModel model = load_model(abs_ckpt(cfg, it->second));
    const std::string name = format_msg("finetune_", task, "_early_", mods_tag);
    report = train(model, data, tc, cfg.checkpoint_dir(name));
    st.latest["early"] = "checkpoints/" + name;
  } else {  // late
    auto ct_it = st.latest.find("late_ct");
    auto pet_it = st.latest.find("late_pet");
    if (ct_it == st.latest.end() || pet_it == st.latest.end()) {
      throw ConfigError("no late-fusion checkpoints yet; run adapt --method late first");
    }
    SegModel ct_model = load_model(abs_ckpt(cfg, ct_it->second));
    SegModel pet_model = load_model(abs_ckpt(cfg, pet_it->second));
    const std::string ct_name = format_msg("finetune_", task, "_late_", mods_tag, "_ct");
    const std::string pet_name = format_msg("finetune_", task, "_late_", mods_tag, "_pet");
    if (mods != Modalities::kP) {
      TrainConfig ct_tc = tc;
      ct_tc.modalities = Modalities::kC;
      report = train(ct_model, data, ct_tc, cfg.checkpoint_dir(ct_name));
    } else {
      save_checkpoint(ct_model, cfg.checkpoint_dir(ct_name));
    }
    if (mods != Modalities::kC) {
      TrainConfig pet_tc = tc;
      pet_tc.modalities = Modalities::kP;
      pet_tc.seed = tc.seed ^ fnv1a("pet_branch");
      report = train(pet_model, data, pet_tc, cfg.checkpoint_dir(pet_name));
    } else {
      save_checkpoint(pet_model, cfg.checkpoint_dir(pet_name));
    }
    st.latest["late_ct"] = "checkpoints/" + ct_name;
    st.latest["late_pet"] = "checkpoints/" + pet_name;
  }
  save_state(cfg, st);
  write_report_file(cfg, format_msg("finetune_", task, "_", method, "_", mods_tag, "_report.json"),
                    report.to_json());
  return report;
}

DiceResult run_infer(ExperimentConfig cfg, const InferRequest& req) {
  resolve_seeds(cfg);
  const DatasetManifest manifest = open_manifest(cfg);
  const DatasetEntry* entry = nullptr;
  for (const DatasetEntry& e : manifest.entries) {
    if (e.id == req.sample_id) entry = &e;
  }
  if (entry == nullptr) throw ConfigError(format_msg("sample '", req.sample_id, "' not in the dataset manifest"));
  std::string ckpt = req.checkpoint;
  if (ckpt.empty()) {
    PipelineState st = load_state(cfg);
    auto it = st.latest.find("pemma");
    if (it == st.latest.end()) throw ConfigError("no checkpoint given and no pemma checkpoint recorded");
    ckpt = abs_ckpt(cfg, it->second);
  }
  SegModel model = load_model(ckpt);
  const Volume ct = read_volume((fs::path(cfg.data_dir()) / entry->ct_path).string());
  const Volume pet = read_volume((fs::path(cfg.data_dir()) / entry->pet_path).string());
  const LabelMap gt = read_labels((fs::path(cfg.data_dir()) / entry->labels_path).string());
  const LabelMap pred = predict_labels(model, ct, pet, req.modalities);
  if (!req.output_path.empty()) write_labels(req.output_path, pred);
  return dice_result(pred, gt);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

EvalGridReport run_report_grid(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  const DatasetManifest manifest = open_manifest(cfg);
  PipelineState st = load_state(cfg);
  EvalGridReport grid;

  std::map<std::string, std::vector<LoadedSample>> val_sets;
  for (const std::string& split : {"adapt", "task1", "task2"} ) {
    val_sets[split] = load_split(manifest, cfg.data_dir(), split, false);
  }

  struct ColumnGroup {
    std::string dataset;
    std::string train_mods;
  };
  const std::vector<ColumnGroup> groups = {
      {"adapt", "CP"}, {"task1", "C"}, {"task1", "CP"}, {"task2", "C"}, {"task2", "CP"}};
  const std::vector<Modalities> infer_cols = {Modalities::kCP, Modalities::kC, Modalities::kP};

  auto model_dir_for = [&](const std::string& method, const ColumnGroup& g) -> std::string {
    if (g.dataset == "adapt") return format_msg("checkpoints/adapt_", method);
    return format_msg("checkpoints/finetune_", g.dataset, "_", method, "_", g.train_mods);
  };

  for (const std::string& method : {"late", "early", "pemma"}) {
    for (const ColumnGroup& g : groups) {
      std::optional<SegModel> model;
      std::optional<LateFusionPair> pair;
      if (method == "late") {
        std::string ct_dir = g.dataset == "adapt" ? "checkpoints/adapt_late_ct"
                                                  : model_dir_for(method, g) + "_ct";
        std::string pet_dir = g.dataset == "adapt" ? "checkpoints/adapt_late_pet"
                                                   : model_dir_for(method, g) + "_pet";
        if (fs::exists(fs::path(abs_ckpt(cfg, ct_dir)) / "manifest.json") &&
            fs::exists(fs::path(abs_ckpt(cfg, pet_dir)) / "manifest.json")) {
          LateFusionPair p;
          p.ct_model = load_model(abs_ckpt(cfg, ct_dir));
          p.pet_model = load_model(abs_ckpt(cfg, pet_dir));
          p.w_c = st.late_w_c;
          pair = std::move(p);
        }
      } else {
        const std::string dir = model_dir_for(method, g);
        if (fs::exists(fs::path(abs_ckpt(cfg, dir)) / "manifest.json")) {
          model = load_model(abs_ckpt(cfg, dir));
        }
      }
      for (Modalities infer : infer_cols) {
        GridCell cell;
        cell.method = method;
        cell.dataset = g.dataset;
        cell.train_mods = g.train_mods;
        cell.infer = infer;
        if (pair.has_value()) {
          cell.present = true;
          cell.dice = evaluate_split_late(*pair, val_sets[g.dataset], infer);
        } else if (model.has_value()) {
          cell.present = true;
          cell.dice = evaluate_split(*model, val_sets[g.dataset], infer);
        }
        grid.cells.push_back(std::move(cell));
      }
    }
  }
  write_report_file(cfg, "grid_report.json", grid.to_json());
  write_report_file(cfg, "grid_report.txt", grid.to_table());
  return grid;
}

ParamReport run_report_params(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  // accounting is architectural: build fresh models at the configured dims
  SegModel unimodal = build_unimodal(cfg.model, Topology::kUnimodalCt);
  SegModel early = build_early_fusion(unimodal, cfg.adaptation.init);
  SegModel pemma = build_pemma(unimodal, cfg.adaptation.rank, cfg.adaptation.alpha, cfg.adaptation.beta,
                               cfg.adaptation.routing);
  LateFusionPair late = build_late_fusion(unimodal);
  late.w_c = cfg.adaptation.w_c;
  ParamReport rep = make_param_report(unimodal, &early, &pemma, &late);
  write_report_file(cfg, "param_report.json", rep.to_json());
  write_report_file(cfg, "param_report.txt", rep.to_table());
  return rep;
}

ForgettingReport run_report_forgetting(ExperimentConfig cfg) {
  resolve_seeds(cfg);
  PipelineState st = load_state(cfg);
  ForgettingReport rep;
  if (st.tasks.empty()) {
    write_report_file(cfg, "forgetting_report.json", rep.to_json());
    return rep;  // zero tasks: empty report
  }
  const DatasetManifest manifest = open_manifest(cfg);
  auto latest_it = st.latest.find("pemma");
  if (latest_it == st.latest.end()) throw ConfigError("no pemma chain recorded");
  SegModel latest = load_model(abs_ckpt(cfg, latest_it->second));

  for (const TaskRecord& rec : st.tasks) {
    std::vector<LoadedSample> val = load_split(manifest, cfg.data_dir(), rec.task, false);
    ForgettingEntry entry;
    entry.task = rec.task;
    entry.at_completion = rec.dice;
    entry.with_latest = evaluate_split(latest, val, Modalities::kCP);
    SegModel restored = clone_model(latest);
    load_checkpoint(restored, abs_ckpt(cfg, rec.adapter_dir));
    entry.with_restored = evaluate_split(restored, val, Modalities::kCP);
    entry.drift_avg_delta = static_cast<double>(entry.with_latest.avg) - entry.at_completion.avg;
    entry.restoration_bit_identical =
        val_logits_hash(restored, val, Modalities::kCP) == rec.logits_hash;
    rep.entries.push_back(std::move(entry));
  }
  write_report_file(cfg, "forgetting_report.json", rep.to_json());
  write_report_file(cfg, "forgetting_report.txt", rep.to_table());
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  std::vector<float> vals(static_cast<size_t>(numel(shape)));
  for (float& v : vals) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor(std::move(shape), std::move(vals));
}

int report_check(std::ostream& os, const std::string& name, const GradCheckResult& res, float tol) {
  const bool ok = res.ok(tol);
  os << (ok ? "[ok]   " : "[FAIL] ") << name << "  max_rel=" << res.max_rel_error << " (tol " << tol << ")";
  if (!res.finite) os << "  " << res.message;
  os << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int run_gradcheck(std::ostream& os) {
  int failures = 0;
  Rng rng(20260808);

  {
    Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng), u = random_tensor({3, 4}, rng);
    failures += report_check(os, "matmul",
                             grad_check([&] { return sum(mul(matmul(a, b), u)); }, a, {}), 1e-3f);
  }
  {
    Tensor x = random_tensor({4, 6}, rng), u = random_tensor({4, 6}, rng);
    failures += report_check(os, "softmax",
                             grad_check([&] { return sum(mul(softmax(x, 1), u)); }, x, {}), 1e-3f);
    failures += report_check(os, "log_softmax",
                             grad_check([&] { return sum(mul(log_softmax(x, 0), u)); }, x, {}), 1e-3f);
    failures += report_check(os, "gelu", grad_check([&] { return sum(mul(gelu(x), u)); }, x, {}), 1e-3f);
    Tensor gamma = random_tensor({6}, rng, 0.3), beta = random_tensor({6}, rng, 0.3);
    failures += report_check(
        os, "layer_norm", grad_check([&] { return sum(mul(layer_norm(x, gamma, beta), u)); }, x, {}), 1e-3f);
    Tensor bias = random_tensor({6}, rng);
    failures += report_check(os, "add_bias",
                             grad_check([&] { return sum(mul(add_bias(x, bias), u)); }, bias, {}), 1e-3f);
  }
  {
    Tensor x = random_tensor({2, 4, 4, 4}, rng, 0.5), w = random_tensor({3, 2, 3, 3, 3}, rng, 0.2);
    Tensor b = random_tensor({3}, rng, 0.1), u = random_tensor({3, 4, 4, 4}, rng);
    failures += report_check(os, "conv3d",
                             grad_check([&] { return sum(mul(conv3d(x, w, b, 1, 1), u)); }, w, {}), 1e-3f);
    Tensor wd = random_tensor({2, 3, 2, 2, 2}, rng, 0.3), ud = random_tensor({3, 8, 8, 8}, rng);
    failures += report_check(
        os, "conv_transpose3d",
        grad_check([&] { return sum(mul(conv_transpose3d(x, wd, b, 2), ud)); }, wd, {}), 1e-3f);
  }
  {
    ParamRegistry reg;
    Rng lrng(11);
    PatchEmbed3D pe = make_patch_embed(reg, "pe", ParamGroup::kBase, 4, 1, 8, 2, true, lrng);
    Tensor vol = random_tensor({1, 8, 8, 8}, rng, 0.5), u = random_tensor({8, 8}, rng);
    // linear in the weight: a larger probe step has zero truncation error and
    // divides the f32 readout noise
    GradCheckOptions pe_opts;
    pe_opts.eps = 0.1f;
    failures += report_check(
        os, "patch_embed",
        grad_check([&] { return sum(mul(patch_embed_forward(pe, vol), u)); }, pe.weight, pe_opts), 1e-3f);

    TransformerBlock blk = make_block(reg, "blk", 8, 2, lrng);
    AdapterSet ads = make_adapter_set(reg, 1, 8, 2, 4.0f, lrng);
    for (auto& [key, ad] : ads.adapters) {
      for (float& v : ad.b.data()) v = static_cast<float>(rng.normal(0.0, 0.02));
    }
    Tensor tok = random_tensor({6, 8}, rng), ut = random_tensor({6, 8}, rng);
    auto fb = [&] {
      return sum(mul(block_forward(blk, tok, ads.find(0, LoraTarget::kQuery), ads.find(0, LoraTarget::kValue)), ut));
    };
    failures += report_check(os, "transformer_block(wq)", grad_check(fb, blk.wq, {}), 1e-3f);
    failures += report_check(os, "transformer_block(lora.A)",
                             grad_check(fb, ads.find(0, LoraTarget::kQuery)->a, {}), 1e-3f);
    failures += report_check(os, "transformer_block(lora.B)",
                             grad_check(fb, ads.find(0, LoraTarget::kValue)->b, {}), 1e-3f);

    SkipConv stem = make_skip_conv(reg, "stem", ParamGroup::kBase, 1, 3, lrng, false);
    Tensor uv = random_tensor({3, 8, 8, 8}, rng);
    failures += report_check(
        os, "skip_conv",
        grad_check([&] { return sum(mul(skip_forward(stem, vol), uv)); }, stem.conv1.weight, {}), 1e-3f);
  }
  {
    // Dice+CE on a 4^3 volume
    LabelMap labels;
    labels.dims = {4, 4, 4};
    labels.labels.assign(64, 0);
    for (int i = 0; i < 10; ++i) labels.labels[static_cast<size_t>(rng.uniform_int(0, 63))] = 1;
    for (int i = 0; i < 10; ++i) labels.labels[static_cast<size_t>(rng.uniform_int(0, 63))] = 2;
    Tensor logits = random_tensor({3, 4, 4, 4}, rng);
    failures += report_check(os, "dice_ce_loss",
                             grad_check([&] { return dice_ce_loss(logits, labels); }, logits, {}), 5e-3f);
  }
  {
    // full PEMMA model loss on one 8^3 volume, checked against every
    // trainable tensor at a sampled set of coordinates
    ModelConfig mc;
    mc.blocks = 2;
    mc.dim = 16;
    mc.heads = 4;
    mc.patch = 4;
    mc.input_size = 8;
    mc.skip_features = 4;
    mc.seed = 99;
    SegModel pre = build_unimodal(mc, Topology::kUnimodalCt);
    SegModel model = build_pemma(pre, 4, 8.0f, 1.0f, Routing::kCtOnly);
    // move off the zero-init point so every path carries signal
    for (Parameter& p : model.params.items()) {
      if (!p.trainable) continue;
      for (float& v : p.tensor.data()) v += static_cast<float>(rng.normal(0.0, 0.02));
    }
    PhantomSpec spec;
    spec.seed = 5;
    spec.dims = {8, 8, 8};
    spec.tumor_r_min = 1.0f;
    spec.tumor_r_max = 1.6f;
    spec.lymph_r_min = 1.0f;
    spec.lymph_r_max = 1.6f;
    spec.ct_contrast = 0.5f;
    Phantom ph = generate_phantom(spec);
    Tensor ct = to_tensor(ph.ct), pet = to_tensor(ph.pet);
    auto loss_fn = [&] { return dice_ce_loss(model.forward(ct, pet), ph.labels); };
    GradCheckOptions opts;
    opts.max_coords = 24;
    float worst = 0.0f;
    bool all_finite = true;
    for (Parameter& p : model.params.items()) {
      if (!p.trainable) continue;
      opts.sample_seed = fnv1a(p.name);
      GradCheckResult res = grad_check(loss_fn, p.tensor, opts);
      worst = std::max(worst, res.max_rel_error);
      all_finite = all_finite && res.finite;
    }
    GradCheckResult overall;
    overall.max_rel_error = worst;
    overall.finite = all_finite;
    failures += report_check(os, "pemma_full_model(8^3, all trainable tensors)", overall, 5e-3f);
  }
  return failures;
}

}  // namespace pemma
