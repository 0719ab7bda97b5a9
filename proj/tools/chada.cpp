// chada: command-line front end for synthesis, pretraining and evaluation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chada/baselines.hpp"
#include "chada/dataset.hpp"
#include "chada/encoder.hpp"
#include "chada/eval.hpp"
#include "chada/io.hpp"
#include "chada/serialize.hpp"
#include "chada/ssl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace chada;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void log(const std::string& msg) { std::cerr << "chada: " << msg << "\n"; }

// ---------------------------------------------------------------- config file

struct RunConfig {
  EncoderConfig encoder;
  DinoConfig dino;
  bool lr_given = false;
  ProbeConfig probe;
  DecoderConfig decoder;
  DecoderTrainConfig decoder_train;
  std::size_t knn_k = 20;
  std::vector<std::uint64_t> seeds{0};
};

template <typename V>
void take(const json& obj, const char* key, V& into, const std::string& ctx) {
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw UsageError(ctx + "." + key + ": wrong type");
  }
}

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError(path + ": top level must be an object");
  try {
    require_known_keys(j, {"encoder", "dino", "probe", "decoder", "knn", "seeds"}, path);
    if (j.contains("encoder")) rc.encoder = encoder_config_from_json(j["encoder"]);
    if (j.contains("dino")) {
      rc.dino = dino_config_from_json(j["dino"]);
      rc.lr_given = j["dino"].contains("base_lr");
    }
    if (j.contains("probe")) {
      const auto& p = j["probe"];
      require_known_keys(p, {"epochs", "lr", "momentum", "batch_size"}, path + ": probe");
      take(p, "epochs", rc.probe.epochs, "probe");
      take(p, "lr", rc.probe.lr, "probe");
      take(p, "momentum", rc.probe.momentum, "probe");
      take(p, "batch_size", rc.probe.batch_size, "probe");
    }
    if (j.contains("decoder")) {
      const auto& d = j["decoder"];
      require_known_keys(d, {"hidden", "parameter_budget", "output_side", "steps", "batch_size", "lr"},
                         path + ": decoder");
      take(d, "hidden", rc.decoder.hidden, "decoder");
      take(d, "parameter_budget", rc.decoder.parameter_budget, "decoder");
      take(d, "output_side", rc.decoder.output_side, "decoder");
      take(d, "steps", rc.decoder_train.steps, "decoder");
      take(d, "batch_size", rc.decoder_train.batch_size, "decoder");
      take(d, "lr", rc.decoder_train.lr, "decoder");
    }
    if (j.contains("knn")) {
      require_known_keys(j["knn"], {"k"}, path + ": knn");
      take(j["knn"], "k", rc.knn_k, "knn");
    }
    take(j, "seeds", rc.seeds, "config");
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(path + ": " + e.what());
  }
  return rc;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw UsageError("--seeds: empty list");
  return out;
}

// ---------------------------------------------------------------- data

/// A manifest path, a dataset directory, or either relative to CHADA_DATA_DIR.
std::string resolve_manifest(const std::string& arg) {
  std::vector<fs::path> candidates{arg};
  if (const char* root = std::getenv("CHADA_DATA_DIR"); root && fs::path(arg).is_relative()) {
    candidates.push_back(fs::path(root) / arg);
  }
  for (const auto& c : candidates) {
    if (fs::is_directory(c) && fs::exists(c / "manifest.json")) return (c / "manifest.json").string();
    if (fs::is_regular_file(c)) return c.string();
  }
  throw DataError("dataset not found: " + arg);
}

struct Loaded {
  std::string name;
  Dataset data;
  std::vector<MultiChannelImage> train, test;
  std::vector<double> train_y, test_y;
};

Loaded load_data(const std::string& arg, std::size_t side) {
  Loaded l;
  l.name = arg;
  l.data = load_dataset(resolve_manifest(arg));
  for (auto& s : l.data.samples) {
    auto img = s.image.height == side && s.image.width == side ? s.image : resize_bilinear(s.image, side);
    if (s.split == Split::Train) {
      l.train.push_back(std::move(img));
      l.train_y.push_back(s.label);
    } else {
      l.test.push_back(std::move(img));
      l.test_y.push_back(s.label);
    }
  }
  if (l.train.empty()) throw DataError(arg + ": no training samples");
  return l;
}

std::vector<int> int_labels(const std::vector<double>& y) {
  std::vector<int> out;
  for (double v : y) out.push_back(static_cast<int>(std::lround(v)));
  return out;
}

// ---------------------------------------------------------------- models

struct LoadedModel {
  Arch arch = Arch::Chada;
  EncoderConfig encoder;  // as configured, before any baseline rewrite
  Model<float> model;
};

std::string with_seed(const std::string& pattern, std::uint64_t seed) {
  std::string out = pattern;
  const auto at = out.find("{seed}");
  if (at != std::string::npos) out.replace(at, 6, std::to_string(seed));
  return out;
}

/// Student backbone of a checkpoint written by `train`.
LoadedModel load_model(const std::string& path, Pooling pooling) {
  const auto ck = load_checkpoint(path);
  json cfg;
  try {
    cfg = json::parse(ck.config_json);
    LoadedModel lm;
    lm.arch = parse_arch(cfg.at("arch").get<std::string>());
    lm.encoder = encoder_config_from_json(cfg.at("encoder"));
    DinoTrainer trainer(lm.arch, lm.encoder, dino_config_from_json(cfg.at("dino")));
    trainer.load(path);
    lm.model = trainer.student();
    lm.model.config.pooling = pooling;
    return lm;
  } catch (const json::exception& e) {
    throw DataError(path + ".json: malformed run configuration: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(path + ".json: " + e.what());
  }
}

/// Embeds with up to `threads` workers; work is split on whole batches so
/// the result does not depend on the thread count.
Embeddings embed_parallel(const Model<float>& model, const std::vector<MultiChannelImage>& images,
                          std::size_t threads) {
  constexpr std::size_t kBatch = 32;
  const std::size_t batches = (images.size() + kBatch - 1) / kBatch;
  threads = std::max<std::size_t>(1, std::min(threads, batches));
  if (threads == 1) return embed_images(model, images, kBatch);
  std::vector<Embeddings> parts(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t per = (batches + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t lo = std::min(images.size(), t * per * kBatch);
        const std::size_t hi = std::min(images.size(), (t + 1) * per * kBatch);
        if (lo < hi) parts[t] = embed_images(model, std::span(images).subspan(lo, hi - lo), kBatch);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Embeddings out;
  for (auto& p : parts) {
    if (p.rows == 0) continue;
    if (out.rows > 0 && p.width != out.width) throw WidthMismatchError("embedding width changed across workers");
    out.width = p.width;
    out.rows += p.rows;
    out.values.insert(out.values.end(), p.values.begin(), p.values.end());
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

json reports_json(const std::vector<EvalReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(json::parse(r.to_json().dump()));  // sorted keys
  return arr;
}

// ---------------------------------------------------------------- options shared by subcommands

struct Common {
  std::string config_path;
  std::string seeds;
  std::size_t threads = 1;
  std::string checkpoint;
  std::string pool = "cls";
  std::string out;
};

void add_model_options(CLI::App* sub, Common& c) {
  sub->add_option("--checkpoint", c.checkpoint,
                  "Checkpoint prefix written by `train`; {seed} is replaced by each seed")
      ->required();
  sub->add_option("--pool", c.pool, "Embedding pooling")->check(CLI::IsMember({"cls", "mean"}));
  sub->add_option("--threads", c.threads, "Worker threads for embedding extraction")->check(CLI::PositiveNumber);
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Channel-adaptive image encoder: data synthesis, pretraining and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config_path, "JSON run configuration; flags override its values")
      ->check(CLI::ExistingFile);
  app.add_option("--seeds", c.seeds, "Comma-separated seed list (default: config or 0)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic MCIF dataset with a manifest");
  SyntheticOptions so;
  std::string synth_kind = "interchannel-xor";
  synth->add_option("--kind", synth_kind, "interchannel-xor, intrachannel-shape or reconstruction")
      ->check(CLI::IsMember({"interchannel-xor", "intrachannel-shape", "reconstruction"}));
  synth->add_option("--count", so.count, "Number of images")->check(CLI::PositiveNumber);
  synth->add_option("--channels", so.channels, "Channels per image")->check(CLI::PositiveNumber);
  synth->add_option("--side", so.side, "Image side in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed, "Generator seed");
  synth->add_option("--test-fraction", so.test_fraction, "Fraction of samples in the test split")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--out", c.out, "Output directory (relative paths land under CHADA_DATA_DIR if set)")
      ->required();

  // train
  auto* train = app.add_subcommand("train", "Self-supervised DINO pretraining");
  std::string arch_name = "chada", data_arg, resume;
  std::optional<std::size_t> steps, batch;
  std::optional<double> lr;
  std::optional<std::uint64_t> train_seed;
  std::size_t checkpoint_every = 0;
  train->add_option("--arch", arch_name, "Encoder")->check(CLI::IsMember({"chada", "onechannel", "interchannel"}));
  train->add_option("--data", data_arg, "Dataset directory or manifest")->required();
  train->add_option("--out", c.out, "Checkpoint prefix for the final state; the log goes to <out>.log.jsonl")
      ->required();
  train->add_option("--seed", train_seed, "Run seed (overrides dino.seed)");
  train->add_option("--steps", steps, "Optimisation steps")->check(CLI::PositiveNumber);
  train->add_option("--batch-size", batch, "Images per step")->check(CLI::PositiveNumber);
  train->add_option("--lr", lr, "Peak learning rate (default depends on --arch)")->check(CLI::NonNegativeNumber);
  train->add_option("--checkpoint-every", checkpoint_every, "Also save <out>-<step> every N steps");
  train->add_option("--resume", resume, "Continue from this checkpoint prefix");

  // encode
  auto* encode = app.add_subcommand("encode", "Embed a dataset into a CSV");
  add_model_options(encode, c);
  encode->add_option("--data", data_arg, "Dataset directory or manifest")->required();
  encode->add_option("--out", c.out, "CSV path: split,label,e0..e{w-1}")->required();

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen embeddings");
  std::optional<double> fraction;
  add_model_options(probe, c);
  probe->add_option("--data", data_arg, "Dataset directory or manifest")->required();
  probe->add_option("--fraction", fraction, "Labelled fraction of the training split (1.0, 0.1, 0.01)")
      ->check(CLI::Range(0.0, 1.0));
  probe->add_option("--epochs", steps, "Probe epochs")->check(CLI::PositiveNumber);
  probe->add_option("--out", c.out, "Report JSON")->required();

  // knn
  auto* knn = app.add_subcommand("knn", "k-nearest-neighbour evaluation on frozen embeddings");
  std::optional<std::size_t> k;
  add_model_options(knn, c);
  knn->add_option("--data", data_arg, "Dataset directory or manifest")->required();
  knn->add_option("--k", k, "Neighbours")->check(CLI::PositiveNumber);
  knn->add_option("--out", c.out, "Report JSON")->required();

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "Train a decoder to predict a held-out channel");
  std::optional<std::size_t> target;
  std::optional<std::size_t> hidden;
  add_model_options(recon, c);
  recon->add_option("--data", data_arg, "Dataset directory or manifest")->required();
  recon->add_option("--target-channel", target, "Channel to predict (default: the manifest's)");
  recon->add_option("--steps", steps, "Decoder training steps")->check(CLI::PositiveNumber);
  recon->add_option("--hidden", hidden, "Decoder hidden width (default: sized to the parameter budget)");
  recon->add_option("--out", c.out, "Report JSON (r2, mse, mae)")->required();

  // attmap
  auto* attmap = app.add_subcommand("attmap", "CLS attention heatmaps of one layer for one image");
  std::size_t layer = 0;
  std::string image_path;
  add_model_options(attmap, c);
  attmap->add_option("--image", image_path, "MCIF image")->required();
  attmap->add_option("--layer", layer, "Transformer layer (0-based)");
  attmap->add_option("--out", c.out, "Output directory: one PGM per head and channel plus weights.json")
      ->required();

  // pca
  auto* pca = app.add_subcommand("pca", "Joint PCA of two datasets' embeddings");
  std::string datasets;
  std::size_t components = 2;
  add_model_options(pca, c);
  pca->add_option("--datasets", datasets, "Two datasets, comma separated")->required();
  pca->add_option("--components", components, "Principal components")->check(CLI::PositiveNumber);
  pca->add_option("--out", c.out, "CSV path: dataset,label,pc1..; a summary goes to <out>.json")->required();

  // report
  auto* report = app.add_subcommand("report", "Aggregate report JSON files into one mean ± std table");
  std::vector<std::string> inputs;
  std::string table_path;
  report->add_option("inputs", inputs, "Report JSON files from probe, knn or reconstruct")->required();
  report->add_option("--out", c.out, "Aggregated JSON (sorted keys)")->required();
  report->add_option("--table", table_path, "Also write a Markdown table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  auto rc = load_config(c.config_path);
  if (!c.seeds.empty()) rc.seeds = parse_seeds(c.seeds);
  const Pooling pooling = parse_pooling(c.pool);

  if (synth->parsed()) {
    so.kind = parse_synthetic_kind(synth_kind);
    fs::path dir = c.out;
    if (const char* root = std::getenv("CHADA_DATA_DIR"); root && dir.is_relative()) dir = fs::path(root) / dir;
    const auto ds = generate_synthetic(so);
    write_dataset(dir.string(), ds);
    log("wrote " + std::to_string(ds.samples.size()) + " images to " + dir.string());
    return 0;
  }

  if (train->parsed()) {
    const Arch arch = parse_arch(arch_name);
    if (train_seed) rc.dino.seed = *train_seed;
    if (steps) rc.dino.steps = *steps;
    if (batch) rc.dino.batch_size = *batch;
    if (lr) {
      rc.dino.base_lr = *lr;
    } else if (!rc.lr_given) {
      rc.dino.base_lr = default_base_lr(arch);
    }
    rc.encoder.validate();
    rc.dino.validate();
    const auto data = load_data(data_arg, rc.encoder.image_side);
    DinoTrainer trainer(arch, rc.encoder, rc.dino);
    if (!resume.empty()) {
      trainer.load(resume);
      log("resumed from " + resume + " at step " + std::to_string(trainer.step()));
    }
    const auto pool = DinoTrainer::training_pool(arch, data.train);
    log("training " + arch_name + " for " + std::to_string(rc.dino.steps) + " steps on " +
        std::to_string(pool.size()) + " images");
    if (const auto parent = fs::path(c.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    const auto records = trainer.run(pool, c.out + ".log.jsonl", checkpoint_every, c.out);
    trainer.save(c.out);
    if (!records.empty()) {
      log("final loss " + std::to_string(records.back().loss) + "; checkpoint " + c.out + ".{json,bin}");
    }
    return 0;
  }

  if (report->parsed()) {
    json table = json::object();
    std::string md = "| task | metric | seeds | mean ± std |\n|---|---|---|---|\n";
    std::vector<EvalReport> all;
    for (const auto& path : inputs) {
      std::ifstream in(path);
      if (!in) throw DataError("cannot open report " + path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw DataError(path + ": " + e.what());
      }
      try {
        for (const auto& item : j.is_array() ? j : json::array({j})) all.push_back(EvalReport::from_json(item));
      } catch (const std::exception& e) {
        throw DataError(path + ": " + e.what());
      }
    }
    std::sort(all.begin(), all.end(), [](const EvalReport& a, const EvalReport& b) {
      return std::pair(a.task, to_string(a.metric)) < std::pair(b.task, to_string(b.metric));
    });
    for (const auto& r : all) {
      const std::string key = r.task + "/" + to_string(r.metric);
      if (table.contains(key)) throw DataError("report: duplicate entry " + key);
      table[key] = {{"formatted", r.formatted()}, {"mean", r.summary.mean}, {"std", r.summary.std},
                    {"n", r.values.size()}};
      md += "| " + r.task + " | " + to_string(r.metric) + " | " + std::to_string(r.values.size()) + " | " +
            r.formatted() + " |\n";
    }
    write_text(c.out, table.dump(2) + "\n");
    if (!table_path.empty()) write_text(table_path, md);
    std::cerr << md;
    return 0;
  }

  if (attmap->parsed()) {
    const auto lm = load_model(c.checkpoint, pooling);
    if (lm.arch != Arch::Chada) throw UsageError("attmap: needs a chada checkpoint, got " + to_string(lm.arch));
    auto img = read_mcif(image_path);
    if (img.height != lm.model.config.image_side || img.width != lm.model.config.image_side) {
      img = resize_bilinear(img, lm.model.config.image_side);
    }
    const auto maps = attention_maps(img, lm.model.vit, lm.model.config, layer);
    fs::create_directories(c.out);
    json summary = {{"layer", layer}, {"heads", maps.heads}, {"channels", maps.channels}, {"grid", maps.grid}};
    json cls = json::array();
    for (std::size_t h = 0; h < maps.heads; ++h) {
      json per_head = json::array();
      for (std::size_t ch = 0; ch < maps.channels; ++ch) {
        auto heat = maps.cls_heatmap(h, ch);
        per_head.push_back(heat);
        const float mx = *std::max_element(heat.begin(), heat.end());
        if (mx > 0.0f) {
          for (auto& v : heat) v /= mx;
        }
        write_pgm((fs::path(c.out) / ("head" + std::to_string(h) + "_channel" + std::to_string(ch) + ".pgm")).string(),
                  heat, maps.grid, maps.grid);
      }
      cls.push_back(per_head);
    }
    summary["cls_weights"] = cls;
    write_text((fs::path(c.out) / "weights.json").string(), summary.dump() + "\n");
    log("wrote " + std::to_string(maps.heads * maps.channels) + " heatmaps to " + c.out);
    return 0;
  }

  if (pca->parsed()) {
    const auto comma = datasets.find(',');
    if (comma == std::string::npos || datasets.find(',', comma + 1) != std::string::npos) {
      throw UsageError("--datasets: expected exactly two names separated by a comma");
    }
    const std::string name_a = datasets.substr(0, comma), name_b = datasets.substr(comma + 1);
    const auto lm = load_model(with_seed(c.checkpoint, rc.seeds.front()), pooling);
    auto all_images = [](const Loaded& l) {
      auto v = l.train;
      v.insert(v.end(), l.test.begin(), l.test.end());
      auto y = l.train_y;
      y.insert(y.end(), l.test_y.begin(), l.test_y.end());
      return std::pair{v, int_labels(y)};
    };
    const auto [ia, la] = all_images(load_data(name_a, lm.encoder.image_side));
    const auto [ib, lb] = all_images(load_data(name_b, lm.encoder.image_side));
    const auto res = joint_space_analysis(embed_parallel(lm.model, ia, c.threads),
                                          embed_parallel(lm.model, ib, c.threads), components);
    write_text(c.out, joint_space_csv(res, name_a, la, name_b, lb));
    json summary = {{"datasets", {name_a, name_b}},
                    {"explained_ratio", res.pca.explained_ratio},
                    {"pc1_accuracy", res.pc1_accuracy},
                    {"pc1_threshold", res.pc1_threshold},
                    {"width", res.pca.width}};
    write_text(c.out + ".json", summary.dump(2) + "\n");
    log("PC1 dataset-identity accuracy " + std::to_string(res.pc1_accuracy));
    return 0;
  }

  if (encode->parsed()) {
    const auto lm = load_model(with_seed(c.checkpoint, rc.seeds.front()), pooling);
    const auto data = load_data(data_arg, lm.encoder.image_side);
    const auto tr = embed_parallel(lm.model, data.train, c.threads);
    const auto te = embed_parallel(lm.model, data.test, c.threads);
    std::ostringstream csv;
    csv.precision(9);
    csv << "split,label";
    for (std::size_t j = 0; j < tr.width; ++j) csv << ",e" << j;
    csv << "\n";
    auto rows = [&](const Embeddings& e, const std::vector<double>& y, const char* split) {
      for (std::size_t i = 0; i < e.rows; ++i) {
        csv << split << "," << y[i];
        for (double v : e.row(i)) csv << "," << v;
        csv << "\n";
      }
    };
    rows(tr, data.train_y, "train");
    rows(te, data.test_y, "test");
    write_text(c.out, csv.str());
    log("wrote " + std::to_string(tr.rows + te.rows) + " embeddings of width " + std::to_string(tr.width) + " to " +
        c.out);
    return 0;
  }

  // probe, knn and reconstruct: one value per seed, aggregated
  std::vector<double> values, mse_values, mae_values;
  std::string task;
  for (auto seed : rc.seeds) {
    const auto path = with_seed(c.checkpoint, seed);
    const auto lm = load_model(path, pooling);
    const auto data = load_data(data_arg, lm.encoder.image_side);
    if (data.test.empty()) throw DataError(data_arg + ": no test samples");
    task = fs::path(resolve_manifest(data_arg)).parent_path().filename().string();
    if (probe->parsed() || knn->parsed()) {
      if (data.data.kind != TaskKind::Classification) {
        throw UsageError(std::string(probe->parsed() ? "probe" : "knn") + ": " + data_arg +
                         " is not a classification dataset");
      }
      const auto tr = embed_parallel(lm.model, data.train, c.threads);
      const auto te = embed_parallel(lm.model, data.test, c.threads);
      if (probe->parsed()) {
        auto pc = rc.probe;
        pc.seed = seed;
        if (fraction) pc.fraction = *fraction;
        if (steps) pc.epochs = *steps;
        pc.validate();
        values.push_back(probe_accuracy(tr, int_labels(data.train_y), te, int_labels(data.test_y), pc));
      } else {
        values.push_back(knn_eval(tr, int_labels(data.train_y), te, int_labels(data.test_y), k.value_or(rc.knn_k)));
      }
    } else {
      const std::size_t channel =
          target ? *target : data.data.target_channel.value_or(data.train.front().channels() - 1);
      auto dc = rc.decoder;
      dc.input_dim = lm.model.embedding_width(data.train.front().channels() - 1);
      if (hidden) dc.hidden = *hidden;
      auto dt = rc.decoder_train;
      dt.seed = seed;
      if (steps) dt.steps = *steps;
      const auto res = train_channel_decoder(lm.model, data.train, channel, dc, dt);
      const auto pred = predict_channel(lm.model, res.decoder, data.test, channel);
      std::vector<double> truth;
      for (const auto& img : data.test) {
        const auto t = target_plane(img, channel, dc.output_side);
        truth.insert(truth.end(), t.begin(), t.end());
      }
      values.push_back(compute_metric(MetricKind::R2, pred, truth));
      mse_values.push_back(compute_metric(MetricKind::Mse, pred, truth));
      mae_values.push_back(compute_metric(MetricKind::Mae, pred, truth));
    }
    log(path + ": " + std::to_string(values.back()));
  }
  std::vector<EvalReport> reports;
  if (probe->parsed()) {
    std::ostringstream name;
    name << task << "-probe@" << fraction.value_or(1.0);
    reports.push_back(EvalReport::make(name.str(), MetricKind::Top1, rc.seeds, values));
  } else if (knn->parsed()) {
    reports.push_back(EvalReport::make(task + "-knn", MetricKind::Top1, rc.seeds, values));
  } else {
    reports.push_back(EvalReport::make(task + "-reconstruct", MetricKind::R2, rc.seeds, values));
    reports.push_back(EvalReport::make(task + "-reconstruct", MetricKind::Mse, rc.seeds, mse_values));
    reports.push_back(EvalReport::make(task + "-reconstruct", MetricKind::Mae, rc.seeds, mae_values));
  }
  write_text(c.out, reports_json(reports).dump(2) + "\n");
  for (const auto& r : reports) log(r.task + " " + to_string(r.metric) + ": " + r.formatted());
  return 0;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    log(std::string("usage error: ") + e.what());
    return 1;
  } catch (const NumericalError& e) {
    log(std::string("numerical failure: ") + e.what());
    return 3;
  } catch (const DataError& e) {
    log(std::string("data error: ") + e.what());
    return 2;
  } catch (const WidthMismatchError& e) {
    log(std::string("data error: ") + e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    log(std::string("usage error: ") + e.what());
    return 1;
  } catch (const std::out_of_range& e) {
    log(std::string("usage error: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 2;
  }
}
