// Command-line front end: synthetic scene generation, training, evaluation,
// inference, ablation sweeps, and neighborhood diagnostics.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "baaf/checkpoint.hpp"
#include "baaf/cloud.hpp"
#include "baaf/config.hpp"
#include "baaf/metrics.hpp"
#include "baaf/model.hpp"
#include "baaf/spatial.hpp"
#include "baaf/train.hpp"

namespace {

using namespace baaf;

CloudFormat parse_format(const std::string& name) {
  if (name == "text") return CloudFormat::text;
  if (name == "binary") return CloudFormat::binary;
  throw ConfigError("format must be 'text' or 'binary'");
}

// Sniffs the binary magic so callers never have to say which format a
// cloud file uses.
PointCloud load_cloud_auto(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cloud: cannot open '" + path + "'");
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  probe.close();
  const bool binary = std::memcmp(magic, "PCSB", 4) == 0;
  return load_cloud(path, binary ? CloudFormat::binary : CloudFormat::text);
}

void emit_report(const std::string& text, const std::string& report_path) {
  std::cout << text;
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw IoError("report: cannot write '" + report_path + "'");
    os << text;
  }
}

void check_labels_fit(const PointCloud& cloud, int num_classes) {
  if (!cloud.has_labels()) throw ValueError("cloud has no labels");
  if (cloud.num_classes > num_classes)
    throw ValueError("cloud labels span " + std::to_string(cloud.num_classes) +
                     " classes but the model has " + std::to_string(num_classes));
}

std::string scores_text(const Scores& s) {
  std::ostringstream os;
  os << "oa = " << s.oa << "\nmacc = " << s.macc << "\nmiou = " << s.miou << "\n";
  for (std::size_t c = 0; c < s.iou.size(); ++c) {
    os << "iou.class" << c << " = ";
    if (s.iou[c] < 0.0)
      os << "absent";
    else
      os << s.iou[c];
    os << "\n";
  }
  return os.str();
}

int run_gen_synthetic(const std::string& out, std::uint64_t seed, int classes, std::int64_t points,
                      const std::string& format, const GenSpec& base) {
  GenSpec spec = base;
  spec.seed = seed;
  spec.num_classes = classes;
  spec.num_points = points;
  std::cout << "command = gen-synthetic\nout = " << out << "\nseed = " << seed << "\nclasses = " << classes
            << "\npoints = " << points << "\nformat = " << format << "\nroom = " << spec.room_w << "x"
            << spec.room_d << "x" << spec.room_h << "\nboxes = " << spec.num_boxes
            << "\npillars = " << spec.num_pillars << "\n";
  save_cloud(out, gen_synthetic(spec), parse_format(format));
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_path, const std::string& ckpt_path,
              const std::string& log_path, int epochs_override, std::int64_t seed_override) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  if (epochs_override > 0) cfg.train.epochs = epochs_override;
  if (seed_override >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
  cfg.model.validate();
  cfg.train.validate();

  const PointCloud scene = load_cloud_auto(data_path);
  check_labels_fit(scene, cfg.model.num_classes);
  if (cfg.model.input_dim == 6 && !scene.has_colors())
    throw ConfigError("scene has no colors; set model.input_dim = 3");

  std::cout << "command = train\ndata = " << data_path << "\nout_checkpoint = " << ckpt_path << "\n"
            << format_config(cfg);

  Network net(cfg.model, cfg.train.seed);
  std::cout << "parameters = " << net.param_count() << "\n";

  std::ofstream log_file;
  std::ostream* log_stream = nullptr;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw IoError("train: cannot write log '" + log_path + "'");
    log_stream = &log_file;
  }
  const TrainLog log = train_loop(net, scene, cfg.train, log_stream);
  save_checkpoint(ckpt_path, net);
  const EpochStat& last = log.epochs.back();
  std::cout << "final.loss = " << last.loss << "\nfinal.oa = " << last.oa << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& report_path) {
  Network net = load_checkpoint(ckpt_path);
  const PointCloud cloud = load_cloud_auto(data_path);
  check_labels_fit(cloud, net.config().num_classes);
  std::cout << "command = eval\ncheckpoint = " << ckpt_path << "\ndata = " << data_path << "\n";
  emit_report(scores_text(evaluate(net, cloud)), report_path);
  return 0;
}

int run_infer(const std::string& ckpt_path, const std::string& in_path, const std::string& out_path) {
  Network net = load_checkpoint(ckpt_path);
  const PointCloud cloud = load_cloud_auto(in_path);
  std::cout << "command = infer\ncheckpoint = " << ckpt_path << "\nin = " << in_path
            << "\nout_labels = " << out_path << "\n";
  Rng rng(0);
  const ForwardResult res = net.forward(cloud, false, rng);
  const std::vector<std::int32_t> pred = argmax_rows(res.logits);
  std::ofstream os(out_path);
  if (!os) throw IoError("infer: cannot write '" + out_path + "'");
  for (std::int32_t p : pred) os << p << '\n';
  return 0;
}

int run_ablate(const std::string& grid, const std::string& data_path, int epochs,
               const std::string& report_path, std::uint64_t seed, std::int64_t crop_size,
               int crops_per_epoch) {
  const PointCloud scene = load_cloud_auto(data_path);
  if (!scene.has_labels()) throw ValueError("ablate: scene has no labels");

  ModelConfig base;
  base.num_classes = std::max(2, scene.num_classes);
  base.input_dim = scene.has_colors() ? 6 : 3;

  TrainConfig tc;
  tc.epochs = epochs;
  tc.seed = seed;
  tc.crop_size = crop_size;
  tc.crops_per_epoch = crops_per_epoch;
  tc.validate();

  std::cout << "command = ablate\ngrid = " << grid << "\ndata = " << data_path << "\nepochs = " << epochs
            << "\nseed = " << seed << "\ncrop_size = " << crop_size
            << "\ncrops_per_epoch = " << crops_per_epoch << "\n";

  std::ostringstream report;
  for (const GridRow& row : ablation_grid(grid, base)) {
    Network net(row.config, seed);
    train_loop(net, scene, tc, nullptr);
    const Scores s = evaluate(net, scene);
    report << "variant=" << row.name << " miou=" << s.miou << " oa=" << s.oa << "\n";
  }
  emit_report(report.str(), report_path);
  return 0;
}

int run_diagnose(const std::string& ckpt_path, const std::string& data_path, const std::string& report_path) {
  Network net = load_checkpoint(ckpt_path);
  const PointCloud cloud = load_cloud_auto(data_path);
  std::cout << "command = diagnose\ncheckpoint = " << ckpt_path << "\ndata = " << data_path << "\n";

  Rng rng(0);
  const ForwardResult res = net.forward(cloud, false, rng);
  std::ostringstream report;
  std::vector<float> positions = cloud.positions;
  for (std::size_t m = 0; m < res.pyramid.size(); ++m) {
    const PyramidLevel& lv = res.pyramid[m];
    const Tensor& feats = lv.input_features;
    const NeighborhoodStats p_raw = neighborhood_stats(positions, 3, lv.nbr);
    const NeighborhoodStats p_shift = neighborhood_stats(positions, 3, lv.nbr, lv.shifted_p.values());
    const NeighborhoodStats f_raw = neighborhood_stats(feats.values(), feats.dim(1), lv.nbr);
    const NeighborhoodStats f_shift =
        neighborhood_stats(feats.values(), feats.dim(1), lv.nbr, lv.shifted_f.values());
    report << "level=" << m + 1 << " points=" << lv.nbr.n
           << " p_mean_raw=" << p_raw.mean_dist << " p_mean_shifted=" << p_shift.mean_dist
           << " p_mean_change=" << p_shift.mean_dist - p_raw.mean_dist
           << " p_var_raw=" << p_raw.mean_variance << " p_var_shifted=" << p_shift.mean_variance
           << " p_var_change=" << p_shift.mean_variance - p_raw.mean_variance
           << " f_mean_raw=" << f_raw.mean_dist << " f_mean_shifted=" << f_shift.mean_dist
           << " f_mean_change=" << f_shift.mean_dist - f_raw.mean_dist
           << " f_var_raw=" << f_raw.mean_variance << " f_var_shifted=" << f_shift.mean_variance
           << " f_var_change=" << f_shift.mean_variance - f_raw.mean_variance << "\n";
    positions = lv.positions;
  }
  emit_report(report.str(), report_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud semantic segmentation with bilateral augmentation and adaptive fusion"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Generate a labeled synthetic scene");
  std::string gen_out, gen_format = "text";
  std::uint64_t gen_seed = 1;
  int gen_classes = 6;
  std::int64_t gen_points = 4096;
  GenSpec gen_base;
  gen->add_option("--out", gen_out, "Output cloud file")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--classes", gen_classes, "Number of semantic classes");
  gen->add_option("--points", gen_points, "Number of points");
  gen->add_option("--format", gen_format, "Output format: text or binary");
  gen->add_option("--room-w", gen_base.room_w, "Room width (m)");
  gen->add_option("--room-d", gen_base.room_d, "Room depth (m)");
  gen->add_option("--room-h", gen_base.room_h, "Room height (m)");
  gen->add_option("--boxes", gen_base.num_boxes, "Number of box objects");
  gen->add_option("--pillars", gen_base.num_pillars, "Number of pillars");

  // train
  auto* train = app.add_subcommand("train", "Train a model on a labeled scene");
  std::string train_config, train_data, train_ckpt, train_log;
  int train_epochs = 0;
  std::int64_t train_seed = -1;
  train->add_option("--config", train_config, "Config file (key = value)");
  train->add_option("--data", train_data, "Training scene")->required();
  train->add_option("--out-checkpoint", train_ckpt, "Checkpoint to write")->required();
  train->add_option("--log", train_log, "Per-epoch log file");
  train->add_option("--epochs", train_epochs, "Override train.epochs");
  train->add_option("--seed", train_seed, "Override train.seed");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled scene");
  std::string eval_ckpt, eval_data, eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Labeled scene")->required();
  eval->add_option("--report", eval_report, "Report file");

  // infer
  auto* infer = app.add_subcommand("infer", "Predict per-point labels");
  std::string infer_ckpt, infer_in, infer_out;
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--in", infer_in, "Input cloud")->required();
  infer->add_option("--out-labels", infer_out, "Output label file (one per line)")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  std::string ablate_grid, ablate_data, ablate_report;
  int ablate_epochs = 3, ablate_crops = 4;
  std::uint64_t ablate_seed = 1;
  std::int64_t ablate_crop_size = 256;
  ablate->add_option("--grid", ablate_grid, "Grid: block, fusion, or network")->required();
  ablate->add_option("--data", ablate_data, "Labeled scene")->required();
  ablate->add_option("--epochs", ablate_epochs, "Budget per variant");
  ablate->add_option("--report", ablate_report, "Report file");
  ablate->add_option("--seed", ablate_seed, "Shared seed across variants");
  ablate->add_option("--crop-size", ablate_crop_size, "Crop size per step");
  ablate->add_option("--crops-per-epoch", ablate_crops, "Crops per epoch");

  // diagnose
  auto* diagnose = app.add_subcommand("diagnose", "Neighborhood statistics, raw vs shifted");
  std::string diag_ckpt, diag_data, diag_report;
  diagnose->add_option("--checkpoint", diag_ckpt, "Checkpoint file")->required();
  diagnose->add_option("--data", diag_data, "Scene")->required();
  diagnose->add_option("--report", diag_report, "Report file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return run_gen_synthetic(gen_out, gen_seed, gen_classes, gen_points, gen_format, gen_base);
    if (train->parsed())
      return run_train(train_config, train_data, train_ckpt, train_log, train_epochs, train_seed);
    if (eval->parsed()) return run_eval(eval_ckpt, eval_data, eval_report);
    if (infer->parsed()) return run_infer(infer_ckpt, infer_in, infer_out);
    if (ablate->parsed())
      return run_ablate(ablate_grid, ablate_data, ablate_epochs, ablate_report, ablate_seed,
                        ablate_crop_size, ablate_crops);
    if (diagnose->parsed()) return run_diagnose(diag_ckpt, diag_data, diag_report);
  } catch (const baaf::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
