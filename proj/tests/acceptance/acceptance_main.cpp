// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Later criteria reuse the models trained by earlier ones,
// so the suite runs in order.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "baaf/checkpoint.hpp"
#include "baaf/cloud.hpp"
#include "baaf/config.hpp"
#include "baaf/metrics.hpp"
#include "baaf/model.hpp"
#include "baaf/spatial.hpp"
#include "baaf/tensor.hpp"
#include "baaf/train.hpp"
#include "testing/oracles.hpp"

using namespace baaf;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

ModelConfig tiny_composite_config() {
  ModelConfig cfg;
  cfg.levels = {{2, 8}, {4, 16}};
  cfg.k = 4;
  cfg.input_dim = 6;
  cfg.extractor_dim = 4;
  cfg.decode_dim = 8;
  cfg.head_dims = {8};
  cfg.num_classes = 3;
  cfg.dropout = 0.0f;
  cfg.aug_loss_weights = {0.1f, 0.5f};
  return cfg;
}

// The fixed overfit protocol shared by criteria 5-8.
struct OverfitProtocol {
  GenSpec scene;
  TrainConfig train;

  OverfitProtocol() {
    scene.num_points = 4096;
    scene.num_classes = 6;
    scene.seed = 7;
    train.epochs = 60;
    train.lr0 = 0.01f;
    train.decay = 0.5f;
    train.decay_every = 10;
    train.batch_size = 1;
    train.seed = 1;
    train.crop_size = 4096;
    train.crops_per_epoch = 4;
  }
};

struct SharedState {
  PointCloud scene;
  std::unique_ptr<Network> trained;  // full default model after criterion 5
  Scores trained_scores;
};

// --------------------------------------------------------------------------
// 1. Gradient correctness

bool criterion_gradients(std::string& detail) {
  const auto start = Clock::now();
  Rng rng(101);
  std::int64_t total = 0, failed = 0;
  auto tally = [&](const testing_oracles::GradCheck& r) {
    total += r.total;
    failed += r.failed;
  };
  auto rnd = [&rng](Shape s, bool grad) { return testing_oracles::random_tensor(std::move(s), rng, grad); };

  {  // linear
    Tensor x = rnd({5, 4}, true), w = rnd({4, 3}, true), b = rnd({3}, true);
    auto loss = [&] { return sum(relu(linear(x, w, b))); };
    tally(testing_oracles::check_gradient(x, loss));
    tally(testing_oracles::check_gradient(w, loss));
    tally(testing_oracles::check_gradient(b, loss));
  }
  {  // batch_norm, training and eval modes
    Tensor x = rnd({8, 3}, true);
    BatchNorm bn = BatchNorm::make(3);
    Tensor weight = rnd({8, 3}, false);
    auto train_loss = [&] { return sum(mul(batch_norm(x, bn, true), weight)); };
    tally(testing_oracles::check_gradient(x, train_loss));
    tally(testing_oracles::check_gradient(bn.scale, train_loss));
    tally(testing_oracles::check_gradient(bn.shift, train_loss));
    auto eval_loss = [&] { return sum(mul(batch_norm(x, bn, false), weight)); };
    tally(testing_oracles::check_gradient(x, eval_loss));
  }
  {  // softmax + concat + column + scale_rows
    Tensor a = rnd({6, 2}, true), b = rnd({6, 3}, true);
    Tensor maps = rnd({6, 5}, false);
    auto loss = [&] { return sum(mul(softmax(concat({a, b}, 1), 1), maps)); };
    tally(testing_oracles::check_gradient(a, loss));
    tally(testing_oracles::check_gradient(b, loss));
    Tensor x = rnd({6, 4}, true), w = rnd({6, 1}, true);
    auto loss2 = [&] { return sum(scale_rows(x, column(concat({w, w}, 1), 1))); };
    tally(testing_oracles::check_gradient(x, loss2));
    tally(testing_oracles::check_gradient(w, loss2));
  }
  {  // dropout with a frozen mask
    Tensor x = rnd({5, 5}, true);
    auto loss = [&] {
      Rng mask(7);
      return sum(dropout(x, 0.3f, true, mask));
    };
    tally(testing_oracles::check_gradient(x, loss));
  }
  {  // neighbor_gather / neighbor_max / neighbor_weighted_mean
    Tensor x = rnd({6, 3}, true);
    NeighborIndex nbr;
    nbr.n = 6;
    nbr.k = 3;
    for (int i = 0; i < 18; ++i) nbr.indices.push_back(static_cast<std::int32_t>(rng.uniform_int(6)));
    Tensor weight = rnd({6, 3, 3}, false);
    auto loss = [&] { return sum(mul(neighbor_gather(x, nbr), weight)); };
    tally(testing_oracles::check_gradient(x, loss));

    Tensor y = rnd({4, 5, 2}, true);
    tally(testing_oracles::check_gradient(y, [&] { return sum(neighbor_max(y)); }));
    Tensor scores = rnd({4, 5, 2}, true);
    auto wm_loss = [&] { return sum(neighbor_weighted_mean(y, scores)); };
    tally(testing_oracles::check_gradient(y, wm_loss));
    tally(testing_oracles::check_gradient(scores, wm_loss));
  }
  {  // cross_entropy and mean_shift_loss
    Tensor logits = rnd({6, 4}, true);
    std::vector<std::int32_t> labels{0, 1, 2, 3, 0, 2};
    tally(testing_oracles::check_gradient(logits, [&] { return cross_entropy(logits, labels); }));
    Tensor shifted = rnd({5, 3, 3}, true);
    Tensor centers = rnd({5, 3}, true);
    auto msl = [&] { return mean_shift_loss(shifted, centers); };
    tally(testing_oracles::check_gradient(shifted, msl));
    tally(testing_oracles::check_gradient(centers, msl));
  }

  // Full block/fusion/head composite on a 32-point instance: every
  // trainable parameter of a small but complete network.
  {
    GenSpec spec;
    spec.num_points = 32;
    spec.num_classes = 3;
    spec.seed = 3;
    const PointCloud cloud = gen_synthetic(spec);
    Network net(tiny_composite_config(), 5);
    const std::vector<float> weights = net.config().effective_loss_weights();
    auto loss = [&] {
      Rng fwd(0);
      const ForwardResult res = net.forward(cloud, true, fwd);
      return total_loss(cross_entropy(res.logits, cloud.labels), res.aug_losses, weights);
    };
    for (const auto& e : net.params().entries())
      if (e.trainable) tally(testing_oracles::check_gradient(e.tensor, loss));
  }

  const double elapsed = seconds_since(start);
  const double fail_rate = static_cast<double>(failed) / static_cast<double>(total);
  std::ostringstream os;
  os << total << " params checked, " << failed << " outside max(1e-3 abs, 1e-2 rel), "
     << std::fixed << elapsed << "s";
  detail = os.str();
  return fail_rate <= 0.01 && elapsed < 60.0;
}

// --------------------------------------------------------------------------
// 2. Spatial oracles

bool criterion_spatial(std::string& detail) {
  const auto start = Clock::now();
  Rng rng(202);
  int knn_clouds = 0, fps_clouds = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t nr = 1 + rng.uniform_int(512);
    const std::int64_t nq = 1 + rng.uniform_int(128);
    std::vector<float> reference(static_cast<std::size_t>(nr) * 3), query(static_cast<std::size_t>(nq) * 3);
    const bool snap = trial % 3 == 0;  // grid-snapped coordinates force distance ties
    for (float& v : reference) v = snap ? std::round(8.0f * rng.uniform_f()) / 4.0f : 2.0f * rng.uniform_f();
    for (float& v : query) v = snap ? std::round(8.0f * rng.uniform_f()) / 4.0f : 2.0f * rng.uniform_f();
    const int k = 1 + static_cast<int>(rng.uniform_int(16));
    if (knn(query, reference, k).indices != testing_oracles::brute_knn(query, reference, k).indices) {
      detail = "knn mismatch on trial " + std::to_string(trial);
      return false;
    }
    const int d = 2 + static_cast<int>(rng.uniform_int(2));
    const NeighborIndex dil = dilated_knn(query, reference, k, d);
    const NeighborIndex wide = testing_oracles::brute_knn(query, reference, k * d);
    for (std::int64_t i = 0; i < nq; ++i)
      for (int j = 0; j < k; ++j)
        if (dil.at(i, j) != wide.at(i, static_cast<std::int64_t>(j) * d)) {
          detail = "dilated knn mismatch on trial " + std::to_string(trial);
          return false;
        }
    ++knn_clouds;
  }
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 1 + rng.uniform_int(256);
    std::vector<float> pos(static_cast<std::size_t>(n) * 3);
    for (float& v : pos) v = 2.0f * rng.uniform_f();
    const std::int64_t m = 1 + rng.uniform_int(std::min<std::int64_t>(n, 96));
    const std::int64_t startv = rng.uniform_int(n);
    if (fps(pos, m, startv).indices != testing_oracles::greedy_fps(pos, m, startv)) {
      detail = "fps mismatch on trial " + std::to_string(trial);
      return false;
    }
    ++fps_clouds;
  }
  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << knn_clouds << " knn/dilated clouds + " << fps_clouds << " fps clouds exhaustively matched, "
     << std::fixed << elapsed << "s";
  detail = os.str();
  return elapsed < 60.0;
}

// --------------------------------------------------------------------------
// 3. Fusion invariants

bool criterion_fusion(std::string& detail) {
  Rng rng(303);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + rng.uniform_int(40);
    const Index c = 1 + rng.uniform_int(12);
    const int m_count = 2 + static_cast<int>(rng.uniform_int(5));
    std::vector<Tensor> maps, phis;
    for (int m = 0; m < m_count; ++m) {
      maps.push_back(testing_oracles::random_tensor({n, c}, rng, false, 4.0f));
      phis.push_back(testing_oracles::random_tensor({n, 1}, rng, false, 6.0f));
    }
    const Tensor weights = softmax(concat(phis, 1), 1);
    for (Index i = 0; i < n; ++i) {
      double total = 0.0;
      for (int m = 0; m < m_count; ++m) total += weights.data()[i * m_count + m];
      if (std::abs(total - 1.0) > 1e-5) {
        detail = "weight row sums to " + std::to_string(total);
        return false;
      }
    }
    const Tensor out = fused_output(FusionMode::pointwise_adaptive, maps, phis);
    for (Index i = 0; i < n; ++i)
      for (Index ch = 0; ch < c; ++ch) {
        float lo = 1e30f, hi = -1e30f;
        for (const Tensor& map : maps) {
          lo = std::min(lo, map.data()[i * c + ch]);
          hi = std::max(hi, map.data()[i * c + ch]);
        }
        const float v = out.data()[i * c + ch];
        if (v < lo - 1e-4f || v > hi + 1e-4f) {
          detail = "fused value escapes the per-point envelope";
          return false;
        }
      }
  }
  detail = "100 random instances: weight rows sum to 1 +/- 1e-5, outputs stay in the map envelope";
  return true;
}

// --------------------------------------------------------------------------
// 4. Loss invariants

bool criterion_losses(std::string& detail) {
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor shifted = testing_oracles::random_tensor({3, 4, 3}, rng);
    Tensor centers = testing_oracles::random_tensor({3, 3}, rng);
    if (mean_shift_loss(shifted, centers).item() < 0.0f) {
      detail = "augmentation loss went negative";
      return false;
    }
  }
  // Exactly zero iff every shifted mean hits its centroid; dyadic values
  // keep the float arithmetic exact.
  Tensor centers = Tensor::from_data({2, 3}, {1.5f, -0.5f, 2.0f, 0.25f, 8.0f, -4.0f});
  std::vector<float> sym;
  for (int i = 0; i < 2; ++i)
    for (int s = 0; s < 2; ++s)
      for (int d = 0; d < 3; ++d)
        sym.push_back(centers.data()[i * 3 + d] + (s == 0 ? 0.25f : -0.25f));
  const float centered = mean_shift_loss(Tensor::from_data({2, 2, 3}, sym), centers).item();
  if (centered != 0.0f) {
    detail = "centered neighborhoods gave " + std::to_string(centered) + " instead of exactly 0";
    return false;
  }
  sym[0] += 0.5f;  // knock one neighborhood off center
  if (mean_shift_loss(Tensor::from_data({2, 2, 3}, sym), centers).item() <= 0.0f) {
    detail = "off-center neighborhoods must give a positive loss";
    return false;
  }

  // Hand-computed overall losses under the default weights.
  const std::vector<float> w{0.1f, 0.1f, 0.3f, 0.5f, 0.5f};
  auto scalars = [](std::initializer_list<float> vs) {
    std::vector<Tensor> out;
    for (float v : vs) out.push_back(Tensor::scalar(v));
    return out;
  };
  const float case1 = total_loss(Tensor::scalar(1.0f), scalars({1, 1, 1, 1, 1}), w).item();
  const float case2 = total_loss(Tensor::scalar(0.25f), scalars({2, 0, 1, 4, 2}), w).item();
  if (std::abs(case1 - 2.5f) > 1e-6f || std::abs(case2 - 3.75f) > 1e-6f) {
    detail = "total loss hand cases: got " + std::to_string(case1) + ", " + std::to_string(case2);
    return false;
  }
  detail = "1000 random losses nonnegative; centered case exactly 0; hand-computed totals within 1e-6";
  return true;
}

// --------------------------------------------------------------------------
// 5. Overfit convergence

bool criterion_overfit(std::string& detail, SharedState& state) {
  const auto start = Clock::now();
  const OverfitProtocol protocol;
  state.scene = gen_synthetic(protocol.scene);

  ModelConfig model_cfg;  // paper-default architecture
  auto run_once = [&]() {
    auto net = std::make_unique<Network>(model_cfg, protocol.train.seed);
    train_loop(*net, state.scene, protocol.train);
    return net;
  };

  auto first = run_once();
  const Scores s1 = evaluate(*first, state.scene);
  auto second = run_once();
  const Scores s2 = evaluate(*second, state.scene);

  const bool reproduced = std::abs(s1.oa - s2.oa) <= 1e-6 && std::abs(s1.miou - s2.miou) <= 1e-6;
  state.trained = std::move(first);
  state.trained_scores = s1;

  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << "oa=" << s1.oa << " miou=" << s1.miou << " (repeat oa=" << s2.oa << " miou=" << s2.miou << "), "
     << std::fixed << elapsed << "s for two runs";
  detail = os.str();
  return s1.oa >= 0.95 && s1.miou >= 0.80 && reproduced;
}

// --------------------------------------------------------------------------
// 6. Ablation ordering sanity

bool criterion_ablation_order(std::string& detail, SharedState& state) {
  const OverfitProtocol protocol;
  ModelConfig baseline;  // B0 block + A0 fusion
  baseline.variant.offset_order = OffsetOrder::none;
  baseline.variant.geometric_aug_loss = false;
  baseline.variant.semantic_aug_loss = false;
  baseline.variant.aggregation = Aggregation::max;
  baseline.variant.fusion = FusionMode::last_only;

  Network base_net(baseline, protocol.train.seed);
  train_loop(base_net, state.scene, protocol.train);
  const Scores base = evaluate(base_net, state.scene);

  std::ostringstream os;
  os << "full B6/A5 miou=" << state.trained_scores.miou << " vs baseline B0/A0 miou=" << base.miou;
  detail = os.str();
  return state.trained_scores.miou >= base.miou;
}

// --------------------------------------------------------------------------
// 7. Compactness trend

bool criterion_compactness(std::string& detail, SharedState& state) {
  Rng rng(0);
  const ForwardResult res = state.trained->forward(state.scene, false, rng);
  std::ostringstream os;
  bool ok = true;
  std::vector<float> positions = state.scene.positions;
  for (std::size_t m = 0; m < res.pyramid.size(); ++m) {
    const PyramidLevel& lv = res.pyramid[m];
    const NeighborhoodStats raw = neighborhood_stats(positions, 3, lv.nbr);
    const NeighborhoodStats shifted = neighborhood_stats(positions, 3, lv.nbr, lv.shifted_p.values());
    const double change = shifted.mean_dist - raw.mean_dist;
    os << (m ? " " : "") << "L" << m + 1 << ":" << change;
    if (change > 0.0) ok = false;
    positions = lv.positions;
  }
  detail = "mean neighbor-to-centroid 3d distance change per level: " + os.str();
  return ok;
}

// --------------------------------------------------------------------------
// 8. Serialization

bool criterion_serialization(std::string& detail, SharedState& state) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "baaf_acceptance";
  fs::create_directories(dir);

  // Checkpoint round-trip, bit for bit, and identical logits after reload.
  const std::string ckpt = (dir / "trained.baaf").string();
  save_checkpoint(ckpt, *state.trained);
  Network restored = load_checkpoint(ckpt);
  const auto& ea = state.trained->params().entries();
  const auto& eb = restored.params().entries();
  for (std::size_t i = 0; i < ea.size(); ++i) {
    const auto& ta = ea[i].tensor;
    const auto& tb = eb[i].tensor;
    if (ea[i].name != eb[i].name || ta.values() != tb.values()) {
      detail = "checkpoint round-trip changed '" + ea[i].name + "'";
      fs::remove_all(dir);
      return false;
    }
  }
  Rng r1(0), r2(0);
  const Tensor logits_a = state.trained->forward(state.scene, false, r1).logits;
  const Tensor logits_b = restored.forward(state.scene, false, r2).logits;
  if (logits_a.values() != logits_b.values()) {
    detail = "eval after reload changed the logits";
    fs::remove_all(dir);
    return false;
  }

  // Cloud formats round-trip bit-exactly in both encodings.
  for (CloudFormat format : {CloudFormat::text, CloudFormat::binary}) {
    const std::string file = (dir / (format == CloudFormat::text ? "scene.txt" : "scene.pcsb")).string();
    save_cloud(file, state.scene, format);
    const PointCloud back = load_cloud(file, format);
    if (back.positions != state.scene.positions || back.colors != state.scene.colors ||
        back.labels != state.scene.labels) {
      detail = std::string("cloud round-trip changed values in ") +
               (format == CloudFormat::text ? "text" : "binary") + " format";
      fs::remove_all(dir);
      return false;
    }
  }
  fs::remove_all(dir);
  detail = "checkpoint and both cloud formats round-trip bit-exactly; reloaded eval logits identical";
  return true;
}

}  // namespace

int main() {
  SharedState state;
  struct Criterion {
    int id;
    const char* title;
    std::function<bool(std::string&)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", [&](std::string& d) { return criterion_gradients(d); }},
      {2, "spatial oracles", [&](std::string& d) { return criterion_spatial(d); }},
      {3, "fusion invariants", [&](std::string& d) { return criterion_fusion(d); }},
      {4, "loss invariants", [&](std::string& d) { return criterion_losses(d); }},
      {5, "overfit convergence", [&](std::string& d) { return criterion_overfit(d, state); }},
      {6, "ablation ordering sanity", [&](std::string& d) { return criterion_ablation_order(d, state); }},
      {7, "compactness trend", [&](std::string& d) { return criterion_compactness(d, state); }},
      {8, "serialization", [&](std::string& d) { return criterion_serialization(d, state); }},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    if (!ok) ++failures;
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": " << c.title << " — " << detail
              << std::endl;
  }
  if (failures > 0) std::cout << failures << " criteria failed" << std::endl;
  return failures == 0 ? 0 : 1;
}
