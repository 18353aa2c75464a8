#include <fstream>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "td3d/checkpoint.hpp"
#include "td3d/dataset.hpp"
#include "td3d/errors.hpp"
#include "td3d/trainer.hpp"

using namespace td3d;

namespace {

constexpr double kCompositeStep = 1e-8;

struct TinySetup {
  RunConfig cfg = fixture::tiny_config();
  Dataset data = generate_dataset(cfg);
};

const TinySetup& tiny() {
  static const TinySetup s;
  return s;
}

bool same_parameters(const nn::ParameterSet& a, const nn::ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value != b[i].value) return false;
  }
  return true;
}

std::string without_wall_seconds(const std::string& json_line) {
  return json_line.substr(0, json_line.find(",\"wall_seconds\""));
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(c.resolved_drop_epochs() == std::pair{28, 32});
  for (int e = 1; e <= 28; ++e) CHECK(learning_rate(c, e) == doctest::Approx(1e-3));
  for (int e = 29; e <= 32; ++e) CHECK(learning_rate(c, e) == doctest::Approx(1e-4));
  CHECK(learning_rate(c, 33) == doctest::Approx(1e-5));
  CHECK(c.warmup_epochs() == 3);
  c.epochs = 2;
  const auto [d1, d2] = c.resolved_drop_epochs();
  CHECK(d2 > d1);
  c.lr_drop_epochs = {5, 4};
  c.epochs = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("augmentation keeps boxes tight and labels intact") {
  std::mt19937_64 rng(5);
  for (const auto& scene : tiny().data.train) {
    for (int k = 0; k < 4; ++k) {
      const LabeledScene a = augment_scene(scene, rng);
      REQUIRE(a.cloud.points.size() == scene.cloud.points.size());
      CHECK(a.cloud.instance_ids == scene.cloud.instance_ids);
      const auto tight = boxes_from_labels(a.cloud);
      REQUIRE(tight.size() == a.boxes.size());
      for (std::size_t i = 0; i < tight.size(); ++i) {
        CHECK((tight[i].box.center - a.boxes[i].box.center).norm() < 1e-9);
        CHECK((tight[i].box.size - a.boxes[i].box.size).norm() < 1e-9);
        CHECK(tight[i].class_id == a.boxes[i].class_id);
      }
    }
  }
}

TEST_CASE("the total loss is exactly the sum of its terms") {
  Model model(tiny().cfg.model, 1);
  for (const auto& scene : tiny().data.train) {
    for (bool inject : {false, true}) {
      nn::Graph g(false);
      const SceneLoss l = scene_loss(g, model, scene, inject);
      const double cls = g.value(l.cls)(0, 0), reg = g.value(l.reg)(0, 0), seg = g.value(l.seg)(0, 0);
      CHECK(g.value(l.total)(0, 0) == (cls + reg) + seg);
      if (inject) CHECK(seg > 0.0);
    }
  }
  Trainer trainer(model, tiny().cfg.train_config());
  const auto& train = tiny().data.train;
  const LossBreakdown b = trainer.train_step(std::span(train.data(), 2), 1e-3, true);
  CHECK(b.total == (b.l_cls + b.l_reg) + b.l_seg);
  CHECK(b.decomposition_residual == 0.0);
}

TEST_CASE("gradients reach the backbone, the heads and the U-Net") {
  Model model(tiny().cfg.model, 2);
  model.detector_params().zero_grad();
  model.refiner_params().zero_grad();
  nn::Graph g(true);
  const SceneLoss l = scene_loss(g, model, tiny().data.train[0], true);
  g.backward(l.total);
  for (const std::string name : {"backbone.enc0.w", "backbone.enc3.w", "backbone.dec0.w", "head1.cls.w", "head1.reg.w", "head3.cls.w"}) {
    INFO(name);
    REQUIRE(model.detector_params().contains(name));
    CHECK(model.detector_params().get(name).grad.norm() > 0.0);
  }
  double backbone = 0, head = 0;
  for (std::size_t i = 0; i < model.detector_params().size(); ++i) {
    const auto& p = model.detector_params()[i];
    (p.name.rfind("head", 0) == 0 ? head : backbone) += p.grad.squaredNorm();
  }
  CHECK(backbone > 0.0);
  CHECK(head > 0.0);
  for (std::size_t i = 0; i < model.refiner_params().size(); ++i) {
    INFO(model.refiner_params()[i].name);
    CHECK(model.refiner_params()[i].grad.norm() > 0.0);
  }
}

TEST_CASE("composite loss gradient matches finite differences with fixed proposals") {
  RunConfig cfg = tiny().cfg;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (std::size_t s = 0; s < 3; ++s) {
    Model model(cfg.model, 3 + s);
    // Zero-initialized biases put ReLUs of empty neighbourhoods exactly on
    // their kink, where finite differences are meaningless.
    for (nn::ParameterSet* set : {&model.detector_params(), &model.refiner_params()}) {
      for (std::size_t p = 0; p < set->size(); ++p) {
        if (!(*set)[p].name.ends_with(".b")) continue;
        for (Eigen::Index i = 0; i < (*set)[p].value.size(); ++i) (*set)[p].value.data()[i] += jitter(rng);
      }
    }
    const LabeledScene& scene = tiny().data.train[s];
    std::vector<Proposal> fixed = proposals_from_gt(scene.boxes);
    {
      nn::Graph g(false);
      for (const Proposal& p : scene_loss(g, model, scene, false).proposals) fixed.push_back(p);
    }
    model.detector_params().zero_grad();
    model.refiner_params().zero_grad();
    {
      nn::Graph g(true);
      g.backward(scene_loss(g, model, scene, false, &fixed).total);
    }
    auto loss = [&] {
      nn::Graph g(false);
      return g.value(scene_loss(g, model, scene, false, &fixed).total)(0, 0);
    };
    // A handful of entries per tensor, compared as one gradient array.
    // Thousands of ReLUs feed the loss, so a 1e-6 step regularly straddles a
    // kink; a smaller step keeps the comparison on the differentiable piece.
    std::vector<double> analytic, numeric;
    for (nn::ParameterSet* set : {&model.detector_params(), &model.refiner_params()}) {
      for (std::size_t p = 0; p < set->size(); ++p) {
        nn::Parameter& param = (*set)[p];
        for (int k = 0; k < 4; ++k) {
          const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(param.value.size()));
          analytic.push_back(param.grad.data()[idx]);
          nn::Matrix one(1, 1);
          one(0, 0) = param.value.data()[idx];
          numeric.push_back(oracle::numeric_gradient(one, [&] {
            const double old = param.value.data()[idx];
            param.value.data()[idx] = one(0, 0);
            const double v = loss();
            param.value.data()[idx] = old;
            return v;
          }, kCompositeStep)(0, 0));
        }
      }
    }
    const auto as_matrix = [](const std::vector<double>& v) {
      return nn::Matrix(Eigen::Map<const nn::Matrix>(v.data(), static_cast<Eigen::Index>(v.size()), 1));
    };
    CHECK(oracle::rel_error(as_matrix(analytic), as_matrix(numeric)) < 1e-4);
  }
}

TEST_CASE("a tiny scene can be overfit") {
  RunConfig cfg = tiny().cfg;
  Model model(cfg.model, 4);
  TrainConfig tc = cfg.train_config();
  Trainer trainer(model, tc);
  const auto& train = tiny().data.train;
  const std::span<const LabeledScene> one(train.data(), 1);
  const double first = trainer.train_step(one, 3e-3, true).total;
  double last = first;
  for (int step = 0; step < 200; ++step) last = trainer.train_step(one, 3e-3, true).total;
  INFO(first, " -> ", last);
  CHECK(last < 0.25 * first);
  CHECK(trainer.optimizer_steps() == 201);
}

TEST_CASE("non-finite losses name the scene") {
  Model model(tiny().cfg.model, 5);
  LabeledScene bad = tiny().data.train[0];
  bad.id = "broken_scene";
  for (std::size_t i = 0; i < model.detector_params().size(); ++i) {
    if (model.detector_params()[i].name.find(".cls.b") != std::string::npos)
      model.detector_params()[i].value.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  Trainer trainer(model, tiny().cfg.train_config());
  try {
    trainer.train_step(std::span(&bad, 1), 1e-3, false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("broken_scene") != std::string::npos);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const RunConfig cfg = tiny().cfg;
  Model a(cfg.model, cfg.seed), b(cfg.model, cfg.seed);
  Trainer ta(a, cfg.train_config()), tb(b, cfg.train_config());
  const auto ra = ta.fit(tiny().data.train, tiny().data.val);
  const auto rb = tb.fit(tiny().data.train, tiny().data.val);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(without_wall_seconds(ra[i].to_json()) == without_wall_seconds(rb[i].to_json()));
  }
  CHECK(same_parameters(a.detector_params(), b.detector_params()));
  CHECK(same_parameters(a.refiner_params(), b.refiner_params()));
}

TEST_CASE("checkpoint round trip and validation") {
  const RunConfig cfg = tiny().cfg;
  const auto dir = fixture::temp_dir("ckpt");
  Model model(cfg.model, 6);
  Trainer trainer(model, cfg.train_config());
  trainer.train_step(std::span(tiny().data.train.data(), 2), 1e-3, true);
  const Checkpoint ck = trainer.snapshot(cfg.canonical_text());
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.config_hash() == cfg.hash());
  CHECK(back.meta == ck.meta);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == ck.tensors[i].first);
    CHECK(back.tensors[i].second == ck.tensors[i].second);
  }

  Model other(cfg.model, 99);
  Trainer restored(other, cfg.train_config());
  restored.restore(back);
  CHECK(same_parameters(model.detector_params(), other.detector_params()));
  CHECK(same_parameters(model.refiner_params(), other.refiner_params()));
  CHECK(restored.optimizer_steps() == 1);
  // Continuing from the restored state matches continuing the original.
  const auto batch = std::span(tiny().data.train.data() + 2, 2);
  const LossBreakdown l1 = trainer.train_step(batch, 1e-3, false);
  const LossBreakdown l2 = restored.train_step(batch, 1e-3, false);
  CHECK(l1.total == l2.total);
  CHECK(same_parameters(model.detector_params(), other.detector_params()));

  SUBCASE("architecture mismatch leaves the model untouched") {
    RunConfig wide = cfg;
    wide.set("detector.widths", "4,8,8,16");
    Model m(wide.model, 7);
    const nn::ParameterSet before = m.detector_params();
    Trainer t(m, wide.train_config());
    CHECK_THROWS_AS(t.restore(back), DataError);
    CHECK(same_parameters(before, m.detector_params()));
  }
  SUBCASE("corrupted blob") {
    {
      std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(40);
      f.put('\x7f');
    }
    try {
      load_checkpoint(dir / "a.ckpt");
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("corrupted") != std::string::npos);
    }
  }
  SUBCASE("edited embedded config") {
    auto lines = read_lines(manifest_path_for(dir / "a.ckpt"));
    for (auto& line : lines) {
      if (line.rfind("train.lr = ", 0) == 0) line = "train.lr = 0.5";
    }
    std::ofstream out(manifest_path_for(dir / "a.ckpt"), std::ios::trunc);
    for (const auto& line : lines) out << line << '\n';
    out.close();
    try {
      load_checkpoint(dir / "a.ckpt");
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("config") != std::string::npos);
    }
  }
  SUBCASE("missing manifest") {
    std::filesystem::remove(manifest_path_for(dir / "a.ckpt"));
    CHECK_THROWS(load_checkpoint(dir / "a.ckpt"));
  }
}

TEST_CASE("an interrupted run resumes to the same log and weights") {
  const RunConfig cfg = tiny().cfg;
  const auto full_dir = fixture::temp_dir("full");
  const auto part_dir = fixture::temp_dir("part");
  Model full(cfg.model, cfg.seed);
  Trainer(full, cfg.train_config()).fit(tiny().data.train, tiny().data.val, {full_dir, cfg.canonical_text(), {}, {}});

  struct Interrupt {};
  Model part(cfg.model, cfg.seed);
  FitOptions opts{part_dir, cfg.canonical_text(), [](const EpochRecord& r) {
                    if (r.epoch == 2) throw Interrupt{};
                  },
                  {}};
  CHECK_THROWS_AS(Trainer(part, cfg.train_config()).fit(tiny().data.train, tiny().data.val, opts), Interrupt);

  Model resumed(cfg.model, 12345);
  Trainer t(resumed, cfg.train_config());
  t.restore(load_checkpoint(part_dir / "last.ckpt"));
  CHECK(t.completed_epochs() == 2);
  t.fit(tiny().data.train, tiny().data.val, {part_dir, cfg.canonical_text(), {}, {}});
  CHECK(same_parameters(full.detector_params(), resumed.detector_params()));
  CHECK(same_parameters(full.refiner_params(), resumed.refiner_params()));
  const auto a = read_lines(full_dir / "log.jsonl");
  const auto b = read_lines(part_dir / "log.jsonl");
  REQUIRE(a.size() == 3);
  REQUIRE(b.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(without_wall_seconds(a[i]) == without_wall_seconds(b[i]));
}
