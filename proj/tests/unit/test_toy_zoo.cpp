#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "../support/fixtures.hpp"
#include "hm3/error.hpp"
#include "hm3/rng.hpp"
#include "hm3/toy_zoo.hpp"

using namespace hm3;

namespace {

// The zoo a default run builds, once for the whole file.
const Zoo& default_zoo() {
  static const Zoo zoo = build_zoo(ZooConfig{}, derive_seed(0, "zoo"));
  return zoo;
}

MetricVector val_metrics(const Checkpoint& c) {
  return evaluate(network_from_checkpoint(c), default_zoo().tasks, Split::val, 0);
}

Dense constant_dense(int out, int in, float w, float b) {
  Dense d;
  d.out_dim = out;
  d.in_dim = in;
  d.weight_t.assign(static_cast<std::size_t>(out * in), w);
  d.bias.assign(static_cast<std::size_t>(out), b);
  return d;
}

}  // namespace

TEST_CASE("task generation is deterministic and validated") {
  const auto a = make_tasks(3, 42);
  const auto b = make_tasks(3, 42);
  CHECK(a == b);
  const TaskSuite sa(a), sb(b);
  for (int k = 0; k < 3; ++k) {
    CHECK(sa[k].train.inputs == sb[k].train.inputs);
    CHECK(sa[k].val.labels == sb[k].val.labels);
  }
  CHECK(make_tasks(3, 43) != a);
  for (const int bad : {1, 7}) {
    try {
      make_tasks(bad, 1);
      FAIL("expected a domain error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::domain);
    }
  }
}

TEST_CASE("tasks cycle linear, quadratic and parity families") {
  const auto specs = make_tasks(6, 9);
  const TaskFamily expect[] = {TaskFamily::linear, TaskFamily::quadratic, TaskFamily::parity};
  for (int k = 0; k < 6; ++k) {
    CHECK(TaskFunction(specs[static_cast<std::size_t>(k)]).family() == expect[k % 3]);
    CHECK(specs[static_cast<std::size_t>(k)].task_id == k + 1);
  }
  CHECK(specs[0].generator_seed != specs[3].generator_seed);
}

TEST_CASE("splits are balanced and labelled by the task rule") {
  const TaskSuite suite(make_tasks(3, 5));
  for (int k = 0; k < 3; ++k) {
    const TaskFunction f(suite[k].spec);
    for (const Split s : {Split::train, Split::val, Split::test}) {
      const Dataset& ds = suite[k].split(s);
      const auto pos = std::count(ds.labels.begin(), ds.labels.end(), std::int8_t{1});
      CHECK(pos == (ds.size() + 1) / 2);
      // A classifier that applies the rule itself scores 1.0.
      int agree = 0;
      for (int i = 0; i < ds.size(); ++i) agree += f.label(ds.input(i)) == ds.labels[static_cast<std::size_t>(i)];
      CHECK(static_cast<double>(agree) / ds.size() == 1.0);
    }
  }
  CHECK(generate_split(suite[0].spec, Split::val, 7).size() == 7);
}

TEST_CASE("a constant classifier scores one half on balanced splits") {
  const TaskSuite suite(make_tasks(3, 5));
  std::vector<Dense> heads;
  for (int k = 0; k < 3; ++k) heads.push_back(constant_dense(1, 16, 0.0f, 1.0f));
  const Network net(Activation::tanh, constant_dense(16, kToyInputDim, 0.0f, 0.0f), {}, std::move(heads));
  for (const double v : evaluate(net, suite, Split::val, 0).values) CHECK(std::abs(v - 0.5) <= 0.05);
}

TEST_CASE("random initializations sit at chance on average over 50 seeds") {
  const TaskSuite suite(make_tasks(3, 5));
  const ArchDescriptor arch = ZooConfig{}.arch();
  std::vector<double> mean(3, 0.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto mv = evaluate(network_from_checkpoint(init_checkpoint(arch, seed)), suite, Split::val, 0);
    for (int k = 0; k < 3; ++k) mean[static_cast<std::size_t>(k)] += mv.values[static_cast<std::size_t>(k)] / 50.0;
  }
  for (const double m : mean) {
    CHECK(m >= 0.4);
    CHECK(m <= 0.6);
  }
}

TEST_CASE("evaluation checks the model shape and is deterministic") {
  const TaskSuite suite(make_tasks(3, 5));
  const Checkpoint two_heads = init_checkpoint(hm3::testing::tiny_arch(2, 4, kToyInputDim, 2), 1);
  try {
    evaluate(network_from_checkpoint(two_heads), suite, Split::val, 0);
    FAIL("expected an evaluation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::evaluation);
  }
  const Network net = network_from_checkpoint(init_checkpoint(ZooConfig{}.arch(), 3));
  const auto a = evaluate(net, suite, Split::test, 17, 64);
  const auto b = evaluate(net, suite, Split::test, 17, 64);
  CHECK(a.values == b.values);
  CHECK(a.split == Split::test);
  const auto sub = evaluation_subset(500, 64, 17, 0);
  CHECK(sub.size() == 64);
  CHECK(std::is_sorted(sub.begin(), sub.end()));
  CHECK(evaluation_subset(10, 0, 1, 0).size() == 10);
}

TEST_CASE("zero training steps return the initialization, zero fine-tuning returns the base") {
  const TaskSuite suite(make_tasks(3, 5));
  const ArchDescriptor arch = ZooConfig{}.arch();
  const Checkpoint init = init_checkpoint(arch, derive_seed(8, "init"));
  const Checkpoint trained = train_base(arch, suite, TrainConfig{0, 0.001, 16}, 8);
  CHECK(same_tensors(trained, init));
  const Checkpoint tuned = finetune_task(trained, suite, 2, TrainConfig{0, 0.1, 32}, 8);
  CHECK(same_tensors(tuned, trained));
}

TEST_CASE("training is bit-reproducible") {
  const TaskSuite suite(make_tasks(3, 5));
  const ArchDescriptor arch = ZooConfig{}.arch();
  const TrainConfig cfg{200, 0.001, 16};
  CHECK(encode_checkpoint(train_base(arch, suite, cfg, 4)) == encode_checkpoint(train_base(arch, suite, cfg, 4)));
}

TEST_CASE("divergent training reports the step") {
  const TaskSuite suite(make_tasks(3, 5));
  try {
    train_base(ZooConfig{}.arch(), suite, TrainConfig{500, 1e30, 16}, 1);
    FAIL("expected a training error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::training);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("default base model clears the accuracy bounds") {
  const auto mv = val_metrics(default_zoo().base);
  double mean = 0.0;
  for (const double v : mv.values) {
    CHECK(v > 0.55);
    mean += v / mv.size();
  }
  CHECK(mean >= 0.65);
}

TEST_CASE("fine-tuning helps its own task and interferes with others") {
  const Zoo& zoo = default_zoo();
  const auto base = val_metrics(zoo.base);
  std::vector<MetricVector> tuned;
  for (const auto& c : zoo.finetuned) tuned.push_back(val_metrics(c));
  const auto k_count = static_cast<int>(tuned.size());
  for (int k = 0; k < k_count; ++k) {
    CAPTURE(k);
    const auto& own = tuned[static_cast<std::size_t>(k)].values;
    CHECK(own[static_cast<std::size_t>(k)] >= base.values[static_cast<std::size_t>(k)] + 0.05);
    bool degrades = false;
    for (int j = 0; j < k_count; ++j) {
      if (j != k) degrades |= own[static_cast<std::size_t>(j)] <= base.values[static_cast<std::size_t>(j)] - 0.02;
    }
    CHECK(degrades);
    // Best in zoo on its own task, not best on some other task.
    bool beaten = false;
    for (int m = 0; m < k_count; ++m) {
      if (m == k) continue;
      CHECK(tuned[static_cast<std::size_t>(m)].values[static_cast<std::size_t>(k)] < own[static_cast<std::size_t>(k)]);
      for (int j = 0; j < k_count; ++j) {
        if (j != k) beaten |= tuned[static_cast<std::size_t>(m)].values[static_cast<std::size_t>(j)] > own[static_cast<std::size_t>(j)];
      }
    }
    CHECK(beaten);
  }
}

TEST_CASE("a saved zoo loads back identically") {
  const auto dir = hm3::testing::temp_dir("zoo_roundtrip");
  save_zoo(default_zoo(), dir, 0);
  const Zoo back = load_zoo(dir);
  CHECK(back.tasks.specs() == default_zoo().tasks.specs());
  CHECK(back.base == default_zoo().base);
  REQUIRE(back.finetuned.size() == default_zoo().finetuned.size());
  for (std::size_t k = 0; k < back.finetuned.size(); ++k) CHECK(back.finetuned[k] == default_zoo().finetuned[k]);
}

TEST_CASE("split names parse") {
  CHECK(parse_split("test") == Split::test);
  CHECK(to_string(Split::val) == "val");
  CHECK_THROWS_AS(parse_split("holdout"), Error);
}
