#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "model_fixture.hpp"
#include "mtcolor/experiment.hpp"
#include "mtcolor/trainer.hpp"

using namespace mtcolor;
using namespace mtcolor::testing;

namespace {

std::vector<TrainingExample> synthetic_examples(int count, int size, std::uint64_t seed) {
    SynthConfig sc;
    sc.count = count;
    sc.size = size;
    sc.max_shapes = 2;
    sc.seed = seed;
    return training_examples(generate_synthetic(sc));
}

RunConfig tiny_run(int iterations, int image_size = 8) {
    RunConfig rc;
    rc.model = tiny_config(image_size, 4);
    rc.schedule.timesteps = 50;
    rc.train.iterations = iterations;
    rc.train.batch_size = 2;
    rc.train.lr = 1e-3;
    rc.train.warmup = 5;
    rc.train.seed = 3;
    return rc;
}

std::map<std::string, std::vector<float>> snapshot(const ParamStore<float>& s, ParamGroup g) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& p : s.all())
        if (p.group == g) out[p.name] = p.value;
    return out;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("mtcolor_trainer_" + name)).string();
}

} // namespace

TEST(LearningRate, LinearWarmupThenConstant) {
    TrainConfig c;
    c.lr = 5e-5;
    c.warmup = 500;
    EXPECT_DOUBLE_EQ(learning_rate(0, c), 5e-5 / 500);
    EXPECT_DOUBLE_EQ(learning_rate(249, c), 5e-5 * 250 / 500);
    EXPECT_DOUBLE_EQ(learning_rate(499, c), 5e-5);
    EXPECT_DOUBLE_EQ(learning_rate(10000, c), 5e-5);
    c.warmup = 0;
    EXPECT_DOUBLE_EQ(learning_rate(0, c), 5e-5);
}

TEST(TrainDefaults, MatchPublishedSettings) {
    TrainConfig c;
    EXPECT_DOUBLE_EQ(c.lr, 5e-5);
    EXPECT_EQ(c.warmup, 500);
    EXPECT_DOUBLE_EQ(c.dropout, 0.5);
    SamplerConfig s;
    EXPECT_DOUBLE_EQ(s.alpha, 0.2);
    EXPECT_DOUBLE_EQ(s.beta, 0.2);
}

TEST(AdamW, SingleStepMatchesHandComputation) {
    ParamStore<float> st;
    st.add("w", ParamGroup::backbone, {2}, {1.0f, -2.0f});
    st.add("frozen", ParamGroup::guidance, {1}, {3.0f});
    AdamW opt(st);
    TrainConfig c;
    c.weight_decay = 0.1;
    opt.step(st, {{0.5f, -0.25f}, {7.0f}}, 0.01, {ParamGroup::backbone}, c);
    // First step: m̂ = g, v̂ = g², update = g/(|g| + eps) = sign(g).
    EXPECT_NEAR(st[0].value[0], 1.0 - 0.01 * (1.0 + 0.1 * 1.0), 1e-6);
    EXPECT_NEAR(st[0].value[1], -2.0 - 0.01 * (-1.0 + 0.1 * -2.0), 1e-6);
    EXPECT_EQ(st[1].value[0], 3.0f);
    EXPECT_EQ(opt.state().step, 1u);
}

TEST(TrainStage, StageGroupsAndFreezeContracts) {
    TrainConfig c;
    EXPECT_EQ(trainable_groups(1, c), (std::set<ParamGroup>{ParamGroup::backbone, ParamGroup::guidance}));
    EXPECT_EQ(trainable_groups(2, c), (std::set<ParamGroup>{ParamGroup::backbone, ParamGroup::condition}));
    c.stage2_train_backbone = false;
    EXPECT_EQ(trainable_groups(2, c), (std::set<ParamGroup>{ParamGroup::condition}));
    EXPECT_THROW(trainable_groups(3, c), InvalidArgument);

    auto data = synthetic_examples(6, 8, 1);
    auto s1 = train_stage(1, data, tiny_run(20));
    const auto cond_before = snapshot(Denoiser<float>(tiny_config(8, 4), std::uint64_t{3}).params(),
                                      ParamGroup::condition);
    EXPECT_EQ(snapshot(s1.checkpoint.params, ParamGroup::condition), cond_before);
    EXPECT_NE(snapshot(s1.checkpoint.params, ParamGroup::guidance),
              snapshot(Denoiser<float>(tiny_config(8, 4), std::uint64_t{3}).params(), ParamGroup::guidance));

    const auto guide_before = snapshot(s1.checkpoint.params, ParamGroup::guidance);
    auto s2 = train_stage(2, data, tiny_run(100), &s1.checkpoint);
    EXPECT_EQ(snapshot(s2.checkpoint.params, ParamGroup::guidance), guide_before);
    EXPECT_NE(snapshot(s2.checkpoint.params, ParamGroup::condition), cond_before);
    EXPECT_EQ(completed_stages(s2.checkpoint), (std::vector<int>{1, 2}));
}

TEST(TrainStage, StageTwoRequiresStageOne) {
    auto data = synthetic_examples(2, 8, 1);
    EXPECT_THROW(train_stage(2, data, tiny_run(1)), InvalidArgument);
    auto partial = train_stage(1, data, tiny_run(2));
    partial.checkpoint.meta["stages_done"] = nlohmann::json::array();
    EXPECT_THROW(train_stage(2, data, tiny_run(1), &partial.checkpoint), InvalidArgument);
}

TEST(TrainStage, SameSeedGivesBitIdenticalCheckpoints) {
    auto data = synthetic_examples(8, 8, 2);
    auto a = train_stage(1, data, tiny_run(100));
    auto b = train_stage(1, data, tiny_run(100));
    EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
    EXPECT_EQ(a.log.losses, b.log.losses);
    auto rc = tiny_run(100);
    rc.train.seed = 4;
    EXPECT_NE(serialize_checkpoint(train_stage(1, data, rc).checkpoint), serialize_checkpoint(a.checkpoint));
}

TEST(TrainStage, ThreadedBatchMatchesSerial) {
    auto data = synthetic_examples(8, 8, 2);
    auto rc = tiny_run(10);
    rc.train.batch_size = 4;
    auto serial = train_stage(1, data, rc);
    rc.train.threads = 3;
    auto threaded = train_stage(1, data, rc);
    EXPECT_EQ(serialize_checkpoint(serial.checkpoint), serialize_checkpoint(threaded.checkpoint));
}

TEST(TrainStage, ResumeContinuesTheSameTrajectory) {
    auto data = synthetic_examples(8, 8, 2);
    const auto path = tmp_path("resume.ckpt");
    auto rc = tiny_run(10);
    auto full = train_stage(1, data, rc);

    rc.train.checkpoint_every = 4;
    rc.train.iterations = 10;
    // Interrupted run: keep the iteration-8 checkpoint only. The callback
    // fires before that iteration's save, so grab it one step later.
    std::optional<Checkpoint> mid;
    train_stage(1, data, rc, nullptr, path, [&](int it, double, double) {
        if (it == 9) mid = load_checkpoint(path);
    });
    ASSERT_TRUE(mid);
    EXPECT_EQ(mid->meta["iteration"], 8);
    EXPECT_FALSE(mid->meta["complete"].get<bool>());
    auto resumed = train_stage(1, data, rc, &*mid);
    EXPECT_EQ(serialize_checkpoint(resumed.checkpoint), serialize_checkpoint(full.checkpoint));
    std::filesystem::remove(path);
}

TEST(TrainStage, WeightAverageRespectsFreezeAndResume) {
    auto data = synthetic_examples(8, 8, 2);
    auto rc = tiny_run(12);
    rc.train.ema_decay = 0.9;
    auto s1 = train_stage(1, data, rc);
    ASSERT_FALSE(s1.checkpoint.optimizer->ema.empty());
    // Finished stages export the average.
    for (std::size_t k = 0; k < s1.checkpoint.params.size(); ++k)
        EXPECT_EQ(s1.checkpoint.params[k].value, s1.checkpoint.optimizer->ema[k]);
    const auto init = Denoiser<float>(tiny_config(8, 4), std::uint64_t{3});
    EXPECT_EQ(snapshot(s1.checkpoint.params, ParamGroup::condition), snapshot(init.params(), ParamGroup::condition));

    const auto guide = snapshot(s1.checkpoint.params, ParamGroup::guidance);
    auto s2 = train_stage(2, data, rc, &s1.checkpoint);
    EXPECT_EQ(snapshot(s2.checkpoint.params, ParamGroup::guidance), guide);

    const auto path = tmp_path("ema.ckpt");
    rc.train.checkpoint_every = 5;
    std::optional<Checkpoint> mid;
    train_stage(1, data, rc, nullptr, path, [&](int it, double, double) {
        if (it == 6) mid = load_checkpoint(path);
    });
    ASSERT_TRUE(mid);
    EXPECT_EQ(serialize_checkpoint(train_stage(1, data, rc, &*mid).checkpoint), serialize_checkpoint(s1.checkpoint));
    std::filesystem::remove(path);
}

// Held-out-noise loss on a 16-image set at 16x16 halves within 500 steps.
TEST(TrainStage, OverfitsSmallSet) {
    auto data = synthetic_examples(16, 16, 5);
    RunConfig rc;
    rc.model = tiny_config(16, 8);
    rc.schedule.timesteps = 50;
    rc.train.iterations = 500;
    rc.train.batch_size = 4;
    rc.train.lr = 2e-3;
    rc.train.warmup = 20;
    rc.train.dropout = 0.0;
    rc.train.seed = 1;
    auto eval = [&](const Denoiser<float>& m) {
        std::mt19937_64 rng(77);
        double total = 0;
        for (int r = 0; r < 8; ++r) total += training_loss(m, data, rc.schedule.make(), 0.0, rng);
        return total / 8;
    };
    const double before = eval(Denoiser<float>(rc.model, rc.train.seed));
    auto res = train_stage(1, data, rc);
    const double after = eval(load_model(res.checkpoint));
    EXPECT_LE(after, 0.5 * before) << "before " << before << " after " << after;
}

TEST(TrainStage, InvalidConfigurationsAreRejected) {
    auto data = synthetic_examples(2, 8, 1);
    auto rc = tiny_run(1);
    rc.train.batch_size = 0;
    EXPECT_THROW(train_stage(1, data, rc), InvalidArgument);
    rc = tiny_run(1);
    EXPECT_THROW(train_stage(1, {}, rc), InvalidArgument);
}

TEST(RunConfigFile, ParsesKeysAndRejectsUnknownOrDuplicate) {
    std::istringstream ok("lr = 0.001  # peak\nwarmup=10\nalpha = 0.3\nsample_seed = 5\nfuse_mode = convex\n");
    RunConfig rc;
    apply_key_values(rc, parse_key_values(ok));
    EXPECT_DOUBLE_EQ(rc.train.lr, 1e-3);
    EXPECT_EQ(rc.train.warmup, 10);
    EXPECT_DOUBLE_EQ(rc.sampler.alpha, 0.3);
    EXPECT_EQ(rc.sampler.seed, 5u);
    EXPECT_EQ(rc.sampler.fuse_mode, FuseMode::convex);
    std::istringstream dup("lr = 1\nlr = 2\n");
    EXPECT_THROW(parse_key_values(dup), InvalidArgument);
    std::istringstream unknown("learning_rate = 1\n");
    EXPECT_THROW(apply_key_values(rc, parse_key_values(unknown)), InvalidArgument);
    std::istringstream bad("iterations = ten\n");
    EXPECT_THROW(apply_key_values(rc, parse_key_values(bad)), InvalidArgument);
}
