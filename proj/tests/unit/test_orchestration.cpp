#include "testing.hpp"

#include <filesystem>
#include <fstream>

#include "udaliver/errors.hpp"
#include "udaliver/orchestration.hpp"

using namespace udaliver;

namespace fs = std::filesystem;

namespace {

TrainConfig tiny(Variant v = Variant::Proposed) {
  TrainConfig c;
  c.variant = v;
  c.u3_base = 4;
  c.u4_base = 2;
  c.critic_base = 4;
  c.critic_max = 16;
  c.batch_size = 2;
  c.epochs = 2;
  c.seed = 3;
  c.pamr.iterations = 2;
  c.check_invariants = true;
  return c;
}

SegNet tiny_u1() { return build_segnet({4, 1, 1, 2}, 1); }

struct Batch {
  torch::Tensor xs, ys, xt;
};

Batch batch(uint64_t seed = 0) {
  torch::manual_seed(seed);
  auto xs = torch::rand({2, 1, 64, 64});
  auto ys = (xs > 0.5).to(torch::kFloat32);
  return {xs, ys, torch::rand({2, 1, 64, 64})};
}

SynthDataset tiny_data() {
  SynthConfig s;
  s.n_source = 2;
  s.n_target = 2;
  s.slices_per_subject = 2;
  return generate_synthetic(s);
}

}  // namespace

TEST_SUITE("orchestration") {
  TEST_CASE("variant names") {
    CHECK(variant_names().size() == 12);
    for (const auto& n : variant_names()) CHECK(variant_name(parse_variant(n)) == n);
    CHECK(parse_variant("wo_lsaf") == Variant::WoLSAF);
    CHECK(parse_variant("PROPOSED") == Variant::Proposed);
    CHECK_THROWS_AS(parse_variant("nonsense"), ConfigError);
  }

  TEST_CASE("variant specs") {
    CHECK_FALSE(variant_spec(Variant::WoSTPL).use_u4);
    CHECK_FALSE(variant_spec(Variant::WoSTPL).stage_switch());
    CHECK(variant_spec(Variant::ISIM).align_features);
    CHECK(variant_spec(Variant::ISIM).report_network == "U2");
    CHECK_FALSE(variant_spec(Variant::ISIM).use_u3);
    CHECK_FALSE(variant_spec(Variant::WoLSAF).lsaf);
    CHECK(variant_spec(Variant::WithPP).post_process);
    CHECK_FALSE(variant_spec(Variant::WithDML).stage_switch());
    CHECK(variant_spec(Variant::Proposed).stage_switch());
  }

  TEST_CASE("configs") {
    TrainConfig c = tiny(Variant::SEA);
    nlohmann::json j = c;
    auto back = j.get<TrainConfig>();
    CHECK(back.variant == Variant::SEA);
    CHECK(back.u3_base == 4);
    c.lr_u3 = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    PretrainConfig p;
    p.lr = 0.1;
    p.lr_decay = 0.5;
    CHECK(p.lr_at(2) == doctest::Approx(0.025));
  }

  TEST_CASE("sharing freezes U1 and all of U2 but its stem") {
    auto b = make_bundle(tiny_u1(), tiny(), 64);
    CHECK(state_equal(*b.u1, *b.u2));
    for (const auto& [name, trainable] : b.trainable()) {
      if (name.rfind("U1.", 0) == 0) CHECK_FALSE(trainable);
      if (name.rfind("U2.", 0) == 0) CHECK(trainable == (name.rfind("U2.enc0.", 0) == 0));
      if (name.rfind("U3.", 0) == 0) CHECK(trainable);
    }
    auto other = build_segnet({8, 1, 1, 2}, 1);
    CHECK_THROWS_AS(share_and_freeze(b.u1, other), ConfigError);
  }

  TEST_CASE("bundle composition follows the variant") {
    auto w = make_bundle(tiny_u1(), tiny(Variant::WoSTPL), 64);
    CHECK(bool(w.u3));
    CHECK_FALSE(bool(w.u4));
    auto i = make_bundle(tiny_u1(), tiny(Variant::ISIM), 64);
    REQUIRE(bool(i.d1));
    CHECK(i.d1->config().in_channels == 4);
    CHECK_FALSE(bool(i.u3));
    CHECK_FALSE(bool(i.d2));
    auto p = make_bundle(tiny_u1(), tiny(), 64);
    CHECK(p.d1->config().in_channels == 1);
  }

  TEST_CASE("training step keeps frozen weights and clips critics") {
    auto u1 = tiny_u1();
    UdaState st(make_bundle(u1, tiny(), 64), tiny());
    auto u1_before = build_segnet(u1->config(), 99);
    copy_state(*st.bundle.u1, *u1_before);
    auto u2_before = build_segnet(u1->config(), 99);
    copy_state(*st.bundle.u2, *u2_before);
    auto b = batch();
    auto out = uda_step(st, b.xs, b.ys, b.xt, 0);
    CHECK(state_equal(*st.bundle.u1, *u1_before));
    bool stem_moved = false, rest_same = true;
    auto before = u2_before->named_parameters();
    for (const auto& p : st.bundle.u2->named_parameters()) {
      const bool same = torch::equal(p.value(), before[p.key()]);
      if (SegNetImpl::is_stem_name(p.key()))
        stem_moved |= !same;
      else
        rest_same &= same;
    }
    CHECK(stem_moved);
    CHECK(rest_same);
    for (auto* m : {static_cast<torch::nn::Module*>(st.bundle.d1.ptr().get()),
                    static_cast<torch::nn::Module*>(st.bundle.d2.ptr().get())})
      for (const auto& p : m->parameters()) CHECK(p.abs().max().item<double>() <= 0.01);
    CHECK(out.total == doctest::Approx(out.reconstruct_total()).epsilon(1e-12));
    CHECK(out.u3_source == "y2");
    CHECK(out.parts.has(LossTerm::SegU4));
    CHECK(out.parts.has(LossTerm::Entropy));
  }

  TEST_CASE("stage switch") {
    auto c = tiny();
    c.weights.T = 1;
    UdaState st(make_bundle(tiny_u1(), c, 64), c);
    auto b = batch();
    auto a = uda_step(st, b.xs, b.ys, b.xt, 0);
    auto z = uda_step(st, b.xs, b.ys, b.xt, 1);
    CHECK(a.u3_source == "y2");
    CHECK(z.u3_source == "y4");
    CHECK(a.weights[int(LossTerm::SegU3)] == 1.0);
    CHECK(z.weights[int(LossTerm::SegU3)] == 5.0);
  }

  TEST_CASE("without the partner network there are no U4 terms") {
    auto c = tiny(Variant::WoSTPL);
    c.weights.T = 1;
    UdaState st(make_bundle(tiny_u1(), c, 64), c);
    auto b = batch();
    auto out = uda_step(st, b.xs, b.ys, b.xt, 1);
    CHECK_FALSE(out.parts.has(LossTerm::SegU4));
    CHECK(out.u3_source == "y2");
    CHECK(out.weights[int(LossTerm::SegU3)] == 1.0);
  }

  TEST_CASE("U2-only variants train only U2's stem") {
    auto c = tiny(Variant::ISIM);
    UdaState st(make_bundle(tiny_u1(), c, 64), c);
    auto b = batch();
    auto out = uda_step(st, b.xs, b.ys, b.xt, 0);
    CHECK(out.parts.has(LossTerm::CriticD1F2));
    CHECK(out.parts.has(LossTerm::AdvGenF2));
    CHECK_FALSE(out.parts.has(LossTerm::SegU3));
    CHECK(out.u3_source.empty());
  }

  TEST_CASE("non-finite input names the term") {
    UdaState st(make_bundle(tiny_u1(), tiny(), 64), tiny());
    auto b = batch();
    b.xs[0][0][0][0] = std::nan("");
    try {
      uda_step(st, b.xs, b.ys, b.xt, 0);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(e.term() == "critic_d1_o2");
    }
  }

  TEST_CASE("predictions") {
    auto d = tiny_data();
    auto net = tiny_u1();
    auto p = predict_subject(net, d.target[0]);
    CHECK(p.sizes() == d.target[0].slices.sizes());
    CHECK(((p == 0) | (p == 1)).all().item<bool>());
    PamrConfig pc;
    pc.iterations = 1;
    CHECK(predict_subject(net, d.target[0], 3.0, pc).sizes() == p.sizes());
    auto recs = evaluate_subjects(net, {&d.target[0], &d.target[1]});
    CHECK(recs.size() == 2);
    Subject nolab = d.target[0];
    nolab.labels.reset();
    CHECK_THROWS_AS(evaluate_subjects(net, {&nolab}), ValidationError);
  }

  TEST_CASE("pretraining and segnet checkpoints") {
    auto d = tiny_data();
    PretrainConfig pc;
    pc.net = {4, 1, 1, 2};
    pc.epochs = 2;
    pc.batch_size = 2;
    auto r = pretrain_source(pc, {&d.source[0]}, {&d.source[1]});
    CHECK(r.val_dice.size() == 2);
    CHECK(r.lrs[1] == doctest::Approx(pc.lr * pc.lr_decay));
    const auto path = fs::temp_directory_path() / "udaliver_orch_u1.ckpt";
    save_segnet(path, r.model, 0);
    auto back = load_segnet(path);
    CHECK(state_equal(*back, *r.model));
    CHECK_THROWS_AS(load_segnet(path, "", SegNetConfig{8, 1, 1, 2}), ConfigError);
    fs::remove(path);
    CHECK_THROWS_AS(pretrain_source(pc, {}, {}), ValidationError);
  }

  TEST_CASE("resumed training matches an uninterrupted run") {
    auto d = tiny_data();
    UdaData data{{&d.source[0], &d.source[1]}, {&d.target[0], &d.target[1]}, {&d.target[0]}};
    const auto dir_a = fs::temp_directory_path() / "udaliver_resume_a";
    const auto dir_b = fs::temp_directory_path() / "udaliver_resume_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    auto c = tiny();
    c.weights.T = 1;
    auto u1 = tiny_u1();

    UdaState full(make_bundle(u1, c, 64), c);
    train_uda(full, data, {dir_a});

    auto c1 = c;
    c1.epochs = 1;
    UdaState first(make_bundle(u1, c1, 64), c1);
    train_uda(first, data, {dir_b});
    UdaState second(make_bundle(u1, c, 64), c);
    train_uda(second, data, {dir_b});

    CHECK(state_equal(*full.bundle.u3, *second.bundle.u3));
    CHECK(state_equal(*full.bundle.u2, *second.bundle.u2));
    CHECK(state_equal(*full.bundle.d1, *second.bundle.d1));
    CHECK(fs::exists(dir_b / "epoch_1.ckpt"));
    CHECK(fs::exists(dir_b / "loss_log.jsonl"));
    std::ifstream a(dir_a / "validation.csv"), b(dir_b / "validation.csv");
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
  }

  TEST_CASE("checkpoint mismatch is rejected") {
    const auto path = fs::temp_directory_path() / "udaliver_orch_state.ckpt";
    UdaState st(make_bundle(tiny_u1(), tiny(), 64), tiny());
    st.save(path, 0);
    UdaState other(make_bundle(tiny_u1(), tiny(Variant::WoSTPL), 64), tiny(Variant::WoSTPL));
    CHECK_THROWS_AS(other.load(path), ConfigError);
    CHECK(load_segnet(path, "U3")->config().base_filters == 4);
    fs::remove(path);
  }
}
