#include "udaliver/orchestration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "udaliver/errors.hpp"
#include "udaliver/pseudo.hpp"
#include "udaliver/rng.hpp"
#include "udaliver/signals.hpp"
#include "udaliver/stpl.hpp"

namespace udaliver {

// ---------------------------------------------------------------------------
// Variants

namespace {

struct VariantInfo {
  Variant v;
  const char* name;
  const char* slug;
};

constexpr VariantInfo kVariants[] = {
    {Variant::Proposed, "Proposed", "proposed"}, {Variant::ISIM, "ISIM", "isim"},
    {Variant::PSIM_SA, "PSIM/SA", "psim_sa"},    {Variant::SEA, "SEA", "sea"},
    {Variant::SA_SEA, "SA+SEA", "sa_sea"},       {Variant::WoMCPLG, "w/o MCPLG", "wo_mcplg"},
    {Variant::WoLSAF, "w/o LSAF", "wo_lsaf"},    {Variant::WithPP, "with PP", "with_pp"},
    {Variant::WoPAMR, "w/o PAMR", "wo_pamr"},    {Variant::WoSTPL, "w/o STPL", "wo_stpl"},
    {Variant::WithDML, "with DML", "with_dml"},  {Variant::WoSSL, "w/o SSL", "wo_ssl"},
};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

}  // namespace

std::string variant_name(Variant v) {
  for (const auto& info : kVariants)
    if (info.v == v) return info.name;
  throw ConfigError("unknown variant");
}

std::vector<std::string> variant_names() {
  std::vector<std::string> out;
  for (const auto& info : kVariants) out.emplace_back(info.name);
  return out;
}

Variant parse_variant(const std::string& name) {
  const auto key = lower(name);
  for (const auto& info : kVariants)
    if (key == lower(info.name) || key == info.slug) return info.v;
  std::string valid;
  for (const auto& info : kVariants) valid += std::string(valid.empty() ? "" : ", ") + "\"" + info.name + "\"";
  throw ConfigError("unknown variant \"" + name + "\"; valid variants: " + valid);
}

VariantSpec variant_spec(Variant v) {
  VariantSpec s;
  auto u2_only = [&] {
    s.use_u3 = s.use_u4 = false;
    s.align_u3 = s.entropy = s.pamr_loss = false;
    s.align_logits = s.align_entropy = false;
    s.report_network = "U2";
  };
  switch (v) {
    case Variant::Proposed: break;
    case Variant::ISIM: u2_only(); s.align_features = true; break;
    case Variant::PSIM_SA: u2_only(); s.align_logits = true; break;
    case Variant::SEA: u2_only(); s.align_entropy = true; break;
    case Variant::SA_SEA: u2_only(); s.align_logits = s.align_entropy = true; break;
    case Variant::WoMCPLG: s.mean_completer = false; break;
    case Variant::WoLSAF: s.lsaf = false; break;
    case Variant::WithPP: s.post_process = true; break;
    case Variant::WoPAMR: s.pamr_loss = false; break;
    case Variant::WoSTPL: s.use_u4 = false; break;
    case Variant::WithDML: s.dml = true; break;
    case Variant::WoSSL: s.pamr_loss = false; s.use_u4 = false; break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Configuration

double PretrainConfig::lr_at(int epoch) const { return lr * std::pow(lr_decay, double(epoch)); }

void PretrainConfig::validate() const {
  net.validate();
  if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (!(lr > 0.0) || !(lr_decay > 0.0)) throw ConfigError("pretrain: lr and lr_decay must be positive");
  if (batch_size < 2) throw ConfigError("pretrain: batch_size must be >= 2");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"net", c.net},           {"epochs", c.epochs},         {"lr", c.lr},
       {"lr_decay", c.lr_decay}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  j.at("net").get_to(c.net);
  j.at("epochs").get_to(c.epochs);
  j.at("lr").get_to(c.lr);
  j.at("lr_decay").get_to(c.lr_decay);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
}

void TrainConfig::validate() const {
  weights.validate();
  pamr.validate();
  for (double lr : {lr_u2, lr_u3, lr_u4, lr_d1, lr_d2})
    if (!(lr > 0.0)) throw ConfigError("train: learning rates must be positive");
  if (!(rms_alpha > 0.0 && rms_alpha < 1.0)) throw ConfigError("train: rms_alpha must lie in (0,1)");
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (critic_update_ratio < 1) throw ConfigError("train: critic_update_ratio must be >= 1");
  if (u3_base < 1 || u4_base < 1 || critic_base < 1 || critic_max < 1)
    throw ConfigError("train: network widths must be positive");
  if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"weights", c.weights},
       {"lr_u2", c.lr_u2},
       {"lr_u3", c.lr_u3},
       {"lr_u4", c.lr_u4},
       {"lr_d1", c.lr_d1},
       {"lr_d2", c.lr_d2},
       {"rms_alpha", c.rms_alpha},
       {"rms_eps", c.rms_eps},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"critic_update_ratio", c.critic_update_ratio},
       {"u3_base", c.u3_base},
       {"u4_base", c.u4_base},
       {"critic_base", c.critic_base},
       {"critic_max", c.critic_max},
       {"pamr",
        {{"iterations", c.pamr.iterations},
         {"kernel_size", c.pamr.kernel_size},
         {"dilations", c.pamr.dilations},
         {"kernel", c.pamr.kernel == AffinityKernel::Squared ? "squared" : "literal"},
         {"sigma_floor", c.pamr.sigma_floor}}},
       {"variant", variant_name(c.variant)},
       {"checkpoint_every", c.checkpoint_every},
       {"check_invariants", c.check_invariants}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("weights").get_to(c.weights);
  j.at("lr_u2").get_to(c.lr_u2);
  j.at("lr_u3").get_to(c.lr_u3);
  j.at("lr_u4").get_to(c.lr_u4);
  j.at("lr_d1").get_to(c.lr_d1);
  j.at("lr_d2").get_to(c.lr_d2);
  j.at("rms_alpha").get_to(c.rms_alpha);
  j.at("rms_eps").get_to(c.rms_eps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  j.at("critic_update_ratio").get_to(c.critic_update_ratio);
  j.at("u3_base").get_to(c.u3_base);
  j.at("u4_base").get_to(c.u4_base);
  j.at("critic_base").get_to(c.critic_base);
  j.at("critic_max").get_to(c.critic_max);
  const auto& p = j.at("pamr");
  p.at("iterations").get_to(c.pamr.iterations);
  p.at("kernel_size").get_to(c.pamr.kernel_size);
  p.at("dilations").get_to(c.pamr.dilations);
  c.pamr.kernel = p.at("kernel").get<std::string>() == "literal" ? AffinityKernel::Literal : AffinityKernel::Squared;
  p.at("sigma_floor").get_to(c.pamr.sigma_floor);
  c.variant = parse_variant(j.at("variant").get<std::string>());
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("check_invariants").get_to(c.check_invariants);
}

// ---------------------------------------------------------------------------
// Networks

namespace {

// Restores per-module train/eval flags on scope exit.
class ModeGuard {
 public:
  explicit ModeGuard(torch::nn::Module& m) {
    for (const auto& sub : m.modules(/*include_self=*/true)) saved_.emplace_back(sub, sub->is_training());
  }
  ~ModeGuard() {
    for (auto& [m, flag] : saved_) m->train(flag);
  }

 private:
  std::vector<std::pair<std::shared_ptr<torch::nn::Module>, bool>> saved_;
};

template <typename Fn>
void for_each_net(ModelBundle& b, Fn&& fn) {
  if (b.u1) fn("U1", *b.u1);
  if (b.u2) fn("U2", *b.u2);
  if (b.u3) fn("U3", *b.u3);
  if (b.u4) fn("U4", *b.u4);
  if (b.d1) fn("D1", *b.d1);
  if (b.d2) fn("D2", *b.d2);
}

void clip_parameters(torch::nn::Module& m, double bound) {
  torch::NoGradGuard guard;
  for (auto& p : m.parameters()) p.clamp_(-bound, bound);
}

double finite_value(const torch::Tensor& t, LossTerm term) {
  const double v = t.item<double>();
  if (!std::isfinite(v)) throw NumericError(std::string(term_name(term)), "non-finite loss value");
  return v;
}

// Loss inputs that fail validation (non-finite scores) surface as a numeric
// error on the term being computed.
template <typename Fn>
torch::Tensor term_value(LossTerm term, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw NumericError(std::string(term_name(term)), e.what());
  }
}

}  // namespace

std::map<std::string, bool> ModelBundle::trainable() {
  std::map<std::string, bool> out;
  for_each_net(*this, [&](const std::string& name, torch::nn::Module& m) {
    for (const auto& p : m.named_parameters()) out[name + "." + p.key()] = p.value().requires_grad();
  });
  return out;
}

void ModelBundle::train_mode() {
  u1->eval();
  if (u2) {
    u2->eval();
    u2->stem()->train();
  }
  if (u3) u3->train();
  if (u4) u4->train();
  if (d1) d1->train();
  if (d2) d2->train();
}

void ModelBundle::eval_mode() {
  for_each_net(*this, [](const std::string&, torch::nn::Module& m) { m.eval(); });
}

void ModelBundle::save(TensorArchive& ar) const {
  auto& self = const_cast<ModelBundle&>(*this);
  for_each_net(self, [&](const std::string& name, torch::nn::Module& m) { ar.add_module(name + ".", m); });
}

void ModelBundle::load(const TensorArchive& ar) {
  for_each_net(*this, [&](const std::string& name, torch::nn::Module& m) { ar.load_module(name + ".", m); });
}

void share_and_freeze(SegNet& u1, SegNet& u2) {
  if (!(u1->config() == u2->config())) throw ConfigError("share_and_freeze: U1 and U2 architectures differ");
  copy_state(*u1, *u2);
  set_requires_grad(*u1, false);
  for (auto& p : u2->named_parameters()) p.value().set_requires_grad(SegNetImpl::is_stem_name(p.key()));
}

ModelBundle make_bundle(SegNet u1, const TrainConfig& cfg, int64_t image_size) {
  cfg.validate();
  const auto spec = variant_spec(cfg.variant);
  ModelBundle b;
  b.u1 = u1;
  const auto& c1 = u1->config();
  b.u2 = build_segnet(c1, derive_seed(cfg.seed, 2));
  share_and_freeze(b.u1, b.u2);
  if (spec.use_u3) b.u3 = build_segnet({cfg.u3_base, 1, 1, c1.depth}, derive_seed(cfg.seed, 3));
  if (spec.use_u4) b.u4 = build_segnet({cfg.u4_base, 1, 1, c1.depth}, derive_seed(cfg.seed, 4));
  CriticConfig cc;
  cc.height = cc.width = image_size;
  cc.base_channels = cfg.critic_base;
  cc.max_channels = cfg.critic_max;
  if (spec.align_logits || spec.align_features || spec.align_u3) {
    auto c = cc;
    c.in_channels = spec.align_features ? c1.base_filters : 1;
    b.d1 = build_critic(c, derive_seed(cfg.seed, 11));
  }
  if (spec.align_entropy) b.d2 = build_critic(cc, derive_seed(cfg.seed, 12));
  b.train_mode();
  return b;
}

UdaState::UdaState(ModelBundle b, TrainConfig c) : bundle(std::move(b)), cfg(std::move(c)) {
  cfg.validate();
  spec = variant_spec(cfg.variant);
  if (!bundle.u1 || !bundle.u2) throw ConfigError("UdaState: bundle needs U1 and U2");
  if (spec.use_u3 != bool(bundle.u3) || spec.use_u4 != bool(bundle.u4))
    throw ConfigError("UdaState: bundle networks do not match variant " + variant_name(cfg.variant));
  auto rms = [&](std::vector<torch::Tensor> ps, double lr) {
    return std::make_unique<RmsProp>(std::move(ps), lr, cfg.rms_alpha, cfg.rms_eps);
  };
  opt.u2 = rms(bundle.u2->stem_parameters(), cfg.lr_u2);
  if (bundle.u3) opt.u3 = rms(bundle.u3->parameters(), cfg.lr_u3);
  if (bundle.u4) opt.u4 = rms(bundle.u4->parameters(), cfg.lr_u4);
  if (bundle.d1) opt.d1 = rms(bundle.d1->parameters(), cfg.lr_d1);
  if (bundle.d2) opt.d2 = rms(bundle.d2->parameters(), cfg.lr_d2);
}

namespace {

nlohmann::json history_json(const std::vector<ValidationPoint>& h) {
  auto arr = nlohmann::json::array();
  for (const auto& p : h) arr.push_back({{"epoch", p.epoch}, {"network", p.network}, {"dice", p.dice}});
  return arr;
}

nlohmann::json bundle_configs(ModelBundle& b) {
  nlohmann::json j = nlohmann::json::object();
  if (b.u1) j["U1"] = b.u1->config();
  if (b.u2) j["U2"] = b.u2->config();
  if (b.u3) j["U3"] = b.u3->config();
  if (b.u4) j["U4"] = b.u4->config();
  if (b.d1) j["D1"] = b.d1->config();
  if (b.d2) j["D2"] = b.d2->config();
  return j;
}

}  // namespace

void UdaState::save(const std::filesystem::path& path, int epoch) const {
  auto& self = const_cast<UdaState&>(*this);
  TensorArchive ar;
  ar.meta = {{"kind", "uda"},
             {"epoch", epoch},
             {"config", cfg},
             {"networks", bundle_configs(self.bundle)},
             {"history", history_json(history)}};
  bundle.save(ar);
  auto put = [&](const std::unique_ptr<Optimizer>& o, const std::string& name) {
    if (o) o->save_state(ar, "opt." + name + ".");
  };
  put(opt.u2, "U2");
  put(opt.u3, "U3");
  put(opt.u4, "U4");
  put(opt.d1, "D1");
  put(opt.d2, "D2");
  ar.save(path);
}

int UdaState::load(const std::filesystem::path& path) {
  const auto ar = TensorArchive::load(path);
  if (ar.meta.value("kind", "") != "uda") throw ConfigError(path.string() + ": not a UDA training checkpoint");
  if (ar.meta.at("networks") != bundle_configs(bundle))
    throw ConfigError(path.string() + ": checkpoint networks do not match the configured bundle");
  bundle.load(ar);
  auto get = [&](const std::unique_ptr<Optimizer>& o, const std::string& name) {
    if (o) o->load_state(ar, "opt." + name + ".");
  };
  get(opt.u2, "U2");
  get(opt.u3, "U3");
  get(opt.u4, "U4");
  get(opt.d1, "D1");
  get(opt.d2, "D2");
  history.clear();
  for (const auto& p : ar.meta.at("history"))
    history.push_back({p.at("epoch").get<int>(), p.at("network").get<std::string>(), p.at("dice").get<double>()});
  const int epoch = ar.meta.at("epoch").get<int>();
  next_epoch = epoch + 1;
  bundle.train_mode();
  return epoch;
}

// ---------------------------------------------------------------------------
// One iteration

LossBreakdown uda_step(UdaState& st, const torch::Tensor& xs, const torch::Tensor& ys, const torch::Tensor& xt,
                       int epoch, int iteration) {
  if (epoch < 0) throw ValidationError("uda_step: negative epoch");
  if (xs.dim() != 4 || xt.dim() != 4 || !xs.sizes().equals(ys.sizes()))
    throw DimensionError("uda_step: expected N x 1 x H x W source/label/target batches");
  auto& b = st.bundle;
  const auto& cfg = st.cfg;
  const auto& sp = st.spec;
  const auto& w = cfg.weights;
  const bool switching = sp.stage_switch();
  b.train_mode();

  // (a) forward passes
  SegNetOutput src1;
  {
    torch::NoGradGuard guard;
    src1 = b.u1->forward_tapped(xs);
  }
  const auto o1 = src1.logits;
  const auto q1 = weighted_self_information(torch::sigmoid(o1), false);

  auto tgt2 = b.u2->forward_tapped(xt);
  const auto o2 = tgt2.logits;
  const auto p2 = torch::sigmoid(o2);
  const auto q2 = weighted_self_information(p2, false);
  const auto seg_source = dice_loss(torch::sigmoid(b.u2->forward(xs)), ys, false);

  const auto xt_prime = sp.lsaf ? low_signal_augment_batch(xt, w.beta) : xt;
  torch::Tensor o3, p3, o4, p4;
  if (b.u3) {
    o3 = b.u3->forward(xt_prime);
    p3 = torch::sigmoid(o3);
  }
  if (b.u4) {
    o4 = b.u4->forward(sp.dml ? xt_prime : xt);
    p4 = torch::sigmoid(o4);
  }

  // (b) pseudo-labels, all detached
  const auto o2d = o2.detach();
  torch::Tensor y2;
  int hard = 0;
  if (sp.mean_completer) {
    auto pl = mean_completer(o2d);
    y2 = pl.masks;
    hard = pl.hard_count();
  } else {
    y2 = normal_pseudolabel(o2d);
    for (bool h : detect_hard(y2)) hard += h ? 1 : 0;
  }
  const auto y3 = b.u3 ? normal_pseudolabel(o3.detach()) : torch::Tensor();
  const auto y4 = b.u4 ? normal_pseudolabel(o4.detach()) : torch::Tensor();

  LossParts parts;

  // (c) critic update on detached generator outputs
  if (b.d1 || b.d2) {
    if (b.d1) set_requires_grad(*b.d1, true);
    if (b.d2) set_requires_grad(*b.d2, true);
    for (int r = 0; r < cfg.critic_update_ratio; ++r) {
      if (st.opt.d1) st.opt.d1->zero_grad();
      if (st.opt.d2) st.opt.d2->zero_grad();
      std::vector<std::pair<LossTerm, torch::Tensor>> terms;
      auto critic = [&](LossTerm term, Critic& d, const torch::Tensor& t, const torch::Tensor& s) {
        terms.emplace_back(term, term_value(term, [&] { return critic_loss(d->forward(t), d->forward(s)); }));
      };
      if (sp.align_logits) critic(LossTerm::CriticD1O2, b.d1, o2d, o1);
      if (sp.align_features) critic(LossTerm::CriticD1F2, b.d1, tgt2.stem_features.detach(), src1.stem_features);
      if (sp.align_u3 && b.u3) critic(LossTerm::CriticD1O3, b.d1, o3.detach(), o1);
      if (sp.align_entropy) critic(LossTerm::CriticD2Q2, b.d2, q2.detach(), q1);
      torch::Tensor total;
      for (auto& [term, t] : terms) {
        parts.set(term, finite_value(t, term));
        auto weighted = t * w.weight(term, epoch, switching);
        total = total.defined() ? total + weighted : weighted;
      }
      if (!total.defined()) break;
      total.backward();
      if (st.opt.d1) st.opt.d1->step();
      if (st.opt.d2) st.opt.d2->step();
      if (b.d1) clip_parameters(*b.d1, w.clip_bound);
      if (b.d2) clip_parameters(*b.d2, w.clip_bound);
      if (cfg.check_invariants) {
        for (Critic* d : {&b.d1, &b.d2}) {
          if (d->is_empty()) continue;
          for (const auto& p : (*d)->parameters())
            if (p.abs().max().item<double>() > w.clip_bound)
              throw NumericError("critic_clip", "critic parameter outside the clipping bound");
        }
      }
    }
    if (b.d1) set_requires_grad(*b.d1, false);
    if (b.d2) set_requires_grad(*b.d2, false);
  }

  // (d) generator update with the critics frozen
  std::vector<std::pair<LossTerm, torch::Tensor>> gen;
  gen.emplace_back(LossTerm::SegSource, seg_source);
  auto adversarial = [&](LossTerm term, Critic& d, const torch::Tensor& x) {
    gen.emplace_back(term, term_value(term, [&] { return gen_adv_loss(d->forward(x)); }));
  };
  if (sp.align_logits) adversarial(LossTerm::AdvGenU2, b.d1, o2);
  if (sp.align_features) adversarial(LossTerm::AdvGenF2, b.d1, tgt2.stem_features);
  if (sp.align_entropy) adversarial(LossTerm::AdvGenQ2, b.d2, q2);
  if (b.u3) {
    if (b.u4 && !sp.dml) {
      auto l = stpl_losses(stpl_stage(epoch, w.T), p3, p4, y2, y3, y4);
      gen.emplace_back(LossTerm::SegU3, l.loss_u3);
      gen.emplace_back(LossTerm::SegU4, l.loss_u4);
    } else {
      gen.emplace_back(LossTerm::SegU3, dice_loss(p3, y2, false));
      if (b.u4) {
        gen.emplace_back(LossTerm::SegU4, dice_loss(p4, y3, false));
        gen.emplace_back(LossTerm::SegU3Mutual, dice_loss(p3, y4, false));
        gen.emplace_back(LossTerm::SegU4Label, dice_loss(p4, y2, false));
      }
    }
    if (sp.pamr_loss) {
      const auto refined = refine(p3.detach(), xt_prime, cfg.pamr);
      gen.emplace_back(LossTerm::Pamr, pamr_loss(p3, refined.pseudo));
    }
    if (sp.align_u3) adversarial(LossTerm::AdvGenU3, b.d1, o3);
    if (sp.entropy) gen.emplace_back(LossTerm::Entropy, entropy_loss(p3, false));
  }

  torch::Tensor gen_total;
  for (auto& [term, t] : gen) {
    parts.set(term, finite_value(t, term));
    auto weighted = t * w.weight(term, epoch, switching);
    gen_total = gen_total.defined() ? gen_total + weighted : weighted;
  }
  for (auto* o : {st.opt.u2.get(), st.opt.u3.get(), st.opt.u4.get()})
    if (o) o->zero_grad();
  gen_total.backward();
  for (auto* o : {st.opt.u2.get(), st.opt.u3.get(), st.opt.u4.get()})
    if (o) o->step();
  if (b.d1) set_requires_grad(*b.d1, true);
  if (b.d2) set_requires_grad(*b.d2, true);

  auto out = compose_total(parts, w, epoch, switching);
  out.iteration = iteration;
  out.hard_samples = hard;
  return out;
}

// ---------------------------------------------------------------------------
// Inference

torch::Tensor predict_logits(SegNet& net, const torch::Tensor& x, int64_t chunk) {
  ModeGuard mode(*net);
  net->eval();
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> outs;
  for (int64_t i = 0; i < x.size(0); i += chunk) outs.push_back(net->forward(x.slice(0, i, std::min(i + chunk, x.size(0)))));
  return torch::cat(outs, 0);
}

torch::Tensor predict_subject(SegNet& net, const Subject& s, double lsaf_beta, const std::optional<PamrConfig>& post) {
  auto x = s.slices.unsqueeze(1);
  if (lsaf_beta > 0.0) x = low_signal_augment_batch(x, lsaf_beta);
  auto probs = torch::sigmoid(predict_logits(net, x));
  if (post) probs = refine(probs, x, *post).probs.to(probs.scalar_type());
  return (probs > 0.5).to(torch::kFloat32).squeeze(1);
}

double mean_subject_dice(SegNet& net, const std::vector<const Subject*>& subjects, double lsaf_beta) {
  if (subjects.empty()) throw ValidationError("mean_subject_dice: no subjects");
  double sum = 0.0;
  for (const auto* s : subjects) {
    const auto pred = mask_from_tensor(predict_subject(net, *s, lsaf_beta));
    sum += ratio_metrics(confusion_counts(pred, s->label_volume())).DS;
  }
  return sum / double(subjects.size());
}

std::vector<MetricsRecord> evaluate_subjects(SegNet& net, const std::vector<const Subject*>& subjects,
                                             double lsaf_beta, const std::optional<PamrConfig>& post) {
  std::vector<MetricsRecord> out;
  for (const auto* s : subjects) {
    if (!s->labels) throw ValidationError("evaluate_subjects: subject " + s->id + " has no labels");
    const auto pred = mask_from_tensor(predict_subject(net, *s, lsaf_beta, post));
    out.push_back(compute_metrics(pred, s->label_volume(), s->spacing, s->id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining and checkpoints

PretrainResult pretrain_source(const PretrainConfig& cfg, const std::vector<const Subject*>& train,
                               const std::vector<const Subject*>& val) {
  cfg.validate();
  if (train.empty()) throw ValidationError("pretrain_source: empty training set");
  const auto x = stack_slices(train);
  const auto y = stack_slices(train, true);
  const int64_t n = x.size(0);
  if (n == 0) throw ValidationError("pretrain_source: training subjects have no slices");

  PretrainResult res;
  res.model = build_segnet(cfg.net, cfg.seed);
  Adam adam(res.model->parameters(), cfg.lr);
  for (int e = 0; e < cfg.epochs; ++e) {
    adam.set_lr(cfg.lr_at(e));
    res.lrs.push_back(adam.lr());
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng rng(derive_seed(cfg.seed, 0x9e37, uint64_t(e)));
    rng.shuffle(order);
    res.model->train();
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t end = std::min<int64_t>(start + cfg.batch_size, n);
      if (end - start < 2) break;
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kInt64);
      adam.zero_grad();
      auto loss = dice_loss(torch::sigmoid(res.model->forward(x.index_select(0, idx))), y.index_select(0, idx), false);
      loss.backward();
      adam.step();
    }
    res.val_dice.push_back(val.empty() ? std::nan("") : mean_subject_dice(res.model, val));
  }
  res.model->eval();
  return res;
}

void save_segnet(const std::filesystem::path& path, SegNet& net, uint64_t seed, const nlohmann::json& extra) {
  TensorArchive ar;
  ar.meta = {{"kind", "segnet"}, {"config", net->config()}, {"seed", seed}, {"extra", extra}};
  ar.add_module("net.", *net);
  ar.save(path);
}

SegNet load_segnet(const std::filesystem::path& path, const std::string& network,
                   const std::optional<SegNetConfig>& expected) {
  const auto ar = TensorArchive::load(path);
  const auto kind = ar.meta.value("kind", "");
  SegNetConfig cfg;
  std::string prefix;
  if (kind == "segnet") {
    cfg = ar.meta.at("config").get<SegNetConfig>();
    prefix = "net.";
  } else if (kind == "uda") {
    const auto name = network.empty() ? std::string("U3") : network;
    const auto& nets = ar.meta.at("networks");
    if (!nets.contains(name)) throw ConfigError(path.string() + ": checkpoint has no network " + name);
    cfg = nets.at(name).get<SegNetConfig>();
    prefix = name + ".";
  } else {
    throw ConfigError(path.string() + ": not a network checkpoint");
  }
  if (expected && !(*expected == cfg)) {
    nlohmann::json a = *expected, b = cfg;
    throw ConfigError(path.string() + ": stored config " + b.dump() + " does not match expected " + a.dump());
  }
  auto net = SegNet(cfg);
  ar.load_module(prefix, *net);
  net->eval();
  return net;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::optional<int> latest_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  static const std::regex re("epoch_([0-9]+)\\.ckpt");
  std::optional<int> best;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, re)) {
      const int k = std::stoi(m[1].str());
      if (!best || k > *best) best = k;
    }
  }
  return best;
}

// Keeps only log records from epochs <= last_epoch.
void truncate_log(const std::filesystem::path& path, int last_epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || j.value("epoch", 0) > last_epoch) continue;
    kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
  if (!out) throw IoError(path.string(), "cannot rewrite loss log");
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace

std::vector<ValidationPoint> train_uda(UdaState& st, const UdaData& data, const RunOptions& opt) {
  if (data.source.empty() || data.target.empty()) throw ValidationError("train_uda: source and target data required");
  const auto& cfg = st.cfg;
  const bool files = !opt.run_dir.empty();
  const auto log_path = opt.run_dir / "loss_log.jsonl";
  if (files) {
    std::error_code ec;
    std::filesystem::create_directories(opt.run_dir, ec);
    if (ec) throw IoError(opt.run_dir.string(), "cannot create run directory: " + ec.message());
    if (opt.resume) {
      if (auto k = latest_checkpoint(opt.run_dir)) {
        st.load(opt.run_dir / ("epoch_" + std::to_string(*k) + ".ckpt"));
        truncate_log(log_path, *k);
      } else {
        write_file(log_path, "");
      }
    } else {
      write_file(log_path, "");
    }
    nlohmann::json snapshot = {{"train", cfg}, {"networks", bundle_configs(st.bundle)}};
    write_file(opt.run_dir / "config.json", snapshot.dump(2) + "\n");
  }

  const auto xs_all = stack_slices(data.source);
  const auto ys_all = stack_slices(data.source, true);
  const auto xt_all = stack_slices(data.target);
  const int64_t n_src = xs_all.size(0), n_tgt = xt_all.size(0);
  const int64_t B = std::min<int64_t>(cfg.batch_size, n_tgt);
  if (B < 2) throw ValidationError("train_uda: need at least two target slices");
  const int64_t iters = n_tgt / B;
  const double u3_beta = st.spec.lsaf ? cfg.weights.beta : 0.0;
  const double u4_beta = st.spec.dml && st.spec.lsaf ? cfg.weights.beta : 0.0;

  for (int e = st.next_epoch; e < cfg.epochs; ++e) {
    std::ofstream log;
    if (files) {
      log.open(log_path, std::ios::app);
      if (!log) throw IoError(log_path.string(), "cannot append to loss log");
      if (st.spec.stage_switch() && (e == 0 || e == cfg.weights.T)) {
        nlohmann::json ev = {{"event", "stage"}, {"epoch", e}, {"phase", phase_name(stpl_stage(e, cfg.weights.T).phase)}};
        log << ev.dump() << "\n";
      }
    }
    std::vector<int64_t> order(static_cast<size_t>(n_tgt));
    for (int64_t i = 0; i < n_tgt; ++i) order[size_t(i)] = i;
    Rng target_rng(derive_seed(cfg.seed, 0x74, uint64_t(e)));
    target_rng.shuffle(order);
    Rng source_rng(derive_seed(cfg.seed, 0x73, uint64_t(e)));

    for (int64_t it = 0; it < iters; ++it) {
      auto tidx = torch::tensor(std::vector<int64_t>(order.begin() + it * B, order.begin() + (it + 1) * B), torch::kInt64);
      std::vector<int64_t> s(static_cast<size_t>(B));
      for (auto& v : s) v = int64_t(source_rng.below(uint64_t(n_src)));
      auto sidx = torch::tensor(s, torch::kInt64);
      auto lb = uda_step(st, xs_all.index_select(0, sidx), ys_all.index_select(0, sidx), xt_all.index_select(0, tidx),
                         e, int(it));
      if (files) log << lb.to_json().dump() << "\n";
      if (opt.on_step) opt.on_step(lb);
    }
    if (files) log.close();

    std::vector<ValidationPoint> points;
    if (!data.validation.empty()) {
      points.push_back({e, "U2", mean_subject_dice(st.bundle.u2, data.validation)});
      if (st.bundle.u3) points.push_back({e, "U3", mean_subject_dice(st.bundle.u3, data.validation, u3_beta)});
      if (st.bundle.u4) points.push_back({e, "U4", mean_subject_dice(st.bundle.u4, data.validation, u4_beta)});
    }
    st.history.insert(st.history.end(), points.begin(), points.end());
    st.next_epoch = e + 1;
    if (files) {
      write_file(opt.run_dir / "validation.csv", curves_table(st.history));
      if ((e + 1) % cfg.checkpoint_every == 0 || e + 1 == cfg.epochs)
        st.save(opt.run_dir / ("epoch_" + std::to_string(e) + ".ckpt"), e);
    }
    if (opt.on_epoch) opt.on_epoch(e, points);
    st.bundle.train_mode();
  }
  return st.history;
}

AblationReport run_ablation(Variant variant, SegNet& u1, TrainConfig cfg, const UdaData& data,
                            const std::vector<const Subject*>& test, const RunOptions& opt) {
  cfg.variant = variant;
  const auto image_size = stack_slices({data.target.front()}).size(-1);
  UdaState st(make_bundle(u1, cfg, image_size), cfg);
  AblationReport rep;
  rep.variant = variant_name(variant);
  rep.history = train_uda(st, data, opt);
  rep.network = st.spec.report_network;
  SegNet net = rep.network == "U2" ? st.bundle.u2 : st.bundle.u3;
  const double beta = rep.network == "U3" && st.spec.lsaf ? cfg.weights.beta : 0.0;
  std::optional<PamrConfig> post;
  if (st.spec.post_process) post = cfg.pamr;
  if (!test.empty()) {
    rep.records = evaluate_subjects(net, test, beta, post);
    rep.summary = aggregate(rep.records);
  }
  return rep;
}

}  // namespace udaliver
