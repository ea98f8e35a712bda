#include "mimdet/pipeline.hpp"

#include <cmath>
#include <stdexcept>

#include "mimdet/random.hpp"

namespace mimdet {

void ModelConfig::validate() const {
  if (convstem.out_dim != encoder.dim)
    throw std::invalid_argument("config: convstem.out_dim must equal encoder.dim");
  if (encoder.dim % encoder.heads != 0 || encoder.dim % 4 != 0)
    throw std::invalid_argument("config: encoder dim must divide by heads and by 4");
  if (decoder.dim % 4 != 0 || (decoder.depth > 0 && decoder.dim % decoder.heads != 0))
    throw std::invalid_argument("config: decoder dim must divide by 4 (and by heads when depth > 0)");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig cfg;
  cfg.convstem = ConvStemConfig::full_scale();
  cfg.encoder = EncoderConfig::full_scale();
  cfg.decoder = DecoderConfig::full_scale();
  cfg.fpn_dim = 256;
  return cfg;
}

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.convstem = ConvStemConfig::desk();
  cfg.encoder = EncoderConfig::desk();
  cfg.decoder = DecoderConfig::desk();
  cfg.fpn_dim = 32;
  return cfg;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.convstem = {3, 2, 8, 1e-6};
  cfg.encoder = {8, 1, 2, 4.0, 1e-6};
  cfg.decoder = {8, 1, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  cfg.fpn_dim = 4;
  return cfg;
}

void declare_model_params(const ModelConfig& cfg, const ParamSink& sink) {
  cfg.validate();
  declare_convstem_params(cfg.convstem, "convstem", sink);
  declare_encoder_params(cfg.encoder, "encoder", sink);
  declare_decoder_params(cfg.decoder, cfg.encoder.dim, "decoder", sink);
  declare_fpn_params(cfg.fpn(), "fpn", sink);
  sink("head.weight", {3, cfg.fpn_dim, 1, 1});
  sink("head.bias", {3});
}

namespace {
bool is_weight(const std::string& name) {
  // Norm scales start at one, offsets and biases at zero; everything else is
  // truncated-normal (std 0.02, cut at +-2 std).
  if (name.find(".norm.") != std::string::npos || name.find(".ln1.") != std::string::npos ||
      name.find(".ln2.") != std::string::npos)
    return false;
  return name.size() < 5 || name.substr(name.size() - 5) != ".bias";
}
}  // namespace

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  declare_model_params(cfg, [&](const std::string& name, const Shape& shape) {
    Tensor& t = store.add(name, shape);
    if (name.find(".gamma") != std::string::npos) {
      for (long i = 0; i < t.numel(); ++i) t[i] = 1.0;
    } else if (is_weight(name)) {
      trunc_normal_fill(t, rng, 0.02);
    }
    // betas and biases stay zero
  });
  return store;
}

PyramidFeatures forward(Tape* t, const Value& image, const ModelConfig& cfg,
                        const ParamRef& p, const SampleSpec& spec) {
  cfg.validate();
  ConvStemOutput stem = convstem_forward(t, image, cfg.convstem, p);
  SampleSpec eff = spec;
  if (eff.mode == SampleMode::Grid && eff.grid_w == 0) eff.grid_w = stem.grid_w;
  SampledSet set = sample_indices(stem.grid_h * stem.grid_w, eff);
  Tensor pos = pos_embed_2d(stem.grid_h, stem.grid_w, cfg.encoder.dim);
  Value encoded = encode_partial(t, stem.tokens, pos, set, cfg.encoder, p);
  Value seq = fill_full_sequence(t, encoded, stem.tokens, set, cfg.decoder, p, stem.grid_h, stem.grid_w);
  Value s16 = decode(t, seq, cfg.decoder, p, stem.grid_h, stem.grid_w);
  return build_pyramid(t, stem.s4, stem.s8, s16, cfg.fpn(), p);
}

TrainState make_train_state(const ModelConfig& cfg, std::uint64_t seed, AdamConfig adam) {
  TrainState st;
  st.config = cfg;
  st.params = init_params(cfg, seed);
  st.adam = adam;
  st.seed = seed;
  for (const std::string& name : st.params.names()) {
    st.adam_m.add(name, st.params.at(name).shape());
    st.adam_v.add(name, st.params.at(name).shape());
  }
  return st;
}

namespace {
Value head_loss(Tape* tape, const Tensor& batch, const ModelConfig& cfg, const ParamRef& ref,
                const SampleSpec& spec) {
  Value image = constant(batch);
  PyramidFeatures pyr = forward(tape, image, cfg, ref, spec);
  // The shared head reads every level so gradient reaches all pyramid
  // parameters; each level regresses the image pooled to its own stride.
  const Value* levels[4] = {&pyr.p2, &pyr.p3, &pyr.p4, &pyr.p5};
  const long strides[4] = {4, 8, 16, 32};
  Value total;
  for (int i = 0; i < 4; ++i) {
    Value pred = conv2d(tape, *levels[i], ref("head.weight"), ref("head.bias"), 1, 0);
    Value target = avg_pool2d(nullptr, image, strides[i], strides[i]);
    Value term = mse(tape, pred, constant(target.v));
    total = i == 0 ? term : add(tape, total, term);
  }
  return scale(tape, total, 0.25);
}
}  // namespace

double train_step(TrainState& state, const Tensor& batch) {
  Tape tape;
  ParamRef ref(state.params, &tape);
  SampleSpec spec = state.config.train_spec;
  spec.seed += static_cast<std::uint64_t>(state.step);
  Value loss = head_loss(&tape, batch, state.config, ref, spec);
  const double loss_value = loss.v[0];
  if (!std::isfinite(loss_value))
    throw std::runtime_error("training failure: non-finite loss at step " + std::to_string(state.step));
  backward(tape, loss);

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.adam.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.adam.beta2, static_cast<double>(state.step));
  const auto& ids = ref.leaf_ids();
  for (const std::string& name : state.params.names()) {
    Tensor& w = state.params.at(name);
    Tensor& m = state.adam_m.at(name);
    Tensor& v = state.adam_v.at(name);
    auto it = ids.find(name);
    for (long i = 0; i < w.numel(); ++i) {
      const double g = it == ids.end() ? 0.0 : tape.grad(it->second)[i];
      m[i] = state.adam.beta1 * m[i] + (1.0 - state.adam.beta1) * g;
      v[i] = state.adam.beta2 * v[i] + (1.0 - state.adam.beta2) * g * g;
      w[i] -= state.adam.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.adam.eps);
    }
  }
  return loss_value;
}

ParamStore loss_gradients(const TrainState& state, const Tensor& batch, double* loss_out) {
  Tape tape;
  ParamRef ref(state.params, &tape);
  SampleSpec spec = state.config.train_spec;
  spec.seed += static_cast<std::uint64_t>(state.step);
  Value loss = head_loss(&tape, batch, state.config, ref, spec);
  if (loss_out) *loss_out = loss.v[0];
  backward(tape, loss);
  ParamStore grads;
  const auto& ids = ref.leaf_ids();
  for (const std::string& name : state.params.names()) {
    Tensor& g = grads.add(name, state.params.at(name).shape());
    auto it = ids.find(name);
    if (it != ids.end()) axpy(g, tape.grad(it->second));
  }
  return grads;
}

double training_loss(const TrainState& state, const Tensor& batch) {
  ParamRef ref(state.params);
  SampleSpec spec = state.config.train_spec;
  spec.seed += static_cast<std::uint64_t>(state.step);
  return head_loss(nullptr, batch, state.config, ref, spec).v[0];
}

Tensor make_synthetic_batch(long n, long h, long w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor batch({n, 3, h, w});
  for (long img = 0; img < n; ++img)
    for (long c = 0; c < 3; ++c) {
      const double fx = 1.0 + 3.0 * rng.uniform();
      const double fy = 1.0 + 3.0 * rng.uniform();
      const double px = 6.2831853 * rng.uniform();
      const double py = 6.2831853 * rng.uniform();
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
          const double v = 0.5 + 0.25 * std::sin(fx * 6.2831853 * x / static_cast<double>(w) + px) +
                           0.25 * std::sin(fy * 6.2831853 * y / static_cast<double>(h) + py);
          batch[((img * 3 + c) * h + y) * w + x] = v;
        }
    }
  return batch;
}

PyramidTensors ensemble_infer(const Tensor& image, const ModelConfig& cfg, const ParamStore& params,
                              double ratio, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("ensemble_infer: k must be >= 1");
  ParamRef ref(params);
  PyramidTensors acc;
  for (int i = 0; i < k; ++i) {
    SampleSpec spec{SampleMode::Random, ratio, seed + static_cast<std::uint64_t>(i)};
    PyramidFeatures pyr = forward(nullptr, constant(image), cfg, ref, spec);
    if (i == 0) {
      acc = {pyr.p2.v.clone(), pyr.p3.v.clone(), pyr.p4.v.clone(), pyr.p5.v.clone()};
    } else {
      axpy(acc.p2, pyr.p2.v);
      axpy(acc.p3, pyr.p3.v);
      axpy(acc.p4, pyr.p4.v);
      axpy(acc.p5, pyr.p5.v);
    }
  }
  const double inv = 1.0 / static_cast<double>(k);
  for (Tensor* t : {&acc.p2, &acc.p3, &acc.p4, &acc.p5})
    for (long i = 0; i < t->numel(); ++i) (*t)[i] *= inv;
  return acc;
}

long mask_rcnn_head_param_count() {
  auto conv = [](long cout, long cin, long k) { return cout * cin * k * k + cout; };
  auto fc = [](long out, long in) { return out * in + out; };
  const long classes = 80;
  // RPN: shared 3x3 conv, objectness and 4-delta predictors for 3 anchors.
  const long rpn = conv(256, 256, 3) + conv(3, 256, 1) + conv(12, 256, 1);
  // Box head (4conv1fc) on 7x7 RoIs, plus class and box predictors.
  const long box = 4 * conv(256, 256, 3) + fc(1024, 256 * 7 * 7) +
                   fc(classes + 1, 1024) + fc(4 * classes, 1024);
  // Mask head: 4 convs, one 2x2 deconv, per-class 1x1 predictor.
  const long mask = 4 * conv(256, 256, 3) + conv(256, 256, 2) + conv(classes, 256, 1);
  return rpn + box + mask;
}

ParamReport param_report(const ModelConfig& cfg) {
  ParamReport r;
  r.convstem = convstem_param_count(cfg.convstem);
  r.encoder = encoder_param_count(cfg.encoder);
  r.decoder = decoder_param_count(cfg.decoder, cfg.encoder.dim);
  r.fpn = fpn_param_count(cfg.fpn());
  r.head = 3 * cfg.fpn_dim * 1 * 1 + 3;
  r.extractor_total = r.convstem + r.encoder + r.decoder + r.fpn;
  r.vit_base_encoder = encoder_param_count(EncoderConfig::full_scale());
  r.detection_heads = mask_rcnn_head_param_count();
  r.with_detection_heads = r.extractor_total + r.detection_heads;
  return r;
}

}  // namespace mimdet
