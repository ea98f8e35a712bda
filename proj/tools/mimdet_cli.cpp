#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "mimdet/checkpoint.hpp"
#include "mimdet/gradcheck.hpp"
#include "mimdet/image_io.hpp"
#include "mimdet/pipeline.hpp"

namespace {

using namespace mimdet;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("MIMDET_SEED")) return std::strtoull(env, nullptr, 10);
  return 0;
}

int run_report_params(bool full) {
  const ModelConfig shown = full ? ModelConfig::full_scale() : ModelConfig::desk();
  const ParamReport r = param_report(shown);
  std::printf("config: %s\n", full ? "full-scale" : "desk");
  std::printf("convstem            %12ld\n", r.convstem);
  std::printf("encoder             %12ld\n", r.encoder);
  std::printf("decoder             %12ld\n", r.decoder);
  std::printf("fpn                 %12ld\n", r.fpn);
  std::printf("head                %12ld\n", r.head);
  std::printf("extractor total     %12ld\n", r.extractor_total);
  std::printf("detector heads (reference, not built)  %12ld\n", r.detection_heads);
  std::printf("extractor + heads   %12ld\n", r.with_detection_heads);

  const ParamReport fs = param_report(ModelConfig::full_scale());
  const double ratio = static_cast<double>(fs.convstem) / static_cast<double>(fs.vit_base_encoder);
  std::printf("full-scale convstem %12ld (expected 4079712)\n", fs.convstem);
  std::printf("convstem / ViT-Base encoder = %.5f (must be < 0.05)\n", ratio);
  return (fs.convstem == 4079712 && ratio < 0.05) ? 0 : 1;
}

int run_report_rf() {
  auto [rf, stride] = convstem_receptive_field(ConvStemConfig::full_scale());
  std::printf("rf=%ld stride=%ld\n", rf, stride);
  return (rf == 31 && stride == 16) ? 0 : 1;
}

int run_grad_check(std::uint64_t seed) {
  TrainState state = make_train_state(ModelConfig::tiny(), seed);
  Tensor batch = make_synthetic_batch(1, 32, 32, seed + 1);
  GradCheckResult r = finite_difference_check(state, batch, 50, seed + 2);
  std::printf("checked %ld parameters, max relative error %.3e (worst: %s)\n",
              r.checked, r.max_rel_err, r.worst_param.c_str());
  return r.max_rel_err < 1e-4 ? 0 : 1;
}

int run_train_demo(long steps, std::uint64_t seed) {
  TrainState state = make_train_state(ModelConfig::desk(), seed);
  Tensor batch = make_synthetic_batch(2, 64, 64, seed + 1);
  double initial = 0, final_loss = 0;
  for (long s = 0; s < steps; ++s) {
    final_loss = train_step(state, batch);
    if (s == 0) initial = final_loss;
    if (s % 25 == 0 || s == steps - 1) std::printf("step %4ld  loss %.6f\n", s, final_loss);
  }
  std::printf("initial %.6f  final %.6f  ratio %.3f\n", initial, final_loss, final_loss / initial);
  return final_loss < 0.3 * initial ? 0 : 1;
}

int run_ablate(double train_ratio, double infer_ratio, int evals, std::uint64_t seed) {
  alloc_stats::reset_peak();
  const auto t0 = std::chrono::steady_clock::now();

  ModelConfig cfg = ModelConfig::desk();
  cfg.train_spec = {SampleMode::Random, train_ratio, seed};
  TrainState state = make_train_state(cfg, seed);
  Tensor batch = make_synthetic_batch(2, 64, 64, seed + 1);
  double train_loss = 0;
  for (long s = 0; s < 300; ++s) train_loss = train_step(state, batch);

  // Evaluate the trained head against the ensembled pyramid.
  const long n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  ParamRef ref(state.params);
  double eval_loss = 0;
  for (long i = 0; i < n; ++i) {
    Tensor image({1, 3, h, w});
    std::copy(batch.data() + i * 3 * h * w, batch.data() + (i + 1) * 3 * h * w, image.data());
    PyramidTensors pyr = ensemble_infer(image, cfg, state.params, infer_ratio, evals, seed + 7);
    Value pred = conv2d(nullptr, constant(pyr.p4), ref("head.weight"), ref("head.bias"), 1, 0);
    Value target = avg_pool2d(nullptr, constant(image), 16, 16);
    eval_loss += mse(nullptr, pred, target).v[0];
  }
  eval_loss /= static_cast<double>(n);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("train ratio %.3f  infer ratio %.3f  evals %d\n", train_ratio, infer_ratio, evals);
  std::printf("final train loss %.6f\n", train_loss);
  std::printf("eval loss %.6f\n", eval_loss);
  std::printf("wall time %.2f s, peak tensor allocation %.1f MiB\n", secs,
              static_cast<double>(alloc_stats::peak()) / (1024.0 * 1024.0));
  return 0;
}

int run_dump_features(const std::string& input, const std::string& out_dir,
                      const std::string& ckpt, std::uint64_t seed) {
  ModelConfig cfg = ModelConfig::desk();
  ParamStore params = ckpt.empty() ? init_params(cfg, seed) : load_checkpoint(ckpt);
  Tensor image = read_image_ppm(input);
  ParamRef ref(params);

  ConvStemOutput stem = convstem_forward(nullptr, constant(image), cfg.convstem, ref);
  PyramidFeatures pyr = forward(nullptr, constant(image), cfg, ref, cfg.infer_spec);

  auto dump = [&](const Value& v, const char* name) {
    Shape s = v.v.shape();
    write_feature_pgm(v.v.reshaped({s[1], s[2], s[3]}), out_dir, name);
    std::printf("wrote %s/%s_{mean,var}.pgm (%ldx%ld)\n", out_dir.c_str(), name, s[3], s[2]);
  };
  dump(stem.s4, "s4");
  dump(stem.s8, "s8");
  dump(pyr.p2, "p2");
  dump(pyr.p3, "p3");
  dump(pyr.p4, "p4");
  dump(pyr.p5, "p5");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIMDet hybrid feature extractor: structural verification CLI"};
  app.require_subcommand(1);
  std::uint64_t seed = default_seed();

  auto* report_params = app.add_subcommand("report-params", "per-module and total parameter counts");
  bool full_scale = false, desk = false;
  report_params->add_flag("--full-scale", full_scale, "report the full-scale configuration");
  report_params->add_flag("--desk", desk, "report the desk-scale configuration (default)");

  auto* report_rf = app.add_subcommand("report-rf", "ConvStem receptive field and stride");

  auto* grad_check = app.add_subcommand("grad-check", "whole-pipeline finite-difference gradient check");
  grad_check->add_option("--seed", seed, "RNG seed");

  auto* train_demo = app.add_subcommand("train-demo", "desk-scale training smoke run");
  long steps = 300;
  train_demo->add_option("--steps", steps, "optimizer steps");
  train_demo->add_option("--seed", seed, "RNG seed");

  auto* ablate = app.add_subcommand("ablate", "train at one sampling ratio, evaluate at another");
  double train_ratio = 0.5, infer_ratio = 1.0;
  int evals = 1;
  ablate->add_option("--train-ratio", train_ratio, "training sampling ratio")->required();
  ablate->add_option("--infer-ratio", infer_ratio, "inference sampling ratio")->required();
  ablate->add_option("--evals", evals, "ensemble members at inference");
  ablate->add_option("--seed", seed, "RNG seed");

  auto* dump = app.add_subcommand("dump-features", "write stem and pyramid feature maps as PGM");
  std::string input, out_dir, ckpt;
  dump->add_option("--input", input, "binary P6 PPM image")->required();
  dump->add_option("--out", out_dir, "output directory")->required();
  dump->add_option("--ckpt", ckpt, "checkpoint with model parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (report_params->parsed()) return run_report_params(full_scale && !desk);
    if (report_rf->parsed()) return run_report_rf();
    if (grad_check->parsed()) return run_grad_check(seed);
    if (train_demo->parsed()) return run_train_demo(steps, seed);
    if (ablate->parsed()) return run_ablate(train_ratio, infer_ratio, evals, seed);
    if (dump->parsed()) return run_dump_features(input, out_dir, ckpt, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
