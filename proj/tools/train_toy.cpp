// Trains the toy denoiser on procedural scenes (epsilon prediction, null text).
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "geodiff/diffnet.hpp"
#include "geodiff/scenes.hpp"

using namespace geodiff;
using diffnet::Mat;

namespace {

struct Adam {
  double lr = 1e-3;
  double b1 = 0.9;
  double b2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Mat> m, v;

  void update(diffnet::Denoiser& model, const std::vector<Mat>& grads) {
    if (m.empty()) {
      for (const Mat& g : grads) m.push_back(Mat::Zero(g.rows(), g.cols())), v.push_back(Mat::Zero(g.rows(), g.cols()));
    }
    ++step;
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grads[i];
      v[i] = b2 * v[i] + (1 - b2) * grads[i].cwiseProduct(grads[i]);
      const Mat upd = (m[i] / c1).array() / ((v[i] / c2).array().sqrt() + eps);
      model.set_parameter(i, model.parameters()[i].value() - lr * upd);
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train the toy 16x16-latent denoiser on procedural scenes"};
  std::string out = "checkpoints/toy16.bin";
  long samples = 12000;
  int batch = 4;
  double lr = 2e-3;
  std::uint64_t seed = 7;
  int image_size = 32;
  long save_every = 2000;
  app.add_option("-o,--out", out, "Checkpoint path");
  app.add_option("--samples", samples, "Training samples");
  app.add_option("--batch", batch, "Samples per update");
  app.add_option("--lr", lr, "Peak Adam learning rate");
  app.add_option("--seed", seed, "Seed for weights and data");
  app.add_option("--image-size", image_size, "Scene resolution before encoding");
  app.add_option("--save-every", save_every, "Checkpoint interval in samples");
  CLI11_PARSE(app, argc, argv);

  diffnet::Denoiser model = diffnet::Denoiser::random(diffnet::ModelConfig{}, seed);
  model.set_trainable(true);
  const int size = model.config().latent_size;
  std::size_t null_index = 0;
  for (std::size_t i = 0; i < model.parameter_names().size(); ++i) {
    if (model.parameter_names()[i] == "null_text") null_index = i;
  }
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Adam adam;
  const long updates = samples / batch;
  double running = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (long u = 0; u < updates; ++u) {
    // Linear warmup, cosine decay.
    const double progress = double(u) / updates;
    adam.lr = lr * std::min(1.0, (u + 1) / 100.0) * 0.5 * (1 + std::cos(M_PI * progress));
    std::vector<Mat> grads;
    double batch_loss = 0.0;
    for (int b = 0; b < batch; ++b) {
      const auto scene = scenes::render(scenes::random_spec(rng, image_size));
      const Mat z0 = diffnet::encode_image(scene.image, size, model.config().latent_channels);
      const int t = 1 + static_cast<int>(scenes::unit(rng) * model.schedule().train_steps);
      Mat noise(z0.rows(), z0.cols());
      for (Eigen::Index i = 0; i < noise.size(); ++i) {
        const double u1 = std::max(scenes::unit(rng), 1e-300);
        const double u2 = scenes::unit(rng);
        noise(i) = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      }
      const Mat zt = diffnet::forward_noise(model.schedule(), z0, t, noise);
      const auto& params = model.parameters();
      const auto pred = model.eps(ad::constant(zt), size, size, t, params[null_index]);
      const auto diff = ad::sub(pred, ad::constant(noise));
      const auto loss = ad::mean(ad::mul(diff, diff));
      batch_loss += loss.item();
      const auto g = ad::gradient(loss, params);
      if (grads.empty()) {
        grads = g.grads;
      } else {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += g.grads[i];
      }
    }
    double norm = 0.0;
    for (Mat& g : grads) g /= batch, norm += g.squaredNorm();
    norm = std::sqrt(norm);
    if (norm > 1.0) {
      for (Mat& g : grads) g /= norm;
    }
    adam.update(model, grads);
    running = u == 0 ? batch_loss / batch : 0.98 * running + 0.02 * batch_loss / batch;
    const long seen = (u + 1) * batch;
    if ((u + 1) % 50 == 0 || u + 1 == updates) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("samples %ld loss %.5f lr %.2e %.0fs\n", seen, running, adam.lr, secs);
      std::fflush(stdout);
    }
    if (seen % save_every < batch || u + 1 == updates) model.save(out);
  }
  return 0;
}
