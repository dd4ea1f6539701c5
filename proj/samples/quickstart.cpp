// Library walk-through: synthesize a small toy corpus, train a few epochs,
// convert one utterance to every other speaker and print the latent rates.
//
//   quickstart [epochs]

#include <cstdlib>
#include <iostream>

#include "cdhvae/analysis/toy_corpus.hpp"
#include "cdhvae/conversion/conversion.hpp"
#include "cdhvae/model/presets.hpp"
#include "cdhvae/trainer/trainer.hpp"

using namespace cdhvae;

int main(int argc, char** argv) {
  const int epochs = argc > 1 ? std::atoi(argv[1]) : 3;

  analysis::ToyCorpusConfig toy;
  toy.speakers = 3;
  toy.utterances = 4;
  const auto mel = features::default_mel_params();
  const auto data = analysis::toy_dataset(toy, mel, 40);
  std::cout << data.size() << " segments from " << data.vocab.size() << " speakers\n";

  auto cfg = model::desk_config();
  cfg.base_channels = 16;  // small enough for a quick CPU run
  model::Cdhvae<float> m(cfg, static_cast<int>(data.vocab.size()), 1);

  trainer::TrainConfig t;
  t.epochs = epochs;
  t.learning_rate = 2e-3;
  trainer::TrainOptions opt;
  opt.mel = mel;
  opt.log = log_to_stderr;
  const auto ck = trainer::train(m, data, t, opt);

  const auto pt = objective::rd_evaluate(m, data, t.beta);
  std::cout << "rate " << format_fixed(pt.rate, 3) << " nats (" << format_fixed(pt.invariant_rate, 3)
            << " in z<=K), distortion " << format_fixed(pt.distortion, 3) << " nats per segment\n";

  // Conversion works on raw log-mel; the Converter applies the stored normalization.
  const conversion::Converter conv(ck);
  features::MelUtterance source;
  source.frames = features::extract_log_mel(analysis::toy_waveforms(toy)[0].samples, toy.sample_rate, mel);
  const auto& from = data.vocab.name(SpeakerId(0));
  for (std::size_t s = 1; s < data.vocab.size(); ++s) {
    const auto& to = data.vocab.name(SpeakerId(static_cast<int>(s)));
    const auto out = conv.convert(source, from, to);
    std::cout << from << " -> " << to << ": " << out.frame_count() << " frames\n";
  }
  return 0;
}
