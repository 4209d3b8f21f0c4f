// Minimal library walk-through: synthesise a few images, train the basic
// network briefly, then detect and score candidates on a held-out image.

#include <cstdio>

#include "macnn/evaluation.hpp"
#include "macnn/inference.hpp"
#include "macnn/postprocess.hpp"
#include "macnn/preprocess.hpp"
#include "macnn/synthetic.hpp"
#include "macnn/trainer.hpp"

int main() {
  using namespace macnn;
  SyntheticConfig syn;
  syn.n_images = 4;
  const Dataset data = generate_synthetic(syn);

  std::vector<PreprocessedImage> train_images;
  std::vector<AnnotationSet> train_truths;
  for (std::size_t i = 0; i + 1 < data.images.size(); ++i) {
    train_images.push_back(preprocess(data.images[i]));
    train_truths.push_back(data.annotations[i]);
  }
  const PreprocessedImage test = preprocess(data.images.back());

  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.plan.epoch_size = 300;
  const auto [ckpt, report] = train(build_basic_spec(), train_images, train_truths, cfg, Stage::basic);
  std::printf("trained %zu epochs, last loss %.3f, accuracy %.3f\n", report.loss.size(), report.loss.back(),
              report.accuracy.back());

  InferOptions opt;
  opt.stride = 2;
  const ProbabilityMap map = infer_map(ckpt, test, opt);
  std::vector<Candidate> found = postprocess(map, 5, 5, kDefaultScoreFloor);
  const MatchResult m = match(found, data.annotations.back().centroids);
  std::printf("%s: %zu candidates, %zu of %zu lesions found\n", test.image_id.c_str(), found.size(), m.stats.tp,
              m.stats.tp + m.stats.fn);
  for (std::size_t i = 0; i < found.size() && i < 10; ++i)
    std::printf("  (%d, %d) score %.3f %s\n", found[i].position.x, found[i].position.y, found[i].score,
                m.is_tp[i] ? "lesion" : "");
}
