#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ginv/capture.hpp"
#include "ginv/victim.hpp"

namespace ginv {

// One annotated image of the raw collection before user grouping.
struct ImageRecord {
  std::string user_id;
  Tensor image;  // (H,W,C) in [0,1]
  int label = 0;
  std::map<std::string, int> attributes;
};

using Collection = std::vector<ImageRecord>;

// All images of one user share the user-level attribute values.
struct UserDataset {
  std::string user_id;
  Tensor images;  // (N,H,W,C)
  std::vector<int> labels;
  std::map<std::string, int> attributes;

  int size() const { return static_cast<int>(labels.size()); }
  Tensor image(int i) const;
};

// Synthetic "faces-like" generator: two binary user-level attributes are
// rendered as strong visual motifs (background hue warm/cool, bright blob
// in the top/bottom half); per-image jitter varies everything else.
// Pixels are quantized to 8-bit levels so in-memory corpora match their
// PNG files exactly.
struct CorpusSpec {
  int users = 50;
  int images_per_user = 30;
  int height = 8, width = 8;
  uint64_t seed = 1;
  double p_warm = 0.5, p_top = 0.5;
};

Collection generate_corpus(const CorpusSpec& spec);

// Render one fresh sample of the same distribution at an arbitrary
// resolution (used to train the prior on held-out draws).
Tensor render_sample(int height, int width, bool warm, bool top, Rng& rng);

// Groups a collection by key, dropping groups smaller than min_images.
// Grouping is stable in first-appearance order of the keys.
std::vector<UserDataset> partition_by_user(
    const Collection& collection,
    const std::function<std::string(const ImageRecord&)>& grouping,
    int min_images = 1);

std::vector<UserDataset> partition_by_user(const Collection& collection,
                                           int min_images = 1);

// One federated round: sample a batch of B images from the user (seeded
// shuffle, first B) and capture the averaged gradient.
GradientCapture capture_round(const VictimModel& model, const UserDataset& user,
                              int batch_size, uint64_t seed,
                              bool known_labels = false);

// Indices that capture_round would sample, exposed for oracle tests.
std::vector<int> capture_sample_indices(int n, int batch_size, uint64_t seed);

// Bit-exact single-file container (see docs/capture_format.md).
void serialize_capture(const GradientCapture& capture, const std::string& path);
GradientCapture deserialize_capture(const std::string& path);

// Expected container size in bytes for a capture, per the documented layout.
size_t capture_file_size(const GradientCapture& capture);

// Raises if the capture does not match the model manifest and weights.
void validate_capture(const GradientCapture& capture, const VictimModel& model);

// Corpus directory round trip: images as PNG plus attribute table.
void write_corpus_dir(const Collection& corpus, const std::string& dir,
                      bool force);
Collection load_corpus_dir(const std::string& dir);

}  // namespace ginv
