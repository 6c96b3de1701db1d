#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ginv/flsim.hpp"
#include "ginv/tensor.hpp"

namespace ginv {

// Pluggable semantic oracle: attribute posteriors, an embedding space for
// perceptual distance, and a realism gate. The desk-scale implementation
// is a trained toy attribute classifier; a stronger face stack can be
// slotted in behind the same interface.
class SemanticAdapter {
 public:
  virtual ~SemanticAdapter() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::string> attribute_names() const = 0;
  // Posterior per attribute; each vector sums to 1.
  virtual std::map<std::string, std::vector<double>> predict(
      const Tensor& image) const = 0;
  virtual Tensor embed(const Tensor& image) const = 0;
  virtual bool detect(const Tensor& image) const = 0;
};

struct AdapterTrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double lr = 2e-3;
  uint64_t seed = 0;
  int augment_copies = 1;  // augmented copies per image added to the set
  double detect_threshold = 0.8;
};

std::shared_ptr<SemanticAdapter> train_toy_adapter(const Collection& corpus,
                                                   const AdapterTrainConfig& cfg);
void save_adapter(const SemanticAdapter& adapter, const std::string& path);
std::shared_ptr<SemanticAdapter> load_adapter(const std::string& path);

// ---- image metrics ---------------------------------------------------------

double mse(const Tensor& a, const Tensor& b);
// +infinity when mse is exactly zero.
double psnr(const Tensor& a, const Tensor& b, double max_value);

struct PerceptualResult {
  double value = 0.0;
  bool degenerate = false;  // a zero embedding was involved
};
// 1 - cosine similarity of adapter embeddings, in [0,2].
PerceptualResult perceptual_distance(const Tensor& a, const Tensor& b,
                                     const SemanticAdapter& adapter);

// Optimal assignment minimizing total MSE between originals and
// reconstructions (permutation pi with recon[pi[i]] matched to orig[i]).
std::vector<int> disambiguate(const std::vector<Tensor>& originals,
                              const std::vector<Tensor>& reconstructions);

// Exact linear-sum-assignment solver (shortest augmenting paths).
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost);

// Indices passing the realism gate; empty means "fall back to random
// guessing" downstream.
std::vector<int> ensemble_filter(const std::vector<Tensor>& reconstructions,
                                 const SemanticAdapter& adapter);

// ---- report ----------------------------------------------------------------

struct MetricsReport {
  double mse = 0.0;
  double psnr = 0.0;  // may be +inf
  double perceptual = 0.0;
  std::map<std::string, double> semantic;
  std::optional<std::vector<int>> assignment;
  std::vector<int> ensemble_kept;
  bool random_guess = false;
  struct Intra {
    double mse = 0.0, psnr = 0.0, perceptual = 0.0, similarity = 0.0;
  } intra_user;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

struct ReconstructionResult;  // attack.hpp

// Scores one attack run against the user's original batch. User-level
// results average the single reconstruction against every original;
// sample-level results are disambiguated first.
MetricsReport score_run(const ReconstructionResult& result,
                        const UserDataset& user,
                        const SemanticAdapter& adapter);

}  // namespace ginv
