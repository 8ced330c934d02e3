#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dalip/types.hpp"

namespace dalip {

// Where the class identity of generated samples lives:
//   MeanCoded        - class means differ, class covariances are shared;
//   CovarianceCoded  - class means are identical, covariances differ;
//   MixedCoded       - both moments carry class identity.
enum class Coding { MeanCoded, CovarianceCoded, MixedCoded };

Coding parse_coding(const std::string& name);  // "mean" | "cov" | "mixed"
const char* coding_name(Coding coding);

struct SyntheticDatasetSpec {
  Index num_classes = 10;
  Index samples_per_class = 100;
  Index tokens_per_sample = 8;  // M
  Index latent_dim = 6;
  Index raw_dim = 12;
  Coding coding = Coding::CovarianceCoded;
  double noise_scale = 0.05;
  std::uint64_t seed = 0;
  // Modality mixing maps (raw_dim x latent_dim). Empty means "derive from
  // seed"; explicit maps are used as given.
  Matrix map_image;
  Matrix map_text;

  void validate() const;
};

// One paired observation: both modality views share the class and the
// underlying latent token draw.
struct SampleRecord {
  Index class_id = 0;
  int domain = 0;  // provenance label kept through domain mixing
  Matrix image_tokens;  // M x raw_dim
  Matrix text_tokens;   // M x raw_dim
};

// Accuracy of two brute-force moment classifiers on the held-out split,
// stored with the dataset: a nearest-class-mean rule on token means, and a
// Gaussian quadratic-discriminant rule on token second moments.
struct CalibrationRecord {
  double mean_classifier_acc = 0.0;
  double qda_acc = 0.0;
  double min_cov_separation = 0.0;   // min pairwise Frobenius gap of class covariances
  double min_mean_separation = 0.0;  // min pairwise distance of class means
};

struct SyntheticDataset {
  SyntheticDatasetSpec spec;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> test;
  CalibrationRecord calibration;
};

// Latent-space class moments implied by (spec, class); pure in the spec.
struct ClassModel {
  Matrix mu;     // 1 x latent_dim
  Matrix shape;  // latent_dim x latent_dim factor A with covariance A A^T
  Matrix sigma;  // latent_dim x latent_dim covariance
};
std::vector<ClassModel> build_class_models(const SyntheticDatasetSpec& spec);

// Deterministic generation with an 80/20 per-class split; pure in the spec.
SyntheticDataset generate(const SyntheticDatasetSpec& spec);

// Fixed-budget composition: the merged training stream keeps the per-domain
// size n = min(|a.train|, |b.train|) and draws floor(r*n) samples from a,
// the rest from b, evenly interleaved without randomness; both held-out
// splits are kept, tagged by domain.
SyntheticDataset mix_domains(const SyntheticDataset& a, const SyntheticDataset& b, double r);

// Directory layout: manifest.json plus one token blob per modality per split.
void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

// The brute-force moment classifiers behind CalibrationRecord (image side).
CalibrationRecord calibrate_moments(const std::vector<SampleRecord>& train,
                                    const std::vector<SampleRecord>& test, Index num_classes);

}  // namespace dalip
