#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccma/feature_store.hpp"
#include "ccma/matrix.hpp"

namespace ccma {

/// Uniform without replacement; clamps to |unlabeled|. Returns train indices.
IndexSet select_random(const IndexSet& unlabeled, std::size_t batch, std::uint64_t seed);

enum class UncertaintyMode { kLeastConfidence, kEntropy, kMargins };

/// Higher means more uncertain.
std::vector<double> uncertainty_scores(const PosteriorMatrix& posteriors, UncertaintyMode mode);

/// Row positions, most uncertain first; ties to the smaller position.
std::vector<std::size_t> select_uncertainty(const PosteriorMatrix& posteriors, std::size_t batch,
                                            UncertaintyMode mode);

/// k-center greedy in `embeds` (full train table). The cover starts as
/// `covered`; with an empty cover the first pick is the unlabeled point
/// farthest from the unlabeled centroid. Returns train indices.
IndexSet select_coreset(const EmbeddingTable& embeds, const IndexSet& covered,
                        const IndexSet& unlabeled, std::size_t batch);

/// H(mean_k p_k) - mean_k H(p_k) per row.
std::vector<double> bald_scores(const std::vector<PosteriorMatrix>& mc_posteriors);

std::vector<std::size_t> select_bald(const std::vector<PosteriorMatrix>& mc_posteriors,
                                     std::size_t batch);

struct BadgeSelection {
  std::vector<std::size_t> positions;
  bool fell_back_to_random = false;
};

/// k-means++ seeding over gradient-embedding rows.
BadgeSelection select_badge(const Matrix& grad_embeds, std::size_t batch, std::uint64_t seed);

}  // namespace ccma
