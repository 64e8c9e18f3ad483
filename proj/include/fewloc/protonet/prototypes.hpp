#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::protonet {

/// A class that must contribute vectors has none.
class MissingClassError : public std::invalid_argument {
 public:
  explicit MissingClassError(int class_id)
      : std::invalid_argument("class " + std::to_string(class_id) + " has no vectors"),
        class_id_(class_id) {}
  int class_id() const { return class_id_; }

 private:
  int class_id_;
};

/// Leave-one-out is undefined for a class with a single member.
class FoldDegenerateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PrototypeSet {
  std::vector<int> class_ids;
  std::size_t dim = 0;
  std::vector<double> centroids;  // row-major, one row per class id
  std::vector<std::size_t> counts;

  std::size_t size() const { return class_ids.size(); }
  std::span<const double> centroid(std::size_t row) const {
    return {centroids.data() + row * dim, dim};
  }
  /// Row of `class_id`; throws MissingClassError when absent.
  std::size_t row_of(int class_id) const;
};

/// c_j = arithmetic mean of the rows of `vectors` labelled j, for each j in
/// `class_ids` (in that order).
PrototypeSet mean_prototypes(std::span<const double> vectors, std::size_t dim,
                             std::span<const int> labels, std::span<const int> class_ids);

/// Running per-class totals for centroids built from a stream of chunks.
class PrototypeAccumulator {
 public:
  PrototypeAccumulator(std::vector<int> class_ids, std::size_t dim);
  void add(int class_id, std::span<const double> vector);
  /// Throws MissingClassError for a class that received no vectors.
  PrototypeSet finish() const;

 private:
  std::vector<int> class_ids_;
  std::size_t dim_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
};

/// Embeddings of one training batch: n classes x p images x D, stored
/// class-major so image i of class j sits at row j*p + i.
struct FoldedBatchEmbedding {
  std::size_t classes = 0;
  std::size_t per_class = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> vector(std::size_t image, std::size_t cls) const {
    return {values.data() + (cls * per_class + image) * dim, dim};
  }
  void validate() const;
};

/// Own-class centroids with each image folded out, for every (i,j) at once:
/// row j*p + i holds (p/(p-1)) * (c_j - v_ij / p). Throws FoldDegenerateError
/// when p < 2.
std::vector<double> fold_all(const FoldedBatchEmbedding& batch);

/// Prototypes seen by query (i,j): the batch centroids with class j's entry
/// replaced by its leave-one-out centroid.
PrototypeSet folded_prototypes(const FoldedBatchEmbedding& batch, std::size_t image,
                               std::size_t cls);

/// Log-probabilities of each query under each prototype, with logits equal to
/// the negative squared L2 distance.
struct Classification {
  std::size_t queries = 0;
  std::size_t classes = 0;
  std::vector<double> log_probs;  // row-major queries x classes

  std::span<const double> row(std::size_t q) const {
    return {log_probs.data() + q * classes, classes};
  }
  /// Column index of the best class; ties go to the lowest index.
  std::size_t argmax(std::size_t q) const;
  /// The k best column indices, best first, ties to the lowest index.
  std::vector<std::size_t> top_k(std::size_t q, std::size_t k) const;
};

Classification classify(std::span<const double> queries, std::size_t dim,
                        const PrototypeSet& prototypes);

/// Indices of the k largest scores, best first; equal scores rank by index.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

// ---------------------------------------------------------------------------
// Differentiable prototype operations

/// Multiply-add count accumulated by the prototype ops on this thread.
std::uint64_t& prototype_work_counter();

/// emb [N,D], labels in [0,K) -> class means [K,D].
diff::Tensor class_means(const diff::Tensor& embeddings, std::span<const int> labels,
                         std::size_t classes);

/// queries [Q,D], centroids [K,D] -> -||q - c||^2, shape [Q,K].
diff::Tensor neg_sq_distances(const diff::Tensor& queries, const diff::Tensor& centroids);

/// Leave-one-out own-class centroid of every row, [N,D]:
/// (p/(p-1)) * (means[label] - emb / p) with p the class size.
diff::Tensor folded_centroids(const diff::Tensor& embeddings, const diff::Tensor& means,
                              std::span<const int> labels);

/// -||a_r - b_r||^2 per row, [N].
diff::Tensor neg_sq_distance_rows(const diff::Tensor& a, const diff::Tensor& b);

/// logits [N,K] with entry (r, labels[r]) replaced by own[r].
diff::Tensor replace_own_class(const diff::Tensor& logits, const diff::Tensor& own,
                               std::span<const int> labels);

/// Batch-folded logits [N,K]: every image is a query against all class
/// means, with its own class mean folded.
diff::Tensor folded_logits(const diff::Tensor& embeddings, std::span<const int> labels,
                           std::size_t classes);

}  // namespace fewloc::protonet
