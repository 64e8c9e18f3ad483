#include "fewloc/protonet/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fewloc/diffcore/ops.hpp"

namespace fewloc::protonet {

using diff::Node;
using diff::Tensor;

std::size_t PrototypeSet::row_of(int class_id) const {
  for (std::size_t r = 0; r < class_ids.size(); ++r) {
    if (class_ids[r] == class_id) return r;
  }
  throw MissingClassError(class_id);
}

PrototypeSet mean_prototypes(std::span<const double> vectors, std::size_t dim,
                             std::span<const int> labels, std::span<const int> class_ids) {
  if (dim == 0 || vectors.size() != labels.size() * dim) {
    throw diff::ShapeError("mean_prototypes", "vectors", labels.size() * dim, vectors.size());
  }
  PrototypeSet set;
  set.class_ids.assign(class_ids.begin(), class_ids.end());
  set.dim = dim;
  set.centroids.assign(class_ids.size() * dim, 0.0);
  set.counts.assign(class_ids.size(), 0);
  for (std::size_t r = 0; r < class_ids.size(); ++r) {
    for (std::size_t q = r + 1; q < class_ids.size(); ++q) {
      if (class_ids[r] == class_ids[q]) {
        throw std::invalid_argument("duplicate class id " + std::to_string(class_ids[r]));
      }
    }
  }
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const auto it = std::find(class_ids.begin(), class_ids.end(), labels[v]);
    if (it == class_ids.end()) continue;
    const std::size_t row = static_cast<std::size_t>(it - class_ids.begin());
    for (std::size_t d = 0; d < dim; ++d) set.centroids[row * dim + d] += vectors[v * dim + d];
    set.counts[row] += 1;
  }
  for (std::size_t r = 0; r < class_ids.size(); ++r) {
    if (set.counts[r] == 0) throw MissingClassError(class_ids[r]);
    for (std::size_t d = 0; d < dim; ++d) {
      set.centroids[r * dim + d] /= static_cast<double>(set.counts[r]);
    }
  }
  return set;
}

PrototypeAccumulator::PrototypeAccumulator(std::vector<int> class_ids, std::size_t dim)
    : class_ids_(std::move(class_ids)),
      dim_(dim),
      sums_(class_ids_.size() * dim, 0.0),
      counts_(class_ids_.size(), 0) {}

void PrototypeAccumulator::add(int class_id, std::span<const double> vector) {
  if (vector.size() != dim_) throw diff::ShapeError("PrototypeAccumulator", "dim", dim_, vector.size());
  const auto it = std::find(class_ids_.begin(), class_ids_.end(), class_id);
  if (it == class_ids_.end()) {
    throw std::invalid_argument("class " + std::to_string(class_id) + " is not being accumulated");
  }
  const std::size_t row = static_cast<std::size_t>(it - class_ids_.begin());
  for (std::size_t d = 0; d < dim_; ++d) sums_[row * dim_ + d] += vector[d];
  counts_[row] += 1;
}

PrototypeSet PrototypeAccumulator::finish() const {
  PrototypeSet set;
  set.class_ids = class_ids_;
  set.dim = dim_;
  set.counts = counts_;
  set.centroids = sums_;
  for (std::size_t r = 0; r < class_ids_.size(); ++r) {
    if (counts_[r] == 0) throw MissingClassError(class_ids_[r]);
    for (std::size_t d = 0; d < dim_; ++d) {
      set.centroids[r * dim_ + d] /= static_cast<double>(counts_[r]);
    }
  }
  return set;
}

void FoldedBatchEmbedding::validate() const {
  if (values.size() != classes * per_class * dim) {
    throw diff::ShapeError("FoldedBatchEmbedding", "values", classes * per_class * dim,
                           values.size());
  }
}

namespace {

std::vector<double> batch_means(const FoldedBatchEmbedding& batch) {
  std::vector<double> means(batch.classes * batch.dim, 0.0);
  for (std::size_t j = 0; j < batch.classes; ++j) {
    for (std::size_t i = 0; i < batch.per_class; ++i) {
      const auto v = batch.vector(i, j);
      for (std::size_t d = 0; d < batch.dim; ++d) means[j * batch.dim + d] += v[d];
    }
    for (std::size_t d = 0; d < batch.dim; ++d) {
      means[j * batch.dim + d] /= static_cast<double>(batch.per_class);
    }
  }
  return means;
}

void require_foldable(std::size_t p) {
  if (p < 2) {
    throw FoldDegenerateError("batch folding needs at least two images per class (got " +
                              std::to_string(p) + ")");
  }
}

}  // namespace

std::vector<double> fold_all(const FoldedBatchEmbedding& batch) {
  batch.validate();
  require_foldable(batch.per_class);
  const auto means = batch_means(batch);
  const double p = static_cast<double>(batch.per_class);
  const double ratio = p / (p - 1.0);
  std::vector<double> out(batch.values.size());
  for (std::size_t j = 0; j < batch.classes; ++j) {
    for (std::size_t i = 0; i < batch.per_class; ++i) {
      const std::size_t row = j * batch.per_class + i;
      for (std::size_t d = 0; d < batch.dim; ++d) {
        out[row * batch.dim + d] =
            ratio * (means[j * batch.dim + d] - batch.values[row * batch.dim + d] / p);
      }
    }
  }
  return out;
}

PrototypeSet folded_prototypes(const FoldedBatchEmbedding& batch, std::size_t image,
                               std::size_t cls) {
  batch.validate();
  require_foldable(batch.per_class);
  if (image >= batch.per_class || cls >= batch.classes) {
    throw std::out_of_range("folded_prototypes: query index out of range");
  }
  PrototypeSet set;
  set.dim = batch.dim;
  set.centroids = batch_means(batch);
  set.class_ids.resize(batch.classes);
  std::iota(set.class_ids.begin(), set.class_ids.end(), 0);
  set.counts.assign(batch.classes, batch.per_class);
  const double p = static_cast<double>(batch.per_class);
  const auto v = batch.vector(image, cls);
  for (std::size_t d = 0; d < batch.dim; ++d) {
    double& c = set.centroids[cls * batch.dim + d];
    c = (p / (p - 1.0)) * (c - v[d] / p);
  }
  set.counts[cls] = batch.per_class - 1;
  return set;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

std::size_t Classification::argmax(std::size_t q) const { return top_k(q, 1).front(); }

std::vector<std::size_t> Classification::top_k(std::size_t q, std::size_t k) const {
  return top_k_indices(row(q), k);
}

Classification classify(std::span<const double> queries, std::size_t dim,
                        const PrototypeSet& prototypes) {
  if (dim != prototypes.dim) throw diff::ShapeError("classify", "dim", prototypes.dim, dim);
  if (queries.size() % dim != 0) {
    throw diff::ShapeError("classify: query buffer is not a multiple of the dimension");
  }
  Classification out;
  out.queries = queries.size() / dim;
  out.classes = prototypes.size();
  std::vector<double> logits(out.queries * out.classes);
  for (std::size_t q = 0; q < out.queries; ++q) {
    for (std::size_t k = 0; k < out.classes; ++k) {
      const auto c = prototypes.centroid(k);
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = queries[q * dim + d] - c[d];
        acc += diff * diff;
      }
      logits[q * out.classes + k] = -acc;
    }
  }
  out.log_probs = diff::log_softmax_rows(logits, out.queries, out.classes);
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t& prototype_work_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

namespace {

void check_labels(const std::string& op, std::span<const int> labels, std::size_t rows,
                  std::size_t classes) {
  if (labels.size() != rows) throw diff::ShapeError(op, "labels", rows, labels.size());
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw std::out_of_range(op + ": label " + std::to_string(l) + " outside [0," +
                              std::to_string(classes) + ")");
    }
  }
}

std::vector<std::size_t> label_counts(std::span<const int> labels, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (int l : labels) counts[static_cast<std::size_t>(l)] += 1;
  return counts;
}

}  // namespace

Tensor class_means(const Tensor& embeddings, std::span<const int> labels, std::size_t classes) {
  diff::expect_rank("class_means", embeddings, 2);
  const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1);
  check_labels("class_means", labels, n, classes);
  auto counts = label_counts(labels, classes);
  for (std::size_t k = 0; k < classes; ++k) {
    if (counts[k] == 0) throw MissingClassError(static_cast<int>(k));
  }
  const auto e = embeddings.values();
  std::vector<double> out(classes * dim, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t k = static_cast<std::size_t>(labels[r]);
    for (std::size_t d = 0; d < dim; ++d) out[k * dim + d] += e[r * dim + d];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t d = 0; d < dim; ++d) out[k * dim + d] /= static_cast<double>(counts[k]);
  }
  prototype_work_counter() += n * dim;
  std::vector<int> lab(labels.begin(), labels.end());
  return diff::make_result({classes, dim}, std::move(out), {embeddings},
                           [lab = std::move(lab), counts = std::move(counts), dim](Node& self) {
                             auto& g = self.parents[0]->grad_buffer();
                             for (std::size_t r = 0; r < lab.size(); ++r) {
                               const std::size_t k = static_cast<std::size_t>(lab[r]);
                               const double inv = 1.0 / static_cast<double>(counts[k]);
                               for (std::size_t d = 0; d < dim; ++d) {
                                 g[r * dim + d] += self.grad[k * dim + d] * inv;
                               }
                             }
                           });
}

Tensor neg_sq_distances(const Tensor& queries, const Tensor& centroids) {
  diff::expect_rank("neg_sq_distances queries", queries, 2);
  diff::expect_rank("neg_sq_distances centroids", centroids, 2);
  const std::size_t nq = queries.dim(0), nk = centroids.dim(0), dim = queries.dim(1);
  if (centroids.dim(1) != dim) throw diff::ShapeError("neg_sq_distances", "dim", dim, centroids.dim(1));
  const auto q = queries.values();
  const auto c = centroids.values();
  std::vector<double> out(nq * nk);
  for (std::size_t a = 0; a < nq; ++a) {
    for (std::size_t k = 0; k < nk; ++k) {
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = q[a * dim + d] - c[k * dim + d];
        acc += diff * diff;
      }
      out[a * nk + k] = -acc;
    }
  }
  prototype_work_counter() += nq * nk * dim;
  return diff::make_result({nq, nk}, std::move(out), {queries, centroids},
                           [nq, nk, dim](Node& self) {
                             Node& qn = *self.parents[0];
                             Node& cn = *self.parents[1];
                             double* gq = qn.requires_grad ? qn.grad_buffer().data() : nullptr;
                             double* gc = cn.requires_grad ? cn.grad_buffer().data() : nullptr;
                             for (std::size_t a = 0; a < nq; ++a) {
                               for (std::size_t k = 0; k < nk; ++k) {
                                 const double g = self.grad[a * nk + k];
                                 if (g == 0.0) continue;
                                 for (std::size_t d = 0; d < dim; ++d) {
                                   const double diff =
                                       qn.value[a * dim + d] - cn.value[k * dim + d];
                                   if (gq) gq[a * dim + d] -= 2.0 * g * diff;
                                   if (gc) gc[k * dim + d] += 2.0 * g * diff;
                                 }
                               }
                             }
                           });
}

Tensor folded_centroids(const Tensor& embeddings, const Tensor& means,
                        std::span<const int> labels) {
  diff::expect_rank("folded_centroids embeddings", embeddings, 2);
  diff::expect_rank("folded_centroids means", means, 2);
  const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1), classes = means.dim(0);
  if (means.dim(1) != dim) throw diff::ShapeError("folded_centroids", "dim", dim, means.dim(1));
  check_labels("folded_centroids", labels, n, classes);
  const auto counts = label_counts(labels, classes);
  for (int l : labels) require_foldable(counts[static_cast<std::size_t>(l)]);

  const auto e = embeddings.values();
  const auto m = means.values();
  std::vector<double> out(n * dim);
  std::vector<double> ratio(n), own_scale(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t k = static_cast<std::size_t>(labels[r]);
    const double p = static_cast<double>(counts[k]);
    ratio[r] = p / (p - 1.0);
    own_scale[r] = -1.0 / (p - 1.0);
    for (std::size_t d = 0; d < dim; ++d) {
      out[r * dim + d] = ratio[r] * (m[k * dim + d] - e[r * dim + d] / p);
    }
  }
  prototype_work_counter() += n * dim;
  std::vector<int> lab(labels.begin(), labels.end());
  return diff::make_result(
      {n, dim}, std::move(out), {embeddings, means},
      [lab = std::move(lab), ratio = std::move(ratio), own_scale = std::move(own_scale),
       dim](Node& self) {
        Node& en = *self.parents[0];
        Node& mn = *self.parents[1];
        double* ge = en.requires_grad ? en.grad_buffer().data() : nullptr;
        double* gm = mn.requires_grad ? mn.grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < lab.size(); ++r) {
          const std::size_t k = static_cast<std::size_t>(lab[r]);
          for (std::size_t d = 0; d < dim; ++d) {
            const double g = self.grad[r * dim + d];
            if (ge) ge[r * dim + d] += own_scale[r] * g;
            if (gm) gm[k * dim + d] += ratio[r] * g;
          }
        }
      });
}

Tensor neg_sq_distance_rows(const Tensor& a, const Tensor& b) {
  diff::expect_rank("neg_sq_distance_rows", a, 2);
  if (a.shape() != b.shape()) {
    throw diff::ShapeError("neg_sq_distance_rows: shapes " + diff::to_string(a.shape()) + " and " +
                           diff::to_string(b.shape()) + " differ");
  }
  const std::size_t n = a.dim(0), dim = a.dim(1);
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = a.values()[r * dim + d] - b.values()[r * dim + d];
      acc += diff * diff;
    }
    out[r] = -acc;
  }
  prototype_work_counter() += n * dim;
  return diff::make_result({n}, std::move(out), {a, b}, [n, dim](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    double* ga = an.requires_grad ? an.grad_buffer().data() : nullptr;
    double* gb = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = an.value[r * dim + d] - bn.value[r * dim + d];
        if (ga) ga[r * dim + d] -= 2.0 * self.grad[r] * diff;
        if (gb) gb[r * dim + d] += 2.0 * self.grad[r] * diff;
      }
    }
  });
}

Tensor replace_own_class(const Tensor& logits, const Tensor& own, std::span<const int> labels) {
  diff::expect_rank("replace_own_class logits", logits, 2);
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (own.numel() != n) throw diff::ShapeError("replace_own_class", "own", n, own.numel());
  check_labels("replace_own_class", labels, n, classes);
  std::vector<double> out(logits.values().begin(), logits.values().end());
  for (std::size_t r = 0; r < n; ++r) {
    out[r * classes + static_cast<std::size_t>(labels[r])] = own.values()[r];
  }
  prototype_work_counter() += n;
  std::vector<int> lab(labels.begin(), labels.end());
  return diff::make_result({n, classes}, std::move(out), {logits, own},
                           [lab = std::move(lab), classes](Node& self) {
                             Node& ln = *self.parents[0];
                             Node& on = *self.parents[1];
                             if (ln.requires_grad) {
                               auto& g = ln.grad_buffer();
                               for (std::size_t r = 0; r < lab.size(); ++r) {
                                 for (std::size_t k = 0; k < classes; ++k) {
                                   if (static_cast<int>(k) != lab[r]) {
                                     g[r * classes + k] += self.grad[r * classes + k];
                                   }
                                 }
                               }
                             }
                             if (on.requires_grad) {
                               auto& g = on.grad_buffer();
                               for (std::size_t r = 0; r < lab.size(); ++r) {
                                 g[r] += self.grad[r * classes + static_cast<std::size_t>(lab[r])];
                               }
                             }
                           });
}

Tensor folded_logits(const Tensor& embeddings, std::span<const int> labels, std::size_t classes) {
  const Tensor means = class_means(embeddings, labels, classes);
  const Tensor all = neg_sq_distances(embeddings, means);
  const Tensor own = folded_centroids(embeddings, means, labels);
  const Tensor own_logit = neg_sq_distance_rows(embeddings, own);
  return replace_own_class(all, own_logit, labels);
}

}  // namespace fewloc::protonet
