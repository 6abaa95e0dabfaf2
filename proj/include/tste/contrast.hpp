#pragma once

#include <deque>
#include <vector>

#include "tste/autograd.hpp"
#include "tste/encoder.hpp"
#include "tste/prototypes.hpp"
#include "tste/tensor.hpp"

namespace tste::contrast {

struct Temperatures {
  float tau_instance = 0.1f;
  float tau_feature = 0.5f;
};

/// FIFO dictionary of key embeddings. Entries are plain tensors and never
/// receive gradients.
class NegativeQueue {
 public:
  explicit NegativeQueue(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ParamError("queue capacity must be >= 1");
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(buf_.size()); }
  bool empty() const { return buf_.empty(); }

  void push_vec(const Tensor& v) {
    if (v.rank() != 1) throw ShapeError("queue push: vector expected");
    if (!buf_.empty() && v.dim(0) != buf_.front().dim(0))
      throw ShapeError("queue push: embedding width mismatch");
    buf_.push_back(v);
    while (static_cast<int>(buf_.size()) > capacity_) buf_.pop_front();
  }

  /// Enqueues each row; evicts oldest entries beyond capacity.
  void push_rows(const Tensor& batch) {
    if (batch.rank() == 1) {
      push_vec(batch);
      return;
    }
    if (batch.rank() != 2) throw ShapeError("queue push: [N,M] batch expected");
    for (int r = 0; r < batch.dim(0); ++r) {
      Tensor row({batch.dim(1)});
      for (int c = 0; c < batch.dim(1); ++c) row[c] = batch.at(r, c);
      push_vec(row);
    }
  }

  /// Contents oldest-to-newest as one [N, M] matrix.
  Tensor snapshot() const {
    if (buf_.empty()) throw UsageError("queue snapshot: queue is empty");
    const int N = size(), M = buf_.front().dim(0);
    Tensor out({N, M});
    for (int i = 0; i < N; ++i)
      for (int m = 0; m < M; ++m) out.at(i, m) = buf_[static_cast<size_t>(i)][m];
    return out;
  }

 private:
  int capacity_;
  std::deque<Tensor> buf_;
};

inline void queue_push(NegativeQueue& q, const Tensor& batch) { q.push_rows(batch); }

namespace detail {

inline Var project_queue(Tape& t, const NegativeQueue& queue, enc::ProjectionHead& fp) {
  return fp.apply_rows(t, t.constant(queue.snapshot()));
}

inline Var instance_logits(Tape& t, Var e, Var e_pos, Var projected_queue, float tau,
                           enc::ProjectionHead& fp) {
  Var pe = fp.apply(t, e);
  Var pk = fp.apply(t, e_pos);
  Var pos = scale(cosine_sim(pe, pk), 1.0f / tau);
  Var negs = scale(cosine_rows(pe, projected_queue), 1.0f / tau);
  return concat(pos, negs);
}

}  // namespace detail

/// InfoNCE over one anchor: positive key against the queued negatives, all
/// similarities taken between projected vectors and scaled by tau.
inline Var instance_loss(Tape& t, Var e, Var e_pos, const NegativeQueue& queue, float tau,
                         enc::ProjectionHead& fp) {
  if (queue.empty()) throw UsageError("instance_loss: negative queue is empty");
  if (tau <= 0.0f) throw ParamError("instance_loss: temperature must be positive");
  Var logits = detail::instance_logits(t, e, e_pos, detail::project_queue(t, queue, fp), tau, fp);
  return cross_entropy_logits(logits, 0);
}

/// Batch mean of instance_loss; the projected queue is shared across anchors,
/// which leaves per-anchor values identical to the one-by-one form.
inline Var instance_loss_batch(Tape& t, const std::vector<Var>& anchors,
                               const std::vector<Var>& keys, const NegativeQueue& queue, float tau,
                               enc::ProjectionHead& fp) {
  if (queue.empty()) throw UsageError("instance_loss: negative queue is empty");
  if (tau <= 0.0f) throw ParamError("instance_loss: temperature must be positive");
  if (anchors.empty() || anchors.size() != keys.size())
    throw UsageError("instance_loss_batch: anchor/key count mismatch");
  Var pq = detail::project_queue(t, queue, fp);
  std::vector<Var> losses;
  losses.reserve(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i)
    losses.push_back(cross_entropy_logits(
        detail::instance_logits(t, anchors[i], keys[i], pq, tau, fp), 0));
  return mean(stack_rows(losses));
}

/// Feature-column contrast on three [B, M] matrices from one minibatch:
/// columns are feature soft labels. The anchor side of every similarity is
/// the strong view's column; the numerator pairs it with the weak view.
inline Var feature_loss(Var m_weak, Var m_strong, Var m_neg, float tau) {
  Tape& t = *m_weak.tape;
  const Tensor& W = t.value(m_weak);
  const Tensor& S = t.value(m_strong);
  const Tensor& N = t.value(m_neg);
  if (tau <= 0.0f) throw ParamError("feature_loss: temperature must be positive");
  if (W.rank() != 2 || !W.same_dims(S) || !W.same_dims(N))
    throw ShapeError("feature_loss: three equal [B,M] matrices required");
  if (W.dim(0) < 2) throw UsageError("feature_loss: minibatch of at least 2 required");
  const float inv_tau = 1.0f / tau;
  Var sim_pos = scale(cosine_cols(m_strong, m_strong), inv_tau);  // [M,M]
  Var sim_neg = scale(cosine_cols(m_strong, m_neg), inv_tau);     // [M,M]
  Var numer = diag(scale(cosine_cols(m_strong, m_weak), inv_tau));
  Var denom = logsumexp_rows(concat_cols(sim_pos, sim_neg));  // [M]
  return sum(sub(denom, numer));
}

/// -mean_k cos(tp_k, e); the range-matching half of the text loss.
inline Var text_alignment(Tape& t, Var e, const proto::PrototypeSet& tp) {
  if (tp.count() < 1) throw ParamError("text_alignment: at least one prototype required");
  return neg(mean(cosine_rows(e, t.constant(tp.vectors))));
}

/// Alignment toward the text prototypes plus feature contrast over prototype
/// coordinates (e . tp), with the k prototype axes as feature columns.
/// Rows of e / e_pos / e_neg are one minibatch's anchor, positive and
/// negative embeddings.
inline Var text_align_loss(Var e, Var e_pos, Var e_neg, const proto::PrototypeSet& tp, float tau) {
  Tape& t = *e.tape;
  if (tp.count() < 1) throw ParamError("text_align_loss: at least one prototype required");
  const Tensor& E = t.value(e);
  if (E.rank() != 2 || !E.same_dims(t.value(e_pos)) || !E.same_dims(t.value(e_neg)))
    throw ShapeError("text_align_loss: three equal [B,M] matrices required");
  if (E.dim(1) != tp.width()) throw ShapeError("text_align_loss: embedding width mismatch");

  Var tpv = t.constant(tp.vectors);                              // [k,M]
  Var align = neg(mean(cosine_cols(transpose(e), transpose(tpv))));  // mean over B x k pairs
  Var coords_anchor = matmul(e, transpose(tpv));                 // [B,k]
  Var coords_pos = matmul(e_pos, transpose(tpv));
  Var coords_neg = matmul(e_neg, transpose(tpv));
  return add(align, feature_loss(coords_pos, coords_anchor, coords_neg, tau));
}

}  // namespace tste::contrast
