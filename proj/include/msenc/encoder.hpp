#pragma once

#include <span>
#include <string>
#include <vector>

#include "msenc/tensor.hpp"

namespace msenc {

// Shared D -> K map with bias, plus one bias-free D -> K map per subject whose
// output is added to the shared one.
template <typename T>
struct EncoderParams {
  Matrix<T> shared_weight;  // D x K
  Vector<T> shared_bias;    // K
  std::vector<Matrix<T>> subject_weight;  // S entries, each D x K

  Index latent_dim() const { return shared_weight.rows(); }
  Index embedding_dim() const { return shared_weight.cols(); }
  Index num_subjects() const { return static_cast<Index>(subject_weight.size()); }

  static EncoderParams zeros(Index latent_dim, Index embedding_dim, Index subjects) {
    EncoderParams p;
    p.shared_weight = Matrix<T>::Zero(latent_dim, embedding_dim);
    p.shared_bias = Vector<T>::Zero(embedding_dim);
    p.subject_weight.assign(static_cast<std::size_t>(subjects), Matrix<T>::Zero(latent_dim, embedding_dim));
    return p;
  }

  void check_subject(SubjectId s) const {
    if (s.is_group()) return;
    require(s.index() < num_subjects(), ErrorKind::SubjectOutOfRange,
            "subject " + std::to_string(s.index()) + " >= S=" + std::to_string(num_subjects()));
  }

  // Adds a zero-initialized subject slot; existing subjects are untouched.
  int append_subject() {
    subject_weight.push_back(Matrix<T>::Zero(latent_dim(), embedding_dim()));
    return static_cast<int>(subject_weight.size()) - 1;
  }
};

template <typename T>
Vector<T> encode(const Vector<T>& latent, SubjectId subject, const EncoderParams<T>& p) {
  require(latent.size() == p.latent_dim(), ErrorKind::ShapeMismatch, "latent length != D");
  p.check_subject(subject);
  Vector<T> out = p.shared_weight.transpose() * latent + p.shared_bias;
  if (!subject.is_group()) out.noalias() += p.subject_weight[static_cast<std::size_t>(subject.index())].transpose() * latent;
  return out;
}

// Row-wise encode of N latents with per-row routing.
template <typename T>
Matrix<T> encode_batch(const Matrix<T>& latent, std::span<const SubjectId> subjects, const EncoderParams<T>& p) {
  require(latent.cols() == p.latent_dim(), ErrorKind::ShapeMismatch, "latent width != D");
  require(static_cast<Index>(subjects.size()) == latent.rows(), ErrorKind::ShapeMismatch,
          "one subject id per latent row is required");
  for (auto s : subjects) p.check_subject(s);
  Matrix<T> out = latent * p.shared_weight;
  out.rowwise() += p.shared_bias.transpose();
  for (Index n = 0; n < latent.rows(); ++n) {
    const SubjectId s = subjects[static_cast<std::size_t>(n)];
    if (!s.is_group()) out.row(n).noalias() += latent.row(n) * p.subject_weight[static_cast<std::size_t>(s.index())];
  }
  return out;
}

template <typename T>
struct EncoderGrad {
  Matrix<T> shared_weight;
  Vector<T> shared_bias;
  std::vector<Matrix<T>> subject_weight;
  Matrix<T> latent;
};

template <typename T>
EncoderGrad<T> encode_backward(const Matrix<T>& dout, const Matrix<T>& latent, std::span<const SubjectId> subjects,
                               const EncoderParams<T>& p) {
  EncoderGrad<T> g;
  g.shared_weight.noalias() = latent.transpose() * dout;
  g.shared_bias = dout.colwise().sum().transpose();
  g.subject_weight.assign(p.subject_weight.size(), Matrix<T>::Zero(p.latent_dim(), p.embedding_dim()));
  g.latent.noalias() = dout * p.shared_weight.transpose();
  for (Index n = 0; n < latent.rows(); ++n) {
    const SubjectId s = subjects[static_cast<std::size_t>(n)];
    if (s.is_group()) continue;
    const auto si = static_cast<std::size_t>(s.index());
    g.subject_weight[si].noalias() += latent.row(n).transpose() * dout.row(n);
    g.latent.row(n).noalias() += dout.row(n) * p.subject_weight[si].transpose();
  }
  return g;
}

}  // namespace msenc
