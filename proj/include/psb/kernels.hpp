// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <vector>

#include "psb/parallel.hpp"

namespace psb::kernels {

/// C[m,n] += A[m,k] * B[k,n], all row-major and contiguous. Rows go in
/// fixed blocks of 256 so results do not depend on the worker count.
template <class Real>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const Real* a,
              const Real* b, Real* c) {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  constexpr std::size_t block = 256;
  const auto rows = static_cast<Eigen::Index>(n), inner = static_cast<Eigen::Index>(k);
  parallel_for(
      (m + block - 1) / block,
      [&](std::size_t blk) {
        const std::size_t i0 = blk * block;
        const auto r = static_cast<Eigen::Index>(std::min(block, m - i0));
        Eigen::Map<Mat>(c + i0 * n, r, rows).noalias() +=
            Eigen::Map<const Mat>(a + i0 * k, r, inner) * Eigen::Map<const Mat>(b, inner, rows);
      },
      block * n * k);
}

/// C[m,n] += A[m,k] * B[n,k]^T.
template <class Real>
void gemm_acc_bt(std::size_t m, std::size_t n, std::size_t k, const Real* a,
                 const Real* b, Real* c) {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  constexpr std::size_t block = 256;
  const auto cols = static_cast<Eigen::Index>(n), inner = static_cast<Eigen::Index>(k);
  parallel_for(
      (m + block - 1) / block,
      [&](std::size_t blk) {
        const std::size_t i0 = blk * block;
        const auto r = static_cast<Eigen::Index>(std::min(block, m - i0));
        Eigen::Map<Mat>(c + i0 * n, r, cols).noalias() +=
            Eigen::Map<const Mat>(a + i0 * k, r, inner) * Eigen::Map<const Mat>(b, cols, inner).transpose();
      },
      block * n * k);
}

/// C[m,n] += A[k,m]^T * B[k,n]. Blocks of 64 output rows.
template <class Real>
void gemm_acc_at(std::size_t m, std::size_t n, std::size_t k, const Real* a,
                 const Real* b, Real* c) {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Strided = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  constexpr std::size_t block = 64;
  const auto cols = static_cast<Eigen::Index>(n), inner = static_cast<Eigen::Index>(k);
  parallel_for(
      (m + block - 1) / block,
      [&](std::size_t blk) {
        const std::size_t i0 = blk * block;
        const auto r = static_cast<Eigen::Index>(std::min(block, m - i0));
        const Strided at(a + i0, inner, r, Eigen::OuterStride<>(static_cast<Eigen::Index>(m)));
        Eigen::Map<Mat>(c + i0 * n, r, cols).noalias() +=
            at.transpose() * Eigen::Map<const Mat>(b, inner, cols);
      },
      block * n * k);
}

template <class Real>
void transpose(std::size_t rows, std::size_t cols, const Real* src, Real* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

template <class Real>
std::vector<Real> transposed(std::size_t rows, std::size_t cols, const Real* src) {
  std::vector<Real> out(rows * cols);
  transpose(rows, cols, src, out.data());
  return out;
}

template <class Real>
Real dot(std::size_t n, const Real* a, const Real* b) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace psb::kernels
