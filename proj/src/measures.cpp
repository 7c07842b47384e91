#include "cvil/measures.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include <cblas.h>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "cvil/error.hpp"
#include "cvil/parallel.hpp"

namespace cvil {

// --- probability matrix ------------------------------------------------------

ProbabilityMatrix::ProbabilityMatrix(std::size_t rows, std::size_t cols,
                                     std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_)
    throw Error(errc::kInvalidArgument, "probability buffer does not match rows x cols");
  for (std::size_t i = 0; i < rows_; ++i) {
    double sum = 0.0;
    for (double v : row(i)) {
      if (!std::isfinite(v) || v < 0.0)
        throw Error(errc::kInvalidArgument,
                    "probability row " + std::to_string(i) + " has a negative or non-finite entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw Error(errc::kInvalidArgument,
                  "probability row " + std::to_string(i) + " does not sum to 1");
  }
}

std::string_view to_string(Measure m) {
  switch (m) {
    case Measure::min_margin: return "min_margin";
    case Measure::eccentricity: return "eccentricity";
    case Measure::disagreement: return "disagreement";
  }
  return "?";
}

std::optional<Measure> parse_measure(std::string_view s) {
  if (s == "min_margin") return Measure::min_margin;
  if (s == "eccentricity") return Measure::eccentricity;
  if (s == "disagreement") return Measure::disagreement;
  return std::nullopt;
}

bool needs_model(Measure m) { return m != Measure::eccentricity; }

ClassId argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<ClassId>(best);
}

std::vector<ClassId> predicted_classes(const ProbabilityMatrix& probs) {
  std::vector<ClassId> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = argmax(probs.row(i));
  return out;
}

// --- min margin --------------------------------------------------------------

std::vector<double> min_margin_values(const ProbabilityMatrix& probs) {
  if (probs.cols() < 2) throw Error(errc::kInvalidArgument, "min_margin needs K >= 2");
  std::vector<double> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double first = -1.0, second = -1.0;
    for (double v : probs.row(i)) {
      if (v > first) {
        second = first;
        first = v;
      } else if (v > second) {
        second = v;
      }
    }
    out[i] = std::clamp(1.0 - (first - second), 0.0, 1.0);
  }
  return out;
}

PropertyScores min_margin(const ProbabilityMatrix& probs) {
  return {Measure::min_margin, probs.cols(), min_margin_values(probs), predicted_classes(probs)};
}

// --- eccentricity ------------------------------------------------------------

namespace {

// Sum of squares over a float span, accumulated in double across 8 lanes so
// the reduction vectorizes.
template <typename Term>
double lane_sum(std::size_t d, Term term) {
  constexpr std::size_t kLanes = 8;
  double lanes[kLanes] = {};
  std::size_t j = 0;
  for (; j + kLanes <= d; j += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) {
      const double t = term(j + l);
      lanes[l] += t * t;
    }
  double acc = 0.0;
  for (; j < d; ++j) {
    const double t = term(j);
    acc += t * t;
  }
  for (double v : lanes) acc += v;
  return acc;
}

double median_of(std::vector<float>& values) {
  const std::size_t n = values.size();
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  double med = *mid;
  if (n % 2 == 0) med = 0.5 * (med + static_cast<double>(*std::max_element(values.begin(), mid)));
  return med;
}

double column_median_direct(const float* x, std::size_t n, std::size_t d, std::size_t j) {
  std::vector<float> col(n);
  for (std::size_t i = 0; i < n; ++i) col[i] = x[i * d + j];
  return median_of(col);
}

// Values inside per-column brackets, compacted into one stream per block of
// 16 columns. Each entry keeps its column offset within the block.
class BracketStreams {
 public:
  static constexpr std::size_t kWidth = 16;

  BracketStreams(std::size_t d, std::size_t expected_per_column)
      : d_(d), blocks_((d + kWidth - 1) / kWidth) {
    for (auto& blk : blocks_) {
      blk.values.resize(expected_per_column * kWidth + kWidth);
      blk.offsets.resize(blk.values.size());
    }
  }

  // For rows [row_lo, row_hi) of the row-major n x d matrix x: counts
  // x[i][j] < pivot[p][j] into below[p][j] (row 0 being the lower bracket
  // edge), keeps x[i][j] when lo[j] <= x[i][j] <= hi[j], and adds the
  // shifted first and second moments into s1/s2. Rows [row_hi, prefetch_hi)
  // are prefetched along the way.
  template <std::size_t P>
  void scan_tile(const float* x, std::size_t row_lo, std::size_t row_hi,
                 const std::array<const float*, P>& pivot, const float* hi,
                 const std::array<std::int32_t*, P>& below, const float* shift, double* s1,
                 double* s2, std::size_t prefetch_hi) {
    const float* lo = pivot[0];
    const char* pf = reinterpret_cast<const char*>(x + row_hi * d_);
    const char* const pf_end = reinterpret_cast<const char*>(x + prefetch_hi * d_);
    const std::size_t rows = row_hi - row_lo;
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      Block& blk = blocks_[bi];
      const std::size_t need = blk.size + rows * kWidth + kWidth;
      if (need > blk.values.size()) {
        blk.values.resize(std::max(need, blk.values.size() * 2));
        blk.offsets.resize(blk.values.size());
      }
      const std::size_t j0 = bi * kWidth;
      const std::size_t w = std::min(kWidth, d_ - j0);
#if defined(__AVX512F__)
      if (w == kWidth) {
        const __m512 l = _mm512_loadu_ps(lo + j0);
        const __m512 h = _mm512_loadu_ps(hi + j0);
        const __m512 sh = _mm512_loadu_ps(shift + j0);
        const __m512i one = _mm512_set1_epi32(1);
        const __m128i lane_ids =
            _mm_setr_epi8(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15);
        __m512 pv[P];
        __m512i cnt[P];
        for (std::size_t p = 0; p < P; ++p) {
          pv[p] = _mm512_loadu_ps(pivot[p] + j0);
          cnt[p] = _mm512_loadu_si512(below[p] + j0);
        }
        __m512 a1 = _mm512_setzero_ps();
        __m512 a2 = _mm512_setzero_ps();
        float* vals = blk.values.data();
        std::uint8_t* offs = blk.offsets.data();
        std::size_t size = blk.size;
        const float* src = x + row_lo * d_ + j0;
        for (std::size_t i = 0; i < rows; ++i, src += d_) {
          if (pf < pf_end) {
            _mm_prefetch(pf, _MM_HINT_T1);
            pf += 64;
          }
          const __m512 v = _mm512_loadu_ps(src);
          const __mmask16 in =
              _mm512_cmp_ps_mask(v, l, _CMP_GE_OQ) & _mm512_cmp_ps_mask(v, h, _CMP_LE_OQ);
          for (std::size_t p = 0; p < P; ++p)
            cnt[p] = _mm512_mask_add_epi32(cnt[p], _mm512_cmp_ps_mask(v, pv[p], _CMP_LT_OQ),
                                           cnt[p], one);
          const __m512 t = _mm512_sub_ps(v, sh);
          a1 = _mm512_add_ps(a1, t);
          a2 = _mm512_fmadd_ps(t, t, a2);
          _mm512_storeu_ps(vals + size, _mm512_maskz_compress_ps(in, v));
          _mm_storeu_si128(reinterpret_cast<__m128i*>(offs + size),
                           _mm_maskz_compress_epi8(in, lane_ids));
          size += static_cast<std::size_t>(__builtin_popcount(in));
        }
        blk.size = size;
        for (std::size_t p = 0; p < P; ++p) _mm512_storeu_si512(below[p] + j0, cnt[p]);
        alignas(64) float m1[kWidth], m2[kWidth];
        _mm512_store_ps(m1, a1);
        _mm512_store_ps(m2, a2);
        for (std::size_t t = 0; t < kWidth; ++t) {
          s1[j0 + t] += m1[t];
          s2[j0 + t] += m2[t];
        }
        continue;
      }
#endif
      for (std::size_t i = row_lo; i < row_hi; ++i) {
        const float* r = x + i * d_;
        for (std::size_t t = 0; t < w; ++t) {
          const std::size_t j = j0 + t;
          const float v = r[j];
          for (std::size_t p = 0; p < P; ++p) below[p][j] += v < pivot[p][j];
          const double c = static_cast<double>(v) - shift[j];
          s1[j] += c;
          s2[j] += c * c;
          blk.values[blk.size] = v;
          blk.offsets[blk.size] = static_cast<std::uint8_t>(t);
          blk.size += (v >= lo[j]) & (v <= hi[j]);
        }
      }
    }
  }

  // Calls fn(j, values) with the kept values of every column.
  template <typename Fn>
  void for_each_column(Fn&& fn) const {
    std::vector<float> grouped;
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const Block& blk = blocks_[bi];
      std::array<std::size_t, kWidth + 1> start{};
      for (std::size_t e = 0; e < blk.size; ++e) ++start[blk.offsets[e] + 1u];
      for (std::size_t t = 0; t < kWidth; ++t) start[t + 1] += start[t];
      grouped.resize(blk.size);
      auto cursor = start;
      for (std::size_t e = 0; e < blk.size; ++e) grouped[cursor[blk.offsets[e]]++] = blk.values[e];
      const std::size_t j0 = bi * kWidth;
      for (std::size_t t = 0; t < kWidth && j0 + t < d_; ++t)
        fn(j0 + t, std::span<float>(grouped.data() + start[t], start[t + 1] - start[t]));
    }
  }

 private:
  struct Block {
    std::vector<float> values;
    std::vector<std::uint8_t> offsets;
    std::size_t size = 0;
  };
  std::size_t d_;
  std::vector<Block> blocks_;
};

}  // namespace

ColumnMoments column_moments(std::span<const float> features, std::size_t n, std::size_t d) {
  if (n == 0 || d == 0 || features.size() != n * d)
    throw Error(errc::kInvalidArgument, "column_moments: shape mismatch");
  const float* x = features.data();
  ColumnMoments out{std::vector<double>(d), std::vector<double>(d, 0.0), std::vector<double>(d)};

  // Small inputs: gather each column and select directly.
  constexpr std::size_t kDirectRows = 4096;
  if (n <= kDirectRows) {
    std::vector<double> sum(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) sum[j] += x[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out.mean[j] = sum[j] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double t = x[i * d + j] - out.mean[j];
        out.variance[j] += t * t;
      }
    for (std::size_t j = 0; j < d; ++j) {
      out.variance[j] /= static_cast<double>(n);
      out.median[j] = column_median_direct(x, n, d, j);
    }
    return out;
  }

  // Large inputs. A strided row sample gives each column a value bracket
  // around its middle. A single row-major pass accumulates the moments,
  // counts values below the bracket and compacts the values inside it into
  // one (column, value) stream; the median ranks are then selected from each
  // column's bracketed values. Columns whose ranks escape the bracket fall
  // back to direct selection, so the result is exact either way.
  constexpr std::size_t kSampleRows = 512;
  // Sample ranks (relative to the middle) of the bracket edges and of the
  // inner pivots that split it.
  constexpr std::array<int, 4> kEdges{-32, -16, 0, 16};
  constexpr int kUpper = 32;
  constexpr std::size_t kP = kEdges.size();
  const std::size_t stride = n / kSampleRows;
  std::vector<float> pivots(kP * d), hi(d);
  std::vector<double> shift(d);
  {
    constexpr std::size_t kW = 16;
    std::vector<float> cols(kW * kSampleRows);
    for (std::size_t j0 = 0; j0 < d; j0 += kW) {
      const std::size_t w = std::min(kW, d - j0);
      for (std::size_t t = 0; t < kSampleRows; ++t) {
        const float* r = x + t * stride * d + j0;
        for (std::size_t c = 0; c < w; ++c) cols[c * kSampleRows + t] = r[c];
      }
      for (std::size_t c = 0; c < w; ++c) {
        float* col = cols.data() + c * kSampleRows;
        const std::size_t j = j0 + c;
        shift[j] = static_cast<float>(std::accumulate(col, col + kSampleRows, 0.0) / kSampleRows);
        float* prev = col;
        for (std::size_t p = 0; p < kP; ++p) {
          float* at = col + static_cast<int>(kSampleRows / 2) + kEdges[p];
          std::nth_element(prev, at, col + kSampleRows);
          pivots[p * d + j] = *at;
          prev = at;
        }
        float* at = col + static_cast<int>(kSampleRows / 2) + kUpper;
        std::nth_element(prev, at, col + kSampleRows);
        hi[j] = *at;
      }
    }
  }

  std::vector<std::int32_t> below(kP * d, 0);
  std::array<const float*, kP> pivot_rows;
  std::array<std::int32_t*, kP> below_rows;
  for (std::size_t p = 0; p < kP; ++p) {
    pivot_rows[p] = pivots.data() + p * d;
    below_rows[p] = below.data() + p * d;
  }
  std::vector<double> s1(d, 0.0), s2(d, 0.0);
  std::vector<float> shift_f(shift.begin(), shift.end());
  BracketStreams streams(
      d, n * static_cast<std::size_t>(kUpper - kEdges[0] + 1) / kSampleRows * 5 / 4 + 16);
  // Row tiles sized to stay cache-resident while every column block sweeps them.
  const std::size_t tile_rows = std::max<std::size_t>(16, (512u << 10) / (d * sizeof(float)));
  for (std::size_t r0 = 0; r0 < n; r0 += tile_rows) {
    const std::size_t r1 = std::min(n, r0 + tile_rows);
    streams.scan_tile(x, r0, r1, pivot_rows, hi.data(), below_rows, shift_f.data(), s1.data(),
                      s2.data(), std::min(n, r1 + tile_rows));
  }

  const std::size_t rank_hi = n / 2;
  const std::size_t rank_lo = n % 2 == 0 ? rank_hi - 1 : rank_hi;
  for (std::size_t j = 0; j < d; ++j) {
    const double m1 = s1[j] / static_cast<double>(n);
    out.mean[j] = shift[j] + m1;
    out.variance[j] = std::max(0.0, s2[j] / static_cast<double>(n) - m1 * m1);
  }
  streams.for_each_column([&](std::size_t j, std::span<float> kept) {
    // Boundary p has below[p] values under it; boundary kP stands for the
    // upper bracket edge with every kept value under it.
    auto count_below = [&](std::size_t p) {
      return p < kP ? static_cast<std::size_t>(below[p * d + j])
                    : static_cast<std::size_t>(below[j]) + kept.size();
    };
    std::ptrdiff_t a = -1;
    std::size_t b = kP + 1;
    for (std::size_t p = 0; p <= kP; ++p) {
      if (count_below(p) <= rank_lo) a = static_cast<std::ptrdiff_t>(p);
      if (b > kP && count_below(p) > rank_hi) b = p;
    }
    if (a < 0 || b > kP) {
      out.median[j] = column_median_direct(x, n, d, j);
      return;
    }
    const float from = pivots[static_cast<std::size_t>(a) * d + j];
    const bool open_top = b == kP;
    const float to = open_top ? 0.0f : pivots[b * d + j];
    std::size_t m = 0;
    for (float v : kept) {
      kept[m] = v;
      m += (v >= from) & (open_top | (v < to));
    }
    const std::size_t base = count_below(static_cast<std::size_t>(a));
    auto first = kept.begin();
    auto mid = first + static_cast<std::ptrdiff_t>(rank_hi - base);
    std::nth_element(first, mid, first + static_cast<std::ptrdiff_t>(m));
    double med = *mid;
    if (rank_lo != rank_hi) med = 0.5 * (med + static_cast<double>(*std::max_element(first, mid)));
    out.median[j] = med;
  });
  return out;
}

std::vector<double> eccentricity_values(const EmbeddingDataset& ds,
                                        const EccentricityConfig& config) {
  const std::size_t n = ds.size();
  const std::size_t d = ds.dim();
  if (n < 2) throw Error(errc::kInvalidArgument, "eccentricity needs at least 2 instances");
  const float* x = ds.features().data();
  const ColumnMoments m = column_moments(ds.features(), n, d);

  std::vector<double> scale(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    if (m.variance[j] >= 1e-12) scale[j] = std::pow(m.variance[j], -config.variance_exponent);

  std::vector<double> out(n);
  parallel_for_chunks(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const float* r = x + i * d;
      out[i] = std::sqrt(lane_sum(d, [&](std::size_t j) { return (r[j] - m.median[j]) * scale[j]; }));
    }
  });
  return out;
}

PropertyScores eccentricity(const EmbeddingDataset& ds, const ProbabilityMatrix& probs,
                            const EccentricityConfig& config) {
  if (probs.rows() != ds.size())
    throw Error(errc::kInvalidArgument, "probability rows do not match dataset size");
  return {Measure::eccentricity, probs.cols(), eccentricity_values(ds, config),
          predicted_classes(probs)};
}

// --- Jensen-Shannon ----------------------------------------------------------

namespace {

double entropy2(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h;
}

// Uses the identity JSD = H((p+q)/2) - (H(p) + H(q)) / 2.
double js_from_entropies(std::span<const double> p, std::span<const double> q, double hp,
                         double hq) {
  double hm = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double m = 0.5 * (p[c] + q[c]);
    if (m > 0.0) hm -= m * std::log2(m);
  }
  const double jsd = hm - 0.5 * (hp + hq);
  return std::sqrt(std::clamp(jsd, 0.0, 1.0));
}

void check_distribution(std::span<const double> p, const char* name) {
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0)
      throw Error(errc::kInvalidArgument, std::string(name) + " is not a distribution");
    sum += v;
  }
  if (p.empty() || std::abs(sum - 1.0) > 1e-6)
    throw Error(errc::kInvalidArgument, std::string(name) + " does not sum to 1");
}

}  // namespace

double js_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw Error(errc::kInvalidArgument, "js_distance: length mismatch");
  check_distribution(p, "p");
  check_distribution(q, "q");
  return js_from_entropies(p, q, entropy2(p), entropy2(q));
}

// --- nearest neighbors -------------------------------------------------------

namespace {

double squared_distance(std::span<const float> a, std::span<const float> b) {
  return lane_sum(a.size(), [&](std::size_t j) {
    return static_cast<double>(a[j]) - static_cast<double>(b[j]);
  });
}

struct Ranked {
  double dist;
  std::uint32_t index;
  bool operator<(const Ranked& o) const {
    return dist < o.dist || (dist == o.dist && index < o.index);
  }
};

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k + 1 > n)
    throw Error(errc::kInvalidArgument, "k=" + std::to_string(k) + " out of range [1, " +
                                            std::to_string(n == 0 ? 0 : n - 1) + "]");
}

// Keeps the `cap` smallest candidates as a max-heap on (dist, index). The
// current worst distance is mirrored into `bound` so callers can filter
// candidates without touching the heap.
struct BoundedHeap {
  struct Item {
    float dist;
    std::uint32_t index;
    bool operator<(const Item& o) const {
      return dist < o.dist || (dist == o.dist && index < o.index);
    }
  };
  Item* data;
  std::uint32_t size;
  std::uint32_t cap;

  void push(float dist, std::uint32_t index, float& bound) {
    const Item item{dist, index};
    if (size < cap) {
      data[size++] = item;
      std::push_heap(data, data + size);
      if (size == cap) bound = data[0].dist;
    } else if (item < data[0]) {
      std::pop_heap(data, data + size);
      data[size - 1] = item;
      std::push_heap(data, data + size);
      bound = data[0].dist;
    }
  }
};

NeighborGraph knn_exact(const EmbeddingDataset& ds, std::size_t k) {
  const std::size_t n = ds.size();
  NeighborGraph g{n, k, std::vector<std::uint32_t>(n * k)};
  parallel_for_chunks(0, n, [&](std::size_t lo, std::size_t hi) {
    std::vector<Ranked> ranked(n - 1);
    for (std::size_t i = lo; i < hi; ++i) {
      std::size_t m = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i)
          ranked[m++] = {squared_distance(ds.row(i), ds.row(j)), static_cast<std::uint32_t>(j)};
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k),
                        ranked.end());
      for (std::size_t t = 0; t < k; ++t) g.indices[i * k + t] = ranked[t].index;
    }
  }, 16);
  return g;
}

NeighborGraph knn_gram(const EmbeddingDataset& ds, std::size_t k, const KnnOptions& opt) {
  const std::size_t n = ds.size();
  const std::size_t d = ds.dim();
  const std::size_t cap = std::min(n - 1, k + opt.candidate_slack);
  const std::size_t tile = std::max<std::size_t>(64, opt.tile_rows);
  const float* x = ds.features().data();

  std::vector<float> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    float acc = 0.0f;
    for (std::size_t j = 0; j < d; ++j) acc += x[i * d + j] * x[i * d + j];
    norms[i] = acc;
  }

  std::vector<BoundedHeap::Item> storage(n * cap);
  std::vector<BoundedHeap> heaps(n);
  // Candidates at or above bound[i] can never enter heap i. Ties at the bound
  // are pushed so index order is kept.
  std::vector<float> bound(n, std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    heaps[i] = {storage.data() + i * cap, 0, static_cast<std::uint32_t>(cap)};

  // Only upper-triangular tile pairs are multiplied; each tile feeds both its
  // rows and its columns.
  std::vector<float> gram(tile * tile);
  for (std::size_t i0 = 0; i0 < n; i0 += tile) {
    const std::size_t bi = std::min(tile, n - i0);
    for (std::size_t j0 = i0; j0 < n; j0 += tile) {
      const std::size_t bj = std::min(tile, n - j0);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(bi),
                  static_cast<int>(bj), static_cast<int>(d), 1.0f, x + i0 * d,
                  static_cast<int>(d), x + j0 * d, static_cast<int>(d), 0.0f, gram.data(),
                  static_cast<int>(bj));
      // Turn the Gram tile into squared distances in place.
      parallel_for_chunks(0, bi, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t a = lo; a < hi; ++a) {
          float* gr = gram.data() + a * bj;
          const float ni = norms[i0 + a];
          const float* nj = norms.data() + j0;
          for (std::size_t b = 0; b < bj; ++b) gr[b] = ni + nj[b] - 2.0f * gr[b];
        }
      });
      parallel_for_chunks(0, bi, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t a = lo; a < hi; ++a) {
          const std::size_t i = i0 + a;
          const float* gr = gram.data() + a * bj;
          for (std::size_t b = 0; b < bj; ++b)
            if (gr[b] <= bound[i] && j0 + b != i)
              heaps[i].push(gr[b], static_cast<std::uint32_t>(j0 + b), bound[i]);
        }
      });
      if (j0 == i0) continue;
      parallel_for_chunks(0, bj, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t a = 0; a < bi; ++a) {
          const float* gr = gram.data() + a * bj;
          const float* bnd = bound.data() + j0;
          for (std::size_t b = lo; b < hi; ++b)
            if (gr[b] <= bnd[b])
              heaps[j0 + b].push(gr[b], static_cast<std::uint32_t>(i0 + a), bound[j0 + b]);
        }
      });
    }
  }

  NeighborGraph g{n, k, std::vector<std::uint32_t>(n * k)};
  parallel_for_chunks(0, n, [&](std::size_t lo, std::size_t hi) {
    std::vector<Ranked> ranked(cap);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& heap = heaps[i];
      for (std::size_t t = 0; t < heap.size; ++t)
        ranked[t] = {squared_distance(ds.row(i), ds.row(heap.data[t].index)), heap.data[t].index};
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k),
                        ranked.begin() + heap.size);
      for (std::size_t t = 0; t < k; ++t) g.indices[i * k + t] = ranked[t].index;
    }
  });
  return g;
}

}  // namespace

std::vector<std::size_t> knn(const EmbeddingDataset& ds, std::size_t query,
                             const NeighborhoodConfig& config) {
  const std::size_t n = ds.size();
  check_k(config.k, n);
  if (query >= n) throw Error(errc::kInvalidArgument, "query index out of range");
  std::vector<Ranked> ranked;
  ranked.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j)
    if (j != query)
      ranked.push_back({squared_distance(ds.row(query), ds.row(j)), static_cast<std::uint32_t>(j)});
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(config.k),
                    ranked.end());
  std::vector<std::size_t> out(config.k);
  for (std::size_t t = 0; t < config.k; ++t) out[t] = ranked[t].index;
  return out;
}

NeighborGraph knn_all(const EmbeddingDataset& ds, const NeighborhoodConfig& config,
                      const KnnOptions& options) {
  const std::size_t n = ds.size();
  check_k(config.k, n);
  if (n > std::numeric_limits<std::uint32_t>::max())
    throw Error(errc::kInvalidArgument, "dataset too large for the neighbor table");
  const double work = static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(ds.dim());
  if (work <= options.exact_work_limit) return knn_exact(ds, config.k);
  return knn_gram(ds, config.k, options);
}

// --- disagreement ------------------------------------------------------------

std::vector<double> disagreement_values(const NeighborGraph& graph,
                                        const ProbabilityMatrix& probs) {
  if (probs.rows() != graph.n)
    throw Error(errc::kInvalidArgument, "probability rows do not match neighbor graph");
  const std::size_t n = graph.n;
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = entropy2(probs.row(i));
  std::vector<double> out(n);
  parallel_for_chunks(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double acc = 0.0;
      for (std::uint32_t j : graph.neighbors(i))
        acc += js_from_entropies(probs.row(i), probs.row(j), h[i], h[j]);
      out[i] = graph.k == 0 ? 0.0 : acc / static_cast<double>(graph.k);
    }
  });
  return out;
}

PropertyScores disagreement(const NeighborGraph& graph, const ProbabilityMatrix& probs) {
  return {Measure::disagreement, probs.cols(), disagreement_values(graph, probs),
          predicted_classes(probs)};
}

PropertyScores disagreement(const EmbeddingDataset& ds, const ProbabilityMatrix& probs,
                            const NeighborhoodConfig& config) {
  if (probs.rows() != ds.size())
    throw Error(errc::kInvalidArgument, "probability rows do not match dataset size");
  return disagreement(knn_all(ds, config), probs);
}

// --- partitions --------------------------------------------------------------

ClassPartitions partition_by_class(const PropertyScores& scores,
                                   std::span<const std::uint8_t> eligible) {
  if (scores.predicted_class.size() != scores.values.size())
    throw Error(errc::kInvalidArgument, "scores: values and predicted classes differ in length");
  if (!eligible.empty() && eligible.size() != scores.values.size())
    throw Error(errc::kInvalidArgument, "eligibility mask does not match scores");
  ClassPartitions parts(scores.num_classes);
  for (std::size_t i = 0; i < scores.values.size(); ++i) {
    if (!eligible.empty() && !eligible[i]) continue;
    const ClassId c = scores.predicted_class[i];
    if (c < 0 || static_cast<std::size_t>(c) >= parts.size())
      throw Error(errc::kUnknownClass, "predicted class out of range");
    parts[static_cast<std::size_t>(c)].push_back({i, scores.values[i]});
  }
  for (auto& p : parts)
    std::sort(p.begin(), p.end(), [](const ScoredInstance& a, const ScoredInstance& b) {
      return a.value < b.value || (a.value == b.value && a.index < b.index);
    });
  return parts;
}

}  // namespace cvil
