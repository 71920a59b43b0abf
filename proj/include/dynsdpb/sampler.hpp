// Overlapping mini-batch stream: consecutive batches share a half so the
// previous iteration's outputs can supervise the current one.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "dynsdpb/tensor.hpp"

namespace dynsdpb {

enum class SamplerOrder { sequential, shuffled };

struct OverlapBatch {
  std::size_t t = 0;                    // iteration index within the epoch
  std::vector<std::size_t> carried_ids; // == fresh_ids of batch t-1
  std::vector<std::size_t> fresh_ids;

  std::vector<std::size_t> all_ids() const {
    std::vector<std::size_t> out = carried_ids;
    out.insert(out.end(), fresh_ids.begin(), fresh_ids.end());
    return out;
  }
};

// Splits a permutation of the dataset into n/2-sized halves h_0..h_{K-1} and
// emits batches [h_t | h_{t+1}] for t = 0..K-2. A trailing short chunk is
// dropped; the permutation is rotated by epoch so dropped samples cycle.
inline std::vector<OverlapBatch> make_epoch_stream(std::vector<std::size_t> dataset_ids,
                                                   std::size_t n, SamplerOrder order,
                                                   std::uint64_t seed,
                                                   std::size_t epoch = 0) {
  if (n == 0 || n % 2 != 0)
    throw std::invalid_argument("sampler: batch size must be a positive even number, got " +
                                std::to_string(n));
  if (dataset_ids.size() < n)
    throw std::invalid_argument("sampler: dataset of " +
                                std::to_string(dataset_ids.size()) +
                                " samples is smaller than batch size " + std::to_string(n));
  const std::size_t half = n / 2;
  if (order == SamplerOrder::shuffled) {
    std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ull * (epoch + 1));
    std::shuffle(dataset_ids.begin(), dataset_ids.end(), rng);
  } else {
    // Rotate so samples dropped by the remainder rule reappear next epoch.
    const std::size_t rem = dataset_ids.size() % half;
    if (rem != 0)
      std::rotate(dataset_ids.begin(),
                  dataset_ids.begin() + (epoch * rem) % dataset_ids.size(),
                  dataset_ids.end());
  }
  const std::size_t chunks = dataset_ids.size() / half;
  std::vector<OverlapBatch> stream;
  stream.reserve(chunks - 1);
  for (std::size_t t = 0; t + 1 < chunks; ++t) {
    OverlapBatch b;
    b.t = t;
    b.carried_ids.assign(dataset_ids.begin() + t * half,
                         dataset_ids.begin() + (t + 1) * half);
    b.fresh_ids.assign(dataset_ids.begin() + (t + 1) * half,
                       dataset_ids.begin() + (t + 2) * half);
    stream.push_back(std::move(b));
  }
  return stream;
}

// Plain (non-overlapping) epoch stream for the fine-tuning baselines. Each
// batch is wrapped as all-fresh so the trainer consumes one batch type.
inline std::vector<OverlapBatch> make_plain_stream(std::vector<std::size_t> dataset_ids,
                                                   std::size_t n, SamplerOrder order,
                                                   std::uint64_t seed,
                                                   std::size_t epoch = 0) {
  if (n == 0)
    throw std::invalid_argument("sampler: batch size must be positive");
  if (dataset_ids.size() < n)
    throw std::invalid_argument("sampler: dataset of " +
                                std::to_string(dataset_ids.size()) +
                                " samples is smaller than batch size " + std::to_string(n));
  if (order == SamplerOrder::shuffled) {
    std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ull * (epoch + 1));
    std::shuffle(dataset_ids.begin(), dataset_ids.end(), rng);
  }
  std::vector<OverlapBatch> stream;
  for (std::size_t t = 0; (t + 1) * n <= dataset_ids.size(); ++t) {
    OverlapBatch b;
    b.t = t;
    b.fresh_ids.assign(dataset_ids.begin() + t * n, dataset_ids.begin() + (t + 1) * n);
    stream.push_back(std::move(b));
  }
  return stream;
}

}  // namespace dynsdpb
