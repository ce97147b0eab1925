#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace mss {

using Rng = std::mt19937_64;

/// One round of splitmix64; used to spread seeds.
std::uint64_t splitmix64(std::uint64_t x);

/// Seed for the k-th child stream of `master`.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t k);

/// Seed for a named purpose ("times", "noise", ...) of `master`, so that
/// adding a new consumer never perturbs an existing one.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose);

double std_normal(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
Eigen::VectorXd std_normal_vector(Rng& rng, Eigen::Index n);

}  // namespace mss
