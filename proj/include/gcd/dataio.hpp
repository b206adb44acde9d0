#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gcd/common.hpp"

namespace gcd {

enum class Domain { Source, Target };

constexpr int kUnlabeled = -1;

struct Sample {
    Mat patches;  // n_patches x patch_dim
    int label = kUnlabeled;
    Domain domain = Domain::Target;

    bool operator==(const Sample& o) const = default;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t n_patches = 0;
    std::size_t patch_dim = 0;
    std::set<int> known_classes;  // C_kwn
    std::map<std::string, std::string> metadata;

    std::size_t size() const { return samples.size(); }

    // Mean over patches; the flat embedding used everywhere downstream.
    Vec pooled(std::size_t i) const;

    // Throws on any violated invariant (shape, finiteness, label rules).
    void validate() const;

    bool operator==(const Dataset& o) const = default;
};

enum class FileFormat { GCDE, CSV };

// Affine domain transform applied to target-domain patch features:
// x -> scale * R(angle) * x + translation * dir, where R rotates each
// consecutive coordinate pair by `rotation_deg` and dir is a fixed unit
// vector drawn from the generator seed.
struct DomainShift {
    double rotation_deg = 0.0;
    double scale = 1.0;
    double translation = 0.0;
};

struct SyntheticConfig {
    std::size_t n_known = 4;
    std::size_t n_novel = 3;
    std::size_t patch_dim = 16;
    std::size_t n_patches = 16;
    std::size_t samples_per_class = 100;  // per domain
    double class_sep = 8.0;               // mean separation in units of noise_std
    double noise_std = 1.0;
    DomainShift shift;
    std::uint64_t seed = 0;
};

Dataset load_dataset(const std::string& path, FileFormat format);
void save_dataset(const Dataset& ds, const std::string& path, FileFormat format);

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticConfig& cfg);

// Partition of target indices into known-class ("old") and novel ("new").
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_subsets(
    const Dataset& target, const std::set<int>& known);

}  // namespace gcd
