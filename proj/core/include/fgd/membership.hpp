#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fgd {

/// Binary feature-to-group assignment, F rows by K columns.
class MembershipMatrix {
public:
    MembershipMatrix() = default;
    MembershipMatrix(std::size_t features, std::size_t clusters);

    /// One group per feature from a label vector; labels must be < clusters.
    static MembershipMatrix from_labels(const std::vector<std::size_t>& labels, std::size_t clusters);
    static MembershipMatrix all_ones(std::size_t features, std::size_t clusters);

    std::size_t features() const noexcept { return features_; }
    std::size_t clusters() const noexcept { return clusters_; }

    bool operator()(std::size_t f, std::size_t k) const { return cells_[f * clusters_ + k] != 0; }
    void set(std::size_t f, std::size_t k, bool on) { cells_[f * clusters_ + k] = on ? 1 : 0; }

    std::vector<std::size_t> members(std::size_t k) const;
    std::size_t group_size(std::size_t k) const;
    std::size_t memberships(std::size_t f) const;

    /// Every feature in exactly one group.
    bool is_hard() const;
    /// Every feature in at least one group and no group empty.
    bool is_valid() const;
    /// Throws std::invalid_argument naming the first violation of is_valid().
    void validate() const;

    /// Lowest-index group of each feature.
    std::vector<std::size_t> labels() const;

    friend bool operator==(const MembershipMatrix&, const MembershipMatrix&) = default;

private:
    std::size_t features_ = 0;
    std::size_t clusters_ = 0;
    std::vector<std::uint8_t> cells_;
};

/// Width of every feature's encoding in a time step. Numerical features have
/// width 1; categorical features are one-hot with width = category count.
struct FeatureSpec {
    std::size_t width = 1;
    bool categorical = false;

    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

using FeatureLayout = std::vector<FeatureSpec>;

inline FeatureLayout numerical_layout(std::size_t features) { return FeatureLayout(features); }

std::size_t encoded_width(const FeatureLayout& layout);

}  // namespace fgd
