#include "fgd/membership.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace fgd {

MembershipMatrix::MembershipMatrix(std::size_t features, std::size_t clusters)
    : features_(features), clusters_(clusters), cells_(features * clusters, 0) {}

MembershipMatrix MembershipMatrix::from_labels(const std::vector<std::size_t>& labels, std::size_t clusters) {
    MembershipMatrix m(labels.size(), clusters);
    for (std::size_t f = 0; f < labels.size(); ++f) {
        if (labels[f] >= clusters) {
            throw std::invalid_argument("membership: label " + std::to_string(labels[f]) + " of feature " +
                                        std::to_string(f) + " exceeds cluster count " + std::to_string(clusters));
        }
        m.set(f, labels[f], true);
    }
    return m;
}

MembershipMatrix MembershipMatrix::all_ones(std::size_t features, std::size_t clusters) {
    MembershipMatrix m(features, clusters);
    std::fill(m.cells_.begin(), m.cells_.end(), std::uint8_t{1});
    return m;
}

std::vector<std::size_t> MembershipMatrix::members(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < features_; ++f)
        if ((*this)(f, k)) out.push_back(f);
    return out;
}

std::size_t MembershipMatrix::group_size(std::size_t k) const {
    std::size_t n = 0;
    for (std::size_t f = 0; f < features_; ++f) n += (*this)(f, k);
    return n;
}

std::size_t MembershipMatrix::memberships(std::size_t f) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < clusters_; ++k) n += (*this)(f, k);
    return n;
}

bool MembershipMatrix::is_hard() const {
    for (std::size_t f = 0; f < features_; ++f)
        if (memberships(f) != 1) return false;
    return true;
}

bool MembershipMatrix::is_valid() const {
    if (features_ == 0 || clusters_ == 0) return false;
    for (std::size_t f = 0; f < features_; ++f)
        if (memberships(f) == 0) return false;
    for (std::size_t k = 0; k < clusters_; ++k)
        if (group_size(k) == 0) return false;
    return true;
}

void MembershipMatrix::validate() const {
    if (features_ == 0 || clusters_ == 0) throw std::invalid_argument("membership: empty matrix");
    for (std::size_t f = 0; f < features_; ++f)
        if (memberships(f) == 0) throw std::invalid_argument("membership: feature " + std::to_string(f) + " has no group");
    for (std::size_t k = 0; k < clusters_; ++k)
        if (group_size(k) == 0) throw std::invalid_argument("membership: group " + std::to_string(k) + " is empty");
}

std::vector<std::size_t> MembershipMatrix::labels() const {
    std::vector<std::size_t> out(features_, 0);
    for (std::size_t f = 0; f < features_; ++f) {
        for (std::size_t k = 0; k < clusters_; ++k) {
            if ((*this)(f, k)) {
                out[f] = k;
                break;
            }
        }
    }
    return out;
}

std::size_t encoded_width(const FeatureLayout& layout) {
    return std::accumulate(layout.begin(), layout.end(), std::size_t{0},
                           [](std::size_t acc, const FeatureSpec& s) { return acc + s.width; });
}

}  // namespace fgd
