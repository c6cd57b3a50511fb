#ifndef CAPSKIT_DATA_IO_HPP_
#define CAPSKIT_DATA_IO_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "capskit/tensor.hpp"

namespace capskit {

/* Loader / parsing failure with the offending detail in the message. */
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/* Immutable once loaded; images normalized to [0,1]. */
struct Dataset {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    std::int64_t num_classes = 10;

    std::int64_t n() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t channels() const { return images.dim(1); }
    std::int64_t height() const { return images.dim(2); }
    std::int64_t width() const { return images.dim(3); }

    // copy of sample i as [C,H,W]
    Tensor image(std::int64_t i) const;

    Dataset subset(const std::vector<std::int64_t>& indices) const;
    Dataset take(std::int64_t count) const;
};

/* Big-endian IDX pair (magics 2051/2049), pixels mapped to [0,1].
 * Gzip-compressed files are decompressed transparently. */
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/* CIFAR-10 binary batches: 3073-byte records, label byte + channel-major
 * 3x32x32 pixels. An empty file yields a valid empty dataset. */
Dataset load_cifar10(const std::vector<std::string>& batch_paths);

/* Deterministic k-fold assignment: seeded shuffle, then round robin. */
struct FoldPlan {
    int k = 0;
    std::vector<int> assignments;  // assignments[i] in [0,k)

    std::vector<std::int64_t> fold_indices(int fold) const;
    std::vector<std::int64_t> train_indices(int fold) const;
};

FoldPlan kfold_split(std::int64_t n, int k, std::uint64_t seed);

/* Whole file into memory; transparently inflates when it starts with the
 * gzip magic bytes. Throws FormatError when unreadable. */
std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path);

}  // namespace capskit

#endif  // CAPSKIT_DATA_IO_HPP_
