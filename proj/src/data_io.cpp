#include "capskit/data_io.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "capskit/rng.hpp"

namespace capskit {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 2051;
constexpr std::uint32_t kIdxLabelsMagic = 2049;
constexpr std::int64_t kCifarRecordBytes = 3073;  // 1 label + 3*32*32 pixels

std::uint32_t read_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

std::vector<std::uint8_t> read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    const auto len = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(len);
    if (len > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
    if (!in && len > 0) throw FormatError("failed reading file: " + path);
    return buf;
}

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& compressed,
                                 const std::string& path) {
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) {
        throw FormatError("zlib init failed for " + path);
    }
    zs.next_in = const_cast<Bytef*>(compressed.data());
    zs.avail_in = static_cast<uInt>(compressed.size());
    std::vector<std::uint8_t> out;
    std::uint8_t chunk[1 << 16];
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = chunk;
        zs.avail_out = sizeof(chunk);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("gzip decompression failed for " + path);
        }
        out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

}  // namespace

std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path) {
    std::vector<std::uint8_t> raw = read_raw(path);
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) return gunzip(raw, path);
    return raw;
}

Tensor Dataset::image(std::int64_t i) const {
    const std::int64_t c = channels(), h = height(), w = width();
    const std::int64_t stride = c * h * w;
    Tensor img({c, h, w});
    std::memcpy(img.data.data(), images.data.data() + i * stride,
                static_cast<std::size_t>(stride) * sizeof(double));
    return img;
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices) const {
    const std::int64_t c = channels(), h = height(), w = width();
    const std::int64_t stride = c * h * w;
    Dataset out;
    out.num_classes = num_classes;
    out.images = Tensor({static_cast<std::int64_t>(indices.size()), c, h, w});
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::int64_t i = indices[k];
        std::memcpy(out.images.data.data() + static_cast<std::int64_t>(k) * stride,
                    images.data.data() + i * stride,
                    static_cast<std::size_t>(stride) * sizeof(double));
        out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return out;
}

Dataset Dataset::take(std::int64_t count) const {
    std::vector<std::int64_t> idx;
    const std::int64_t m = std::min(count, n());
    idx.reserve(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) idx.push_back(i);
    return subset(idx);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const std::vector<std::uint8_t> ib = read_file_maybe_gzip(images_path);
    if (ib.size() < 16) {
        throw FormatError("IDX images file truncated: expected at least 16 header bytes, got " +
                          std::to_string(ib.size()) + " (" + images_path + ")");
    }
    const std::uint32_t im = read_be32(ib.data());
    if (im != kIdxImagesMagic) {
        throw FormatError("IDX images magic mismatch: expected 2051, observed " +
                          std::to_string(im) + " (" + images_path + ")");
    }
    const std::int64_t n = read_be32(ib.data() + 4);
    const std::int64_t rows = read_be32(ib.data() + 8);
    const std::int64_t cols = read_be32(ib.data() + 12);
    const std::int64_t expected = 16 + n * rows * cols;
    if (static_cast<std::int64_t>(ib.size()) != expected) {
        throw FormatError("IDX images file truncated: expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(ib.size()) + " (" + images_path + ")");
    }

    const std::vector<std::uint8_t> lb = read_file_maybe_gzip(labels_path);
    if (lb.size() < 8) {
        throw FormatError("IDX labels file truncated: expected at least 8 header bytes, got " +
                          std::to_string(lb.size()) + " (" + labels_path + ")");
    }
    const std::uint32_t lm = read_be32(lb.data());
    if (lm != kIdxLabelsMagic) {
        throw FormatError("IDX labels magic mismatch: expected 2049, observed " +
                          std::to_string(lm) + " (" + labels_path + ")");
    }
    const std::int64_t ln = read_be32(lb.data() + 4);
    if (static_cast<std::int64_t>(lb.size()) != 8 + ln) {
        throw FormatError("IDX labels file truncated: expected " + std::to_string(8 + ln) +
                          " bytes, got " + std::to_string(lb.size()) + " (" + labels_path + ")");
    }
    if (ln != n) {
        throw FormatError("IDX pair mismatch: " + std::to_string(n) + " images vs " +
                          std::to_string(ln) + " labels");
    }

    Dataset ds;
    ds.images = Tensor({n, 1, rows, cols});
    ds.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n * rows * cols; ++i) {
        ds.images.data[static_cast<std::size_t>(i)] = static_cast<double>(ib[16 + i]) / 255.0;
    }
    for (std::int64_t i = 0; i < n; ++i) {
        ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(lb[8 + i]);
    }
    return ds;
}

Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
    std::vector<std::vector<std::uint8_t>> buffers;
    std::int64_t total = 0;
    for (const std::string& path : batch_paths) {
        std::vector<std::uint8_t> b = read_file_maybe_gzip(path);
        if (b.size() % kCifarRecordBytes != 0) {
            throw FormatError("CIFAR-10 batch size " + std::to_string(b.size()) +
                              " is not a multiple of 3073 (" + path + ")");
        }
        total += static_cast<std::int64_t>(b.size()) / kCifarRecordBytes;
        buffers.push_back(std::move(b));
    }
    Dataset ds;
    ds.images = Tensor({total, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(total));
    std::int64_t rec = 0;
    for (const auto& b : buffers) {
        const std::int64_t nrec = static_cast<std::int64_t>(b.size()) / kCifarRecordBytes;
        for (std::int64_t r = 0; r < nrec; ++r, ++rec) {
            const std::uint8_t* p = b.data() + r * kCifarRecordBytes;
            ds.labels[static_cast<std::size_t>(rec)] = static_cast<int>(p[0]);
            double* img = ds.images.data.data() + rec * 3 * 32 * 32;
            for (std::int64_t k = 0; k < 3 * 32 * 32; ++k) {
                img[k] = static_cast<double>(p[1 + k]) / 255.0;
            }
        }
    }
    return ds;
}

std::vector<std::int64_t> FoldPlan::fold_indices(int fold) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        if (assignments[i] == fold) out.push_back(static_cast<std::int64_t>(i));
    }
    return out;
}

std::vector<std::int64_t> FoldPlan::train_indices(int fold) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        if (assignments[i] != fold) out.push_back(static_cast<std::int64_t>(i));
    }
    return out;
}

FoldPlan kfold_split(std::int64_t n, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
    if (n < k) {
        throw std::invalid_argument("kfold_split: k = " + std::to_string(k) +
                                    " exceeds sample count " + std::to_string(n));
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x6b666f6cULL));  // dedicated sub-stream for fold plans
    rng.shuffle(order);
    FoldPlan plan;
    plan.k = k;
    plan.assignments.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t pos = 0; pos < n; ++pos) {
        plan.assignments[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] =
            static_cast<int>(pos % k);
    }
    return plan;
}

}  // namespace capskit
