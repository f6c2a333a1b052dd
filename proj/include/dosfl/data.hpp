#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "dosfl/ops.hpp"

namespace dosfl {

// Standard MNIST normalization constants, applied by load_idx.
inline constexpr double kIdxMean = 0.1307;
inline constexpr double kIdxStd = 0.3081;

// Labeled examples stored as one flat buffer. Immutable after construction;
// safe for concurrent reads.
template <typename T>
struct LabeledDataset {
    Shape example_shape;      // per-example shape, e.g. {1,28,28} or {2}
    std::vector<T> inputs;    // size() * prod(example_shape)
    std::vector<int32_t> labels;
    int64_t n_cls = 0;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t example_numel() const { return shape_numel(example_shape); }

    void validate() const {
        if (static_cast<int64_t>(inputs.size()) != size() * example_numel())
            throw ContractViolation("dataset input buffer does not match label count");
        for (int32_t l : labels)
            if (l < 0 || l >= n_cls)
                throw ContractViolation("label " + std::to_string(l) + " outside [0, " +
                                        std::to_string(n_cls) + ")");
    }

    // Leaf tensor [k, ...example_shape] for the given example indices.
    Tensor<T> batch_inputs(const std::vector<int64_t>& idx) const {
        const int64_t d = example_numel();
        std::vector<T> buf(idx.size() * static_cast<size_t>(d));
        for (size_t i = 0; i < idx.size(); ++i)
            std::copy_n(inputs.begin() + idx[i] * d, d, buf.begin() + static_cast<int64_t>(i) * d);
        Shape s{static_cast<int64_t>(idx.size())};
        s.insert(s.end(), example_shape.begin(), example_shape.end());
        return Tensor<T>::from(std::move(buf), std::move(s));
    }

    // One-hot probability rows [k, n_cls].
    Tensor<T> batch_onehot(const std::vector<int64_t>& idx) const {
        std::vector<T> buf(idx.size() * static_cast<size_t>(n_cls), T(0));
        for (size_t i = 0; i < idx.size(); ++i)
            buf[i * static_cast<size_t>(n_cls) + static_cast<size_t>(labels[idx[i]])] = T(1);
        return Tensor<T>::from(std::move(buf), Shape{static_cast<int64_t>(idx.size()), n_cls});
    }

    LabeledDataset subset(const std::vector<int64_t>& idx) const {
        LabeledDataset out;
        out.example_shape = example_shape;
        out.n_cls = n_cls;
        const int64_t d = example_numel();
        out.inputs.resize(idx.size() * static_cast<size_t>(d));
        out.labels.resize(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(inputs.begin() + idx[i] * d, d,
                        out.inputs.begin() + static_cast<int64_t>(i) * d);
            out.labels[i] = labels[idx[i]];
        }
        return out;
    }

    std::vector<int32_t> classes_present() const {
        std::vector<char> seen(static_cast<size_t>(n_cls), 0);
        for (int32_t l : labels) seen[static_cast<size_t>(l)] = 1;
        std::vector<int32_t> out;
        for (int32_t c = 0; c < n_cls; ++c)
            if (seen[static_cast<size_t>(c)]) out.push_back(c);
        return out;
    }
};

// --- IDX ingestion -------------------------------------------------------------

namespace detail {

inline uint32_t read_u32be(std::istream& in, const std::string& file) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IngestionError("truncated IDX file: " + file);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

inline void write_u32be(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace detail

// Raw 8-bit image corpus, the on-disk form of an IDX pair.
struct RawImages {
    int64_t count = 0, rows = 0, cols = 0;
    std::vector<uint8_t> pixels; // count*rows*cols
    std::vector<uint8_t> labels; // count
};

inline void save_idx(const RawImages& img, const std::string& images_path,
                     const std::string& labels_path) {
    {
        std::ofstream f(images_path, std::ios::binary);
        if (!f) throw IngestionError("cannot open for writing: " + images_path);
        detail::write_u32be(f, 0x00000803u);
        detail::write_u32be(f, static_cast<uint32_t>(img.count));
        detail::write_u32be(f, static_cast<uint32_t>(img.rows));
        detail::write_u32be(f, static_cast<uint32_t>(img.cols));
        f.write(reinterpret_cast<const char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size()));
    }
    {
        std::ofstream f(labels_path, std::ios::binary);
        if (!f) throw IngestionError("cannot open for writing: " + labels_path);
        detail::write_u32be(f, 0x00000801u);
        detail::write_u32be(f, static_cast<uint32_t>(img.count));
        f.write(reinterpret_cast<const char*>(img.labels.data()),
                static_cast<std::streamsize>(img.labels.size()));
    }
}

// Loads an IDX image/label pair. Pixels are scaled to [0,1] and normalized
// with the standard MNIST mean/std; shape comes out as [1, rows, cols].
template <typename T>
LabeledDataset<T> load_idx(const std::string& images_path, const std::string& labels_path,
                           int64_t limit = 0, int64_t n_cls = 10) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw IngestionError("cannot open IDX image file: " + images_path);
    if (detail::read_u32be(fi, images_path) != 0x00000803u)
        throw IngestionError("bad IDX magic in image file: " + images_path);
    const int64_t count = detail::read_u32be(fi, images_path);
    const int64_t rows = detail::read_u32be(fi, images_path);
    const int64_t cols = detail::read_u32be(fi, images_path);

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw IngestionError("cannot open IDX label file: " + labels_path);
    if (detail::read_u32be(fl, labels_path) != 0x00000801u)
        throw IngestionError("bad IDX magic in label file: " + labels_path);
    const int64_t lcount = detail::read_u32be(fl, labels_path);
    if (lcount != count)
        throw IngestionError("IDX count mismatch: " + images_path + " has " +
                             std::to_string(count) + " images, " + labels_path + " has " +
                             std::to_string(lcount) + " labels");

    const int64_t take = (limit > 0 && limit < count) ? limit : count;
    LabeledDataset<T> ds;
    ds.example_shape = {1, rows, cols};
    ds.n_cls = n_cls;
    ds.inputs.resize(static_cast<size_t>(take * rows * cols));
    ds.labels.resize(static_cast<size_t>(take));

    std::vector<uint8_t> buf(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < take; ++i) {
        fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!fi) throw IngestionError("truncated IDX image file: " + images_path);
        for (int64_t p = 0; p < rows * cols; ++p)
            ds.inputs[static_cast<size_t>(i * rows * cols + p)] =
                static_cast<T>((buf[static_cast<size_t>(p)] / 255.0 - kIdxMean) / kIdxStd);
        uint8_t lb;
        fl.read(reinterpret_cast<char*>(&lb), 1);
        if (!fl) throw IngestionError("truncated IDX label file: " + labels_path);
        ds.labels[static_cast<size_t>(i)] = lb;
    }
    ds.validate();
    return ds;
}

// --- synthetic generators --------------------------------------------------------

// Gaussian blob clusters: class c centered at +/-(separation/2) along axis
// c/2, unit variance. Deterministic under seed.
template <typename T>
LabeledDataset<T> make_blobs(int64_t count, int64_t n_cls, int64_t input_dim, double separation,
                             uint64_t seed) {
    if (n_cls < 2) throw ConfigError("make_blobs: n_cls must be >= 2");
    if (count % n_cls != 0) throw ConfigError("make_blobs: count must be divisible by n_cls");
    if (n_cls > 2 * input_dim)
        throw ConfigError("make_blobs: need n_cls <= 2*input_dim for distinct means");
    Rng rng(seed);
    LabeledDataset<T> ds;
    ds.example_shape = {input_dim};
    ds.n_cls = n_cls;
    ds.inputs.resize(static_cast<size_t>(count * input_dim));
    ds.labels.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        const int32_t c = static_cast<int32_t>(i % n_cls);
        ds.labels[static_cast<size_t>(i)] = c;
        for (int64_t dck = 0; dck < input_dim; ++dck) {
            double v = rng.normal();
            if (dck == c / 2) v += (c % 2 == 0 ? 0.5 : -0.5) * separation;
            ds.inputs[static_cast<size_t>(i * input_dim + dck)] = static_cast<T>(v);
        }
    }
    return ds;
}

namespace detail {

// 5x7 digit glyph bitmaps.
inline const std::array<std::array<const char*, 7>, 10>& glyph_font() {
    static const std::array<std::array<const char*, 7>, 10> font = {{
        {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
        {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
        {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
        {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
        {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
        {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
        {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
        {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
        {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
        {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
    }};
    return font;
}

} // namespace detail

// Deterministic 28x28 digit-glyph corpus: upscaled 5x7 digit bitmaps with
// random placement, per-image intensity, and pixel noise. A stand-in for
// MNIST-shaped data when the real corpus is not on disk; exported through
// save_idx so the IDX ingestion path is exercised either way.
inline RawImages make_glyphs(int64_t count, uint64_t seed) {
    const auto& font = detail::glyph_font();
    Rng rng(seed);
    RawImages img;
    img.count = count;
    img.rows = 28;
    img.cols = 28;
    img.pixels.assign(static_cast<size_t>(count) * 28 * 28, 0);
    img.labels.resize(static_cast<size_t>(count));
    std::vector<int64_t> order(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i % 10;
    rng.shuffle(order);
    for (int64_t i = 0; i < count; ++i) {
        const int digit = static_cast<int>(order[static_cast<size_t>(i)]);
        img.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(digit);
        const int ox = static_cast<int>(rng.next_below(13)); // glyph is 15 wide
        const int oy = static_cast<int>(rng.next_below(7));  // and 21 tall
        const double intensity = rng.uniform(0.6, 1.0);
        uint8_t* out = img.pixels.data() + static_cast<size_t>(i) * 28 * 28;
        for (int r = 0; r < 21; ++r)
            for (int c = 0; c < 15; ++c)
                if (font[static_cast<size_t>(digit)][static_cast<size_t>(r / 3)][c / 3] == '1') {
                    double v = intensity + rng.normal() * 0.08;
                    v = std::min(1.0, std::max(0.0, v));
                    out[(oy + r) * 28 + (ox + c)] = static_cast<uint8_t>(v * 255.0 + 0.5);
                }
        // background speckle
        for (int p = 0; p < 28 * 28; ++p) {
            double v = out[p] / 255.0 + rng.normal() * 0.02;
            v = std::min(1.0, std::max(0.0, v));
            out[p] = static_cast<uint8_t>(v * 255.0 + 0.5);
        }
    }
    return img;
}

// --- federated partitioning ------------------------------------------------------

enum class PartitionMode { Iid, Shards };

// Client -> example indices. Index lists are pairwise disjoint and cover the
// partitioned prefix of the dataset.
struct PartitionSpec {
    int64_t clients = 0;
    PartitionMode mode = PartitionMode::Iid;
    int64_t shards_per_client = 0;
    std::vector<std::vector<int64_t>> client_indices;

    int64_t total() const {
        int64_t t = 0;
        for (const auto& v : client_indices) t += static_cast<int64_t>(v.size());
        return t;
    }

    // p_k = |X_k| / sum |X_j|; exact as a ratio of integer sizes.
    std::vector<double> weights() const {
        std::vector<double> w(client_indices.size());
        const double t = static_cast<double>(total());
        for (size_t k = 0; k < client_indices.size(); ++k)
            w[k] = static_cast<double>(client_indices[k].size()) / t;
        return w;
    }
};

inline PartitionSpec partition_iid(int64_t dataset_size, int64_t clients, uint64_t seed) {
    if (clients < 1 || clients > dataset_size)
        throw ConfigError("partition_iid: need 1 <= clients <= dataset size, got N=" +
                          std::to_string(clients) + " for " + std::to_string(dataset_size) +
                          " examples");
    std::vector<int64_t> perm(static_cast<size_t>(dataset_size));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    rng.shuffle(perm);
    PartitionSpec spec;
    spec.clients = clients;
    spec.mode = PartitionMode::Iid;
    spec.client_indices.resize(static_cast<size_t>(clients));
    const int64_t base = dataset_size / clients;
    const int64_t extra = dataset_size % clients;
    int64_t pos = 0;
    for (int64_t k = 0; k < clients; ++k) {
        const int64_t take = base + (k < extra ? 1 : 0);
        spec.client_indices[static_cast<size_t>(k)].assign(perm.begin() + pos,
                                                           perm.begin() + pos + take);
        pos += take;
    }
    return spec;
}

// Largest prefix of `n` usable for an N-client, s-shard partition.
inline int64_t largest_shard_multiple(int64_t n, int64_t clients, int64_t s) {
    const int64_t unit = clients * s;
    return (n / unit) * unit;
}

// Sort by label (ties by original index), cut into N*s equal shards, deal s
// shards per client under a seeded permutation. A client may receive two
// shards of the same class.
inline PartitionSpec partition_shards(const std::vector<int32_t>& labels, int64_t clients,
                                      int64_t s, uint64_t seed) {
    const int64_t n = static_cast<int64_t>(labels.size());
    if (clients < 1 || s < 1) throw ConfigError("partition_shards: need N >= 1 and s >= 1");
    if (n % (clients * s) != 0)
        throw ConfigError("partition_shards: dataset size " + std::to_string(n) +
                          " is not divisible by N*s = " + std::to_string(clients * s) +
                          "; largest usable prefix is " +
                          std::to_string(largest_shard_multiple(n, clients, s)));
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&labels](int64_t a, int64_t b) { return labels[a] < labels[b]; });

    const int64_t num_shards = clients * s;
    const int64_t shard_len = n / num_shards;
    std::vector<int64_t> shard_ids(static_cast<size_t>(num_shards));
    std::iota(shard_ids.begin(), shard_ids.end(), 0);
    Rng rng(seed);
    rng.shuffle(shard_ids);

    PartitionSpec spec;
    spec.clients = clients;
    spec.mode = PartitionMode::Shards;
    spec.shards_per_client = s;
    spec.client_indices.resize(static_cast<size_t>(clients));
    for (int64_t k = 0; k < clients; ++k) {
        auto& idx = spec.client_indices[static_cast<size_t>(k)];
        idx.reserve(static_cast<size_t>(s * shard_len));
        for (int64_t j = 0; j < s; ++j) {
            const int64_t shard = shard_ids[static_cast<size_t>(k * s + j)];
            for (int64_t p = shard * shard_len; p < (shard + 1) * shard_len; ++p)
                idx.push_back(order[static_cast<size_t>(p)]);
        }
    }
    return spec;
}

} // namespace dosfl
