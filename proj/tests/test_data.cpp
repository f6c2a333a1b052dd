#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "dosfl/data.hpp"
#include "dosfl/models.hpp"

using namespace dosfl;

namespace {

void check_partition_invariants(const PartitionSpec& spec, int64_t total_expected) {
    std::set<int64_t> seen;
    int64_t total = 0;
    for (const auto& idx : spec.client_indices) {
        for (int64_t i : idx) {
            CHECK(seen.insert(i).second); // disjoint
            ++total;
        }
    }
    CHECK(total == total_expected); // coverage
    double psum = 0;
    for (double w : spec.weights()) {
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        psum += w;
    }
    CHECK(std::abs(psum - 1.0) <= 1e-12);
}

double label_entropy(const std::vector<int32_t>& labels, int64_t n_cls) {
    std::vector<double> counts(static_cast<size_t>(n_cls), 0.0);
    for (int32_t l : labels) counts[static_cast<size_t>(l)] += 1.0;
    double h = 0;
    for (double c : counts) {
        if (c == 0) continue;
        const double p = c / static_cast<double>(labels.size());
        h -= p * std::log(p);
    }
    return h;
}

} // namespace

TEST_CASE("idx round-trip applies the stated normalization") {
    RawImages img;
    img.count = 10;
    img.rows = 28;
    img.cols = 28;
    img.pixels.assign(10 * 28 * 28, 0);
    for (int i = 0; i < 10; ++i) img.labels.push_back(static_cast<uint8_t>(i % 3));
    save_idx(img, "/tmp/dosfl_t_img.idx", "/tmp/dosfl_t_lbl.idx");
    auto ds = load_idx<double>("/tmp/dosfl_t_img.idx", "/tmp/dosfl_t_lbl.idx", 0, 3);
    CHECK(ds.size() == 10);
    CHECK(ds.example_shape == Shape{1, 28, 28});
    const double expected = (0.0 - kIdxMean) / kIdxStd;
    for (double v : ds.inputs) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
    std::remove("/tmp/dosfl_t_img.idx");
    std::remove("/tmp/dosfl_t_lbl.idx");
}

TEST_CASE("truncated or mislabeled idx files raise ingestion errors naming the file") {
    RawImages img;
    img.count = 4;
    img.rows = 4;
    img.cols = 4;
    img.pixels.assign(4 * 4 * 4, 7);
    img.labels = {0, 1, 0, 1};
    save_idx(img, "/tmp/dosfl_t2_img.idx", "/tmp/dosfl_t2_lbl.idx");

    { // truncate the label file
        std::ofstream f("/tmp/dosfl_t2_lbl.idx", std::ios::binary | std::ios::trunc);
        f.write("\x00\x00\x08\x01\x00\x00\x00\x04\x00", 9); // promises 4, holds 1
    }
    try {
        load_idx<float>("/tmp/dosfl_t2_img.idx", "/tmp/dosfl_t2_lbl.idx", 0, 2);
        FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
        CHECK(std::string(e.what()).find("dosfl_t2_lbl.idx") != std::string::npos);
    }

    { // corrupt the image magic
        std::ofstream f("/tmp/dosfl_t2_img.idx", std::ios::binary | std::ios::in);
        f.write("\xff", 1);
    }
    CHECK_THROWS_AS(load_idx<float>("/tmp/dosfl_t2_img.idx", "/tmp/dosfl_t2_lbl.idx", 0, 2),
                    IngestionError);
    std::remove("/tmp/dosfl_t2_img.idx");
    std::remove("/tmp/dosfl_t2_lbl.idx");
}

TEST_CASE("blobs: separable clusters train a linear model to 0.99") {
    auto ds = make_blobs<double>(200, 2, 2, 6.0, 1);
    CHECK(ds.size() == 200);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    ParamVector<double> p = init_params<double>(arch, InitMethod::XavierNormal, 1);
    ParamVector<double> trained = sgd_train(arch, p, ds, 5, 20, 0.5, 2);
    CHECK(evaluate(arch, trained, ds).accuracy >= 0.99);
}

TEST_CASE("blobs: zero separation is unlearnable") {
    auto ds = make_blobs<double>(100, 2, 2, 0.0, 9);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    ParamVector<double> p = init_params<double>(arch, InitMethod::XavierNormal, 1);
    ParamVector<double> trained = sgd_train(arch, p, ds, 5, 20, 0.5, 2);
    CHECK(evaluate(arch, trained, ds).accuracy <= 0.65); // 0.5 +/- noise on train fit
}

TEST_CASE("blobs are deterministic under seed") {
    auto a = make_blobs<float>(60, 3, 4, 2.0, 123);
    auto b = make_blobs<float>(60, 3, 4, 2.0, 123);
    CHECK(a.inputs == b.inputs);
    CHECK(a.labels == b.labels);
}

TEST_CASE("iid partition: sizes equal up to one, disjoint cover, weights sum to 1") {
    auto spec = partition_iid(10000, 10, 5);
    check_partition_invariants(spec, 10000);
    for (const auto& idx : spec.client_indices) CHECK(idx.size() == 1000);

    auto spec2 = partition_iid(103, 10, 5);
    check_partition_invariants(spec2, 103);
    for (const auto& idx : spec2.client_indices) {
        CHECK(idx.size() >= 10);
        CHECK(idx.size() <= 11);
    }
}

TEST_CASE("iid partition: N=1 is the identity partition") {
    auto spec = partition_iid(50, 1, 3);
    check_partition_invariants(spec, 50);
    CHECK(spec.client_indices[0].size() == 50);
}

TEST_CASE("iid partition of a balanced set keeps per-client class histograms near global") {
    // 100 clients of 600 on a label-balanced corpus: each class frequency
    // should stay within 3 sigma of 1/10 under multinomial sampling
    const int64_t n = 60000, n_cls = 10;
    std::vector<int32_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = static_cast<int32_t>(i % n_cls);
    int violations = 0, cells = 0;
    for (uint64_t seed : {1u, 2u, 3u}) {
        auto spec = partition_iid(n, 100, seed);
        for (const auto& idx : spec.client_indices) {
            std::vector<int64_t> hist(static_cast<size_t>(n_cls), 0);
            for (int64_t i : idx) ++hist[static_cast<size_t>(labels[static_cast<size_t>(i)])];
            const double m = static_cast<double>(idx.size());
            const double p = 1.0 / static_cast<double>(n_cls);
            const double sigma = std::sqrt(m * p * (1 - p));
            for (int64_t h : hist) {
                ++cells;
                if (std::abs(static_cast<double>(h) - m * p) > 3 * sigma) ++violations;
            }
        }
    }
    // 3 sigma covers ~99.7%; allow a small tail
    CHECK(violations <= cells / 100);
}

TEST_CASE("shard partition: balanced 10-class set, N=10, s=2") {
    const int64_t n = 6000;
    std::vector<int32_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        labels[static_cast<size_t>(i)] = static_cast<int32_t>(i * 10 / n); // sorted-balanced
    auto spec = partition_shards(labels, 10, 2, 7);
    check_partition_invariants(spec, n);
    for (const auto& idx : spec.client_indices) {
        CHECK(static_cast<int64_t>(idx.size()) == n / 10);
        std::set<int32_t> present;
        for (int64_t i : idx) present.insert(labels[static_cast<size_t>(i)]);
        // each shard spans at most 2 labels of a balanced sorted set, so a
        // client holds at most 4 distinct labels
        CHECK(present.size() <= 4);
    }
}

TEST_CASE("shard partition rejects non-divisible sizes and names the usable prefix") {
    std::vector<int32_t> labels(1001, 0);
    try {
        partition_shards(labels, 10, 2, 1);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("1000") != std::string::npos);
    }
}

TEST_CASE("smaller shard count gives lower average label entropy") {
    const int64_t n = 6000, n_cls = 10;
    std::vector<int32_t> labels(static_cast<size_t>(n));
    Rng lab_rng(99);
    for (auto& l : labels) l = static_cast<int32_t>(lab_rng.next_below(n_cls));
    auto avg_entropy = [&](int64_t s) {
        double h = 0;
        int count = 0;
        for (uint64_t seed = 0; seed < 5; ++seed) {
            const int64_t usable = largest_shard_multiple(n, 10, s);
            std::vector<int32_t> head(labels.begin(), labels.begin() + usable);
            auto spec = partition_shards(head, 10, s, seed);
            for (const auto& idx : spec.client_indices) {
                std::vector<int32_t> client;
                for (int64_t i : idx) client.push_back(head[static_cast<size_t>(i)]);
                h += label_entropy(client, n_cls);
                ++count;
            }
        }
        return h / count;
    };
    const double h2 = avg_entropy(2), h10 = avg_entropy(10), h30 = avg_entropy(30);
    CHECK(h2 <= h10);
    CHECK(h10 <= h30);
}

TEST_CASE("fully mixed shard limit approaches global label proportions") {
    const int64_t n = 6000, n_cls = 10;
    std::vector<int32_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = static_cast<int32_t>(i % n_cls);
    auto spec = partition_shards(labels, 10, 60, 3); // s = n_cls * 6
    double mean_abs_dev = 0;
    int cells = 0;
    for (const auto& idx : spec.client_indices) {
        std::vector<int64_t> hist(static_cast<size_t>(n_cls), 0);
        for (int64_t i : idx) ++hist[static_cast<size_t>(labels[static_cast<size_t>(i)])];
        for (int64_t h : hist) {
            const double dev =
                std::abs(static_cast<double>(h) / static_cast<double>(idx.size()) - 0.1);
            CHECK(dev <= 0.12); // loose: binomial tail of dealing 60 shards
            mean_abs_dev += dev;
            ++cells;
        }
    }
    CHECK(mean_abs_dev / cells <= 0.04);
}

TEST_CASE("partitions are deterministic under seed") {
    auto a = partition_iid(1000, 7, 42);
    auto b = partition_iid(1000, 7, 42);
    CHECK(a.client_indices == b.client_indices);
    std::vector<int32_t> labels(1000);
    for (int i = 0; i < 1000; ++i) labels[static_cast<size_t>(i)] = i % 10;
    auto c = partition_shards(labels, 10, 2, 42);
    auto d = partition_shards(labels, 10, 2, 42);
    CHECK(c.client_indices == d.client_indices);
}

TEST_CASE("glyph corpus is deterministic, balanced, and learnable") {
    RawImages a = make_glyphs(500, 11);
    RawImages b = make_glyphs(500, 11);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    std::map<int, int> hist;
    for (uint8_t l : a.labels) ++hist[l];
    for (const auto& [cls, count] : hist) CHECK(count == 50);

    save_idx(a, "/tmp/dosfl_glyph_img.idx", "/tmp/dosfl_glyph_lbl.idx");
    auto ds = load_idx<float>("/tmp/dosfl_glyph_img.idx", "/tmp/dosfl_glyph_lbl.idx");
    const auto arch = ArchitectureSpec::mlp(784, {32}, 10);
    ParamVector<float> p = init_params<float>(arch, InitMethod::XavierNormal, 1);
    ParamVector<float> trained = sgd_train(arch, p, ds, 10, 32, 0.1, 2);
    CHECK(evaluate(arch, trained, ds).accuracy >= 0.9);
    std::remove("/tmp/dosfl_glyph_img.idx");
    std::remove("/tmp/dosfl_glyph_lbl.idx");
}
