#include <doctest.h>

#include <cstdio>

#include "dosfl/models.hpp"

using namespace dosfl;

TEST_CASE("parameter counts") {
    CHECK(param_count(ArchitectureSpec::lenet(1, 10)) == 61706);
    CHECK(param_count(ArchitectureSpec::mlp(784, {100}, 10)) == 79510);
    CHECK(param_count(ArchitectureSpec::mlp(10, {}, 2)) == 22);
    CHECK(param_count(ArchitectureSpec::lenet_lite(1, 10)) == 208 + 3216 + 2570);
}

TEST_CASE("init is deterministic and param_count matches the flattened length") {
    const auto arch = ArchitectureSpec::mlp(784, {100}, 10);
    for (InitMethod m : all_init_methods()) {
        ParamVector<float> a = init_params<float>(arch, m, 7);
        ParamVector<float> b = init_params<float>(arch, m, 7);
        auto fa = a.flatten(), fb = b.flatten();
        REQUIRE(static_cast<int64_t>(fa.size()) == param_count(arch));
        bool identical = true;
        for (size_t i = 0; i < fa.size(); ++i) identical = identical && fa[i] == fb[i];
        CHECK(identical);

        ParamVector<float> c = init_params<float>(arch, m, 8);
        auto fc = c.flatten();
        int sign_flips = 0;
        for (size_t i = 0; i < fa.size(); ++i)
            if ((fa[i] > 0) != (fc[i] > 0)) ++sign_flips;
        CHECK(sign_flips > 0); // different seeds differ
    }
}

TEST_CASE("xavier-normal weight variance is within 10% of 2/(fan_in+fan_out)") {
    const auto arch = ArchitectureSpec::mlp(100, {}, 50); // one 100x50 layer
    ParamVector<double> p = init_params<double>(arch, InitMethod::XavierNormal, 3);
    const auto w = p.values[0].data();
    double mean = 0;
    for (double v : w) mean += v;
    mean /= static_cast<double>(w.size());
    double var = 0;
    for (double v : w) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.size());
    const double expected = 2.0 / 150.0;
    CHECK(var == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("orthogonal init gives W^T W = I to 1e-4") {
    const auto arch = ArchitectureSpec::mlp(64, {}, 64);
    ParamVector<double> p = init_params<double>(arch, InitMethod::Orthogonal, 11);
    const auto w = p.values[0].data(); // [64,64]
    double max_abs_dev = 0;
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
            double dot = 0;
            for (int k = 0; k < 64; ++k) dot += w[static_cast<size_t>(k * 64 + i)] *
                                                 w[static_cast<size_t>(k * 64 + j)];
            max_abs_dev = std::max(max_abs_dev, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    CHECK(max_abs_dev <= 1e-4);
}

TEST_CASE("biases are zero except under default-uniform") {
    const auto arch = ArchitectureSpec::mlp(8, {4}, 2);
    for (InitMethod m : all_init_methods()) {
        ParamVector<double> p = init_params<double>(arch, m, 5);
        bool all_zero = true;
        for (double v : p.values[1].data()) all_zero = all_zero && v == 0.0;
        if (m == InitMethod::DefaultUniform) {
            CHECK_FALSE(all_zero);
            const double bound = 1.0 / std::sqrt(8.0);
            for (double v : p.values[1].data()) CHECK(std::abs(v) <= bound);
        } else {
            CHECK(all_zero);
        }
    }
}

TEST_CASE("unknown init method string is a configuration error") {
    CHECK_THROWS_AS(init_method_from_string("glorot"), ConfigError);
}

TEST_CASE("evaluate: uniform logits fall back to class 0 by tie-break") {
    const auto arch = ArchitectureSpec::mlp(4, {}, 10);
    ParamVector<double> p = init_params<double>(arch, InitMethod::XavierNormal, 1);
    for (auto& v : p.values) v = Tensor<double>::zeros(v.shape()); // all logits equal
    LabeledDataset<double> ds;
    ds.example_shape = {4};
    ds.n_cls = 10;
    for (int i = 0; i < 50; ++i) {
        for (int j = 0; j < 4; ++j) ds.inputs.push_back(0.1 * i + j);
        ds.labels.push_back(i % 10); // balanced
    }
    EvalResult r = evaluate(arch, p, ds);
    CHECK(r.accuracy == doctest::Approx(0.1)); // frequency of class 0
}

TEST_CASE("evaluate: single correctly-classified example gives accuracy 1") {
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    ParamVector<double> p;
    p.arch_id = arch.id();
    p.values.push_back(Tensor<double>::from({1.0, 0.0, 0.0, 1.0}, {2, 2}));
    p.values.push_back(Tensor<double>::zeros({2}));
    LabeledDataset<double> ds;
    ds.example_shape = {2};
    ds.n_cls = 2;
    ds.inputs = {0.0, 3.0};
    ds.labels = {1};
    CHECK(evaluate(arch, p, ds).accuracy == 1.0);
    CHECK(evaluate(arch, p, ds).accuracy == evaluate(arch, p, ds).accuracy); // pure
}

TEST_CASE("evaluate rejects shape mismatches") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    ParamVector<double> p = init_params<double>(arch, InitMethod::XavierNormal, 1);
    LabeledDataset<double> ds;
    ds.example_shape = {4};
    ds.n_cls = 2;
    ds.inputs = {0, 0, 0, 0};
    ds.labels = {0};
    CHECK_THROWS_AS(evaluate(arch, p, ds), ContractViolation);
}

TEST_CASE("parameter serialization round-trips") {
    const auto arch = ArchitectureSpec::lenet_lite(1, 10);
    ParamVector<float> p = init_params<float>(arch, InitMethod::KaimingUniform, 42);
    const std::string path = "/tmp/dosfl_test_params.bin";
    save_params(p, path);
    ParamVector<float> q = load_params<float>(arch, path);
    auto fp = p.flatten(), fq = q.flatten();
    REQUIRE(fp.size() == fq.size());
    bool identical = true;
    for (size_t i = 0; i < fp.size(); ++i) identical = identical && fp[i] == fq[i];
    CHECK(identical);
    CHECK_THROWS_AS(load_params<double>(arch, path), IngestionError); // precision mismatch
    std::remove(path.c_str());
}

TEST_CASE("forward shapes are consistent across architectures") {
    Rng rng(3);
    for (auto arch : {ArchitectureSpec::lenet_lite(1, 10), ArchitectureSpec::lenet(1, 10)}) {
        ParamVector<float> p = init_params<float>(arch, InitMethod::XavierNormal, 2);
        Tensor<float> x = Tensor<float>::randn({3, 1, 28, 28}, rng);
        Tensor<float> logits = forward(arch, p.values, x);
        CHECK(logits.shape() == Shape{3, 10});
    }
}
