#include <doctest.h>

#include <map>

#include "dosfl/attack.hpp"
#include "dosfl/cost_model.hpp"
#include "dosfl/federation.hpp"

using namespace dosfl;

namespace {

template <typename T>
bool params_identical(const ParamVector<T>& a, const ParamVector<T>& b) {
    auto fa = a.flatten(), fb = b.flatten();
    if (fa.size() != fb.size()) return false;
    for (size_t i = 0; i < fa.size(); ++i)
        if (fa[i] != fb[i]) return false;
    return true;
}

DistillConfig blob_distill() {
    DistillConfig cfg;
    cfg.distill_steps = 2;
    cfg.distill_epochs = 1;
    cfg.distill_batch = 2;
    cfg.eta0 = 0.05;
    cfg.alpha = 0.05;
    cfg.tau = 40;
    cfg.epochs = 30;
    cfg.batch = 16;
    cfg.soft_labels = true;
    return cfg;
}

FederationConfig blob_federation(int64_t clients, FedMode mode, uint64_t seed) {
    FederationConfig cfg;
    cfg.clients = clients;
    cfg.partition = PartitionMode::Iid;
    cfg.distill = blob_distill();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.workers = 2;
    cfg.trace_every = 2;
    return cfg;
}

template <typename T>
DistilledDataset<T> fake_distilled(const ArchitectureSpec& arch, int64_t steps, int64_t client,
                                   uint64_t seed, T eta = T(0.01)) {
    DistillConfig cfg;
    cfg.distill_steps = steps;
    cfg.distill_batch = 2;
    cfg.eta0 = static_cast<double>(eta);
    auto ds = init_distill_state<T>(cfg, arch, {0, 1}, seed);
    ds.client_id = client;
    return ds;
}

} // namespace

TEST_CASE("merge interleaves client steps round-robin by client id") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    auto a = fake_distilled<double>(arch, 3, 0, 1);
    auto b = fake_distilled<double>(arch, 3, 1, 2);
    auto seq = merge<double>({a, b});
    REQUIRE(seq.size() == 6);
    CHECK(seq[0].x.same_node(a.steps[0].x));
    CHECK(seq[1].x.same_node(b.steps[0].x));
    CHECK(seq[2].x.same_node(a.steps[1].x));
    CHECK(seq[3].x.same_node(b.steps[1].x));
    CHECK(seq[4].x.same_node(a.steps[2].x));
    CHECK(seq[5].x.same_node(b.steps[2].x));
}

TEST_CASE("merge: single client passes through; three clients give length 3*S_d") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    auto a = fake_distilled<double>(arch, 2, 0, 1);
    auto only = merge<double>({a});
    REQUIRE(only.size() == 2);
    CHECK(only[0].x.same_node(a.steps[0].x));
    CHECK(only[1].x.same_node(a.steps[1].x));

    auto b = fake_distilled<double>(arch, 2, 1, 2);
    auto c = fake_distilled<double>(arch, 2, 2, 3);
    auto seq = merge<double>({a, b, c});
    REQUIRE(seq.size() == 6);
    CHECK(seq[2].x.same_node(c.steps[0].x));
    CHECK(seq[3].x.same_node(a.steps[1].x));
}

TEST_CASE("merge is a permutation of the input steps; heterogeneous inputs error") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    auto a = fake_distilled<double>(arch, 4, 0, 1);
    auto b = fake_distilled<double>(arch, 4, 1, 2);
    auto seq = merge<double>({a, b});
    std::map<const void*, int> counts;
    for (const auto& s : seq) ++counts[static_cast<const void*>(s.x.node())];
    CHECK(counts.size() == 8); // no step lost or duplicated
    for (const auto& [node, c] : counts) CHECK(c == 1);

    auto odd = fake_distilled<double>(arch, 3, 7, 3);
    try {
        merge<double>({a, odd});
        FAIL("expected MergeError");
    } catch (const MergeError& e) {
        CHECK(std::string(e.what()).find("client 7") != std::string::npos);
    }
}

TEST_CASE("server_train: all eta=0 leaves theta unchanged; one client equals unroll") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    ParamVector<double> theta = init_params<double>(arch, InitMethod::XavierNormal, 4);
    auto zero = fake_distilled<double>(arch, 3, 0, 9, 0.0);
    auto out = server_train<double>(arch, theta, merge<double>({zero}), 2);
    CHECK(params_identical(theta, out));

    auto live = fake_distilled<double>(arch, 3, 0, 9, 0.05);
    auto via_server = server_train<double>(arch, theta, merge<double>({live}), 2);
    auto via_unroll = unroll(arch, theta, live, 2);
    CHECK(params_identical(via_server, via_unroll));
}

TEST_CASE("server_train fires the hook after every adaptation") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    ParamVector<double> theta = init_params<double>(arch, InitMethod::XavierNormal, 4);
    auto d = fake_distilled<double>(arch, 3, 0, 9, 0.01);
    std::vector<int64_t> steps;
    server_train<double>(arch, theta, merge<double>({d}), 2,
                         [&](int64_t a, const ParamVector<double>&) { steps.push_back(a); });
    REQUIRE(steps.size() == 6);
    CHECK(steps.front() == 1);
    CHECK(steps.back() == 6);
}

TEST_CASE("dosfl on blobs: two IID clients sit within 3 points of pooled distillation") {
    auto train = make_blobs<float>(128, 2, 2, 6.0, 50);
    auto test = make_blobs<float>(400, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);

    auto cfg = blob_federation(2, FedMode::Dosfl, 60);
    auto out = run_dosfl(arch, train, test, cfg);

    // pooled reference: one client holding everything, same seed machinery
    auto cfg1 = blob_federation(1, FedMode::Dosfl, 60);
    auto pooled = run_dosfl(arch, train, test, cfg1);

    CHECK(out.report.final_accuracy >= pooled.report.final_accuracy - 0.03);
    CHECK(out.report.trace.size() >= 1);
    for (const auto& p : out.report.trace) {
        CHECK(p.accuracy >= 0.0);
        CHECK(p.accuracy <= 1.0);
    }
}

TEST_CASE("dosfl upload accounting equals tcc_dosfl exactly") {
    auto train = make_blobs<float>(96, 2, 2, 6.0, 50);
    auto test = make_blobs<float>(100, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    for (auto [clients, steps, bd] : {std::tuple<int64_t, int64_t, int64_t>{1, 2, 2},
                                      {2, 3, 2},
                                      {4, 1, 3}}) {
        auto cfg = blob_federation(clients, FedMode::Dosfl, 61);
        cfg.distill.distill_steps = steps;
        cfg.distill.distill_batch = bd;
        cfg.distill.epochs = 2;
        auto out = run_dosfl(arch, train, test, cfg);
        CostModelInput in;
        in.clients = clients;
        in.participation = Rational(1);
        in.model_size = param_count(arch);
        in.distill_steps = steps;
        in.distill_batch = bd;
        in.n_data = 2;
        in.n_cls = 2;
        const Rational expected = tcc_dosfl(in);
        REQUIRE(expected.is_integer());
        CHECK(out.report.scalars_uploaded == static_cast<uint64_t>(expected.num()));
        CHECK(out.report.scalars_downloaded == 1); // theta0 as a seed
    }
}

TEST_CASE("dosfl report is invariant to worker count (client completion order)") {
    auto train = make_blobs<float>(64, 2, 2, 6.0, 50);
    auto test = make_blobs<float>(100, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    auto cfg = blob_federation(4, FedMode::Dosfl, 62);
    cfg.distill.epochs = 4;
    auto serial = cfg;
    serial.workers = 1;
    auto a = run_dosfl(arch, train, test, cfg);
    auto b = run_dosfl(arch, train, test, serial);
    CHECK(a.report.final_accuracy == b.report.final_accuracy);
    CHECK(params_identical(a.theta_final, b.theta_final));
    REQUIRE(a.report.trace.size() == b.report.trace.size());
    for (size_t i = 0; i < a.report.trace.size(); ++i)
        CHECK(a.report.trace[i].accuracy == b.report.trace[i].accuracy);
}

TEST_CASE("lp-dosfl: N=1 equals dosfl with N=1, and the trace has N points") {
    auto train = make_blobs<float>(64, 2, 2, 6.0, 50);
    auto test = make_blobs<float>(100, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    auto cfg = blob_federation(1, FedMode::LpDosfl, 63);
    auto lp = run_lp_dosfl(arch, train, test, cfg);
    auto plain_cfg = blob_federation(1, FedMode::Dosfl, 63);
    auto plain = run_dosfl(arch, train, test, plain_cfg);
    CHECK(params_identical(lp.theta_final, plain.theta_final));
    CHECK(lp.report.final_accuracy == plain.report.final_accuracy);
    CHECK(lp.report.trace.size() == 1);

    auto cfg4 = blob_federation(4, FedMode::LpDosfl, 64);
    cfg4.distill.epochs = 4;
    auto lp4 = run_lp_dosfl(arch, train, test, cfg4);
    CHECK(lp4.report.trace.size() == 4);
    for (size_t i = 0; i < lp4.report.trace.size(); ++i)
        CHECK(lp4.report.trace[i].step == static_cast<int64_t>(i + 1));
}

TEST_CASE("lp-dosfl with identical client data has a non-decreasing trace within noise") {
    // every client holds the same copy of an easy task
    auto base = make_blobs<float>(32, 2, 2, 6.0, 50);
    LabeledDataset<float> train = base;
    for (int rep = 1; rep < 4; ++rep) {
        train.inputs.insert(train.inputs.end(), base.inputs.begin(), base.inputs.end());
        train.labels.insert(train.labels.end(), base.labels.begin(), base.labels.end());
    }
    auto test = make_blobs<float>(200, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    auto cfg = blob_federation(4, FedMode::LpDosfl, 65);
    cfg.distill.epochs = 10;
    auto lp = run_lp_dosfl(arch, train, test, cfg);
    for (size_t i = 1; i < lp.report.trace.size(); ++i)
        CHECK(lp.report.trace[i].accuracy >= lp.report.trace[i - 1].accuracy - 0.02);
}

TEST_CASE("fedavg: degenerate round leaves weights unchanged and counts N*Theta") {
    auto train = make_blobs<float>(40, 2, 2, 4.0, 50);
    auto test = make_blobs<float>(100, 2, 2, 4.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    FederationConfig cfg;
    cfg.clients = 4;
    cfg.mode = FedMode::FedAvg;
    cfg.seed = 66;
    cfg.fedavg.participation = 1.0;
    cfg.fedavg.rounds = 1;
    cfg.fedavg.local_epochs = 0;
    auto out = run_fedavg(arch, train, test, cfg);
    ParamVector<float> theta0 =
        init_params<float>(arch, cfg.init, Rng::derive(cfg.seed, seed_stream::kInit));
    CHECK(params_identical(out.theta_final, theta0));
    CHECK(out.report.scalars_uploaded ==
          static_cast<uint64_t>(4 * param_count(arch)));
    CHECK(out.report.scalars_downloaded == 0);
}

TEST_CASE("fedavg rejects participation that selects zero clients") {
    FederationConfig cfg;
    cfg.clients = 1;
    cfg.mode = FedMode::FedAvg;
    cfg.fedavg.participation = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("weighted average: identical inputs average to themselves exactly") {
    const auto arch = ArchitectureSpec::mlp(3, {2}, 2);
    ParamVector<float> p = init_params<float>(arch, InitMethod::XavierNormal, 2);
    auto avg = weighted_average<float>({p, p, p}, {10, 10, 10});
    CHECK(params_identical(avg, p));
}

TEST_CASE("weighted average with equal sizes equals the unweighted mean exactly") {
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    ParamVector<double> a = init_params<double>(arch, InitMethod::XavierNormal, 2);
    ParamVector<double> b = init_params<double>(arch, InitMethod::XavierNormal, 3);
    auto weighted = weighted_average<double>({a, b}, {7, 7});
    auto unweighted = weighted_average<double>({a, b}, {1, 1});
    CHECK(params_identical(weighted, unweighted));
}

TEST_CASE("fedavg on IID blobs lands within 3 points of centralized SGD at equal epochs") {
    auto train = make_blobs<float>(200, 2, 2, 6.0, 50);
    auto test = make_blobs<float>(400, 2, 2, 6.0, 51);
    const auto arch = ArchitectureSpec::mlp(2, {}, 2);
    FederationConfig cfg;
    cfg.clients = 10;
    cfg.mode = FedMode::FedAvg;
    cfg.seed = 67;
    cfg.workers = 2;
    cfg.fedavg.participation = 1.0;
    cfg.fedavg.rounds = 20;
    cfg.fedavg.local_epochs = 1;
    cfg.fedavg.batch = 10;
    cfg.fedavg.lr = 0.05;
    auto out = run_fedavg(arch, train, test, cfg);

    ParamVector<float> theta0 =
        init_params<float>(arch, cfg.init, Rng::derive(cfg.seed, seed_stream::kInit));
    auto central = sgd_train(arch, theta0, train, 20, 10, 0.05, 1);
    const double central_acc = evaluate(arch, central, test).accuracy;
    CHECK(out.report.final_accuracy >= central_acc - 0.03);
}
