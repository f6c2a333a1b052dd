#include <doctest.h>

#include "dosfl/cost_model.hpp"

using namespace dosfl;

namespace {

CostModelInput mnist_input() {
    CostModelInput in;
    in.clients = 100;
    in.participation = Rational(1, 10);
    in.model_size = 61706;
    in.distill_steps = 30;
    in.distill_batch = 10;
    in.n_data = 784;
    in.n_cls = 10;
    in.rounds = 1;
    return in;
}

} // namespace

TEST_CASE("rational arithmetic basics") {
    CHECK(Rational::from_decimal("0.1") == Rational(1, 10));
    CHECK(Rational::from_decimal("19.83") == Rational(1983, 100));
    CHECK((Rational(1, 3) + Rational(1, 6)) == Rational(1, 2));
    CHECK((Rational(3, 4) * Rational(2, 3)) == Rational(1, 2));
    CHECK(Rational(19826, 1000).to_decimal(2) == "19.83"); // round half away
    CHECK(Rational(-1, 8).to_decimal(2) == "-0.13");
    CHECK(Rational(7, 1).to_decimal(0) == "7");
    CHECK_THROWS_AS(Rational::from_decimal("1.2.3"), ConfigError);
}

TEST_CASE("tcc_fedavg evaluates Eq. 3 exactly") {
    auto in = mnist_input();
    CHECK(tcc_fedavg(in) == Rational(617060));

    in.clients = 1;
    in.participation = Rational(1);
    CHECK(tcc_fedavg(in) == Rational(61706)); // single exchange is Theta

    // doubling T scales by (2*2T-1)/(2T-1) exactly
    auto base = mnist_input();
    base.rounds = 7;
    auto twice = base;
    twice.rounds = 14;
    CHECK(tcc_fedavg(twice) / tcc_fedavg(base) == Rational(27, 13));
}

TEST_CASE("tcc_dosfl evaluates Eq. 4 exactly") {
    CHECK(tcc_dosfl(mnist_input()) == Rational(23850000));

    CostModelInput unit;
    unit.clients = 1;
    unit.participation = Rational(1);
    unit.model_size = 1;
    unit.distill_steps = 1;
    unit.distill_batch = 1;
    unit.n_data = 784;
    unit.n_cls = 10;
    CHECK(tcc_dosfl(unit) == Rational(795));

    CostModelInput trec;
    trec.clients = 1;
    trec.participation = Rational(1, 10);
    trec.model_size = 404406;
    trec.distill_steps = 2;
    trec.distill_batch = 1;
    trec.n_data = 3000;
    trec.n_cls = 6;
    CHECK(tcc_dosfl(trec) == Rational(6014));

    auto in = mnist_input();
    auto doubled = in;
    doubled.clients *= 2;
    CHECK(tcc_dosfl(doubled) == Rational(2) * tcc_dosfl(in));
    doubled = in;
    doubled.distill_steps *= 3;
    CHECK(tcc_dosfl(doubled) == Rational(3) * tcc_dosfl(in));
    doubled = in;
    doubled.distill_batch *= 5;
    CHECK(tcc_dosfl(doubled) == Rational(5) * tcc_dosfl(in));
}

TEST_CASE("break-even reproduces the published MNIST and Transformer rows") {
    auto in = mnist_input();
    CHECK(break_even(in).to_decimal(2) == "19.83");
    const double be = break_even(in).to_double();
    CHECK(std::abs(be - 19.83) <= 0.01);

    CostModelInput tr;
    tr.clients = 100;
    tr.participation = Rational(1, 10);
    tr.model_size = 13151238;
    tr.distill_steps = 5;
    tr.distill_batch = 1;
    tr.n_data = 20000;
    tr.n_cls = 2;
    CHECK(break_even(tr).to_decimal(2) == "0.54");
}

TEST_CASE("the IMDB and TREC-6 rows match the raw-ratio form, not Eq. 5") {
    CostModelInput imdb;
    imdb.clients = 100;
    imdb.participation = Rational(1, 10);
    imdb.model_size = 120601;
    imdb.distill_steps = 5;
    imdb.distill_batch = 1;
    imdb.n_data = 20000;
    imdb.n_cls = 2;
    CHECK(break_even_raw(imdb).to_decimal(2) == "8.29");
    CHECK(break_even(imdb).to_decimal(2) != "8.29");

    CostModelInput trec;
    trec.clients = 29;
    trec.participation = Rational(1, 10);
    trec.model_size = 404406;
    trec.distill_steps = 2;
    trec.distill_batch = 1;
    trec.n_data = 3000;
    trec.n_cls = 6;
    CHECK(std::abs(break_even_raw(trec).to_double() - 0.149) <= 0.001);
    CHECK(break_even_raw(trec).to_decimal(2) == "0.15"); // table prints truncated 0.14
    CHECK(break_even(trec).to_decimal(2) == "0.57");
}

TEST_CASE("break-even is independent of the client count") {
    auto in = mnist_input();
    const Rational ref = break_even(in);
    for (int64_t n : {1, 7, 100, 12345}) {
        in.clients = n;
        CHECK(break_even(in) == ref);
    }
}

TEST_CASE("break-even fixed point: cost parity at exactly 1.0") {
    CostModelInput in;
    in.clients = 5;
    in.participation = Rational(1);
    in.model_size = 795; // equals S_d*(n_data+n_cls+1)*B_d
    in.distill_steps = 1;
    in.distill_batch = 1;
    in.n_data = 784;
    in.n_cls = 10;
    CHECK(break_even(in) == Rational(1));
}

TEST_CASE("reduction identity holds exactly and ratio=1 gives zero") {
    CHECK(reduction_from_ratio(Rational(1)) == Rational(0));
    for (auto ratio : {Rational(3564, 10), Rational(148, 10), Rational(3), Rational(1, 2)}) {
        const Rational red = reduction_from_ratio(ratio);
        CHECK(red == Rational(1) - Rational(1) / ratio);
        CHECK((red > Rational(0)) == (ratio > Rational(1)));
        CHECK(red < Rational(1));
    }
    // published TREC-6 100-client row: ratio 356.4 recomputes to 99.72%, the
    // table prints 99.71 -- a rounding artifact the tool reports as a delta
    CHECK((reduction_from_ratio(Rational(3564, 10)) * Rational(100)).to_decimal(2) == "99.72");
    // Sent140/TextCNN row: 14.8 -> 93.24% vs printed 93.26%
    CHECK((reduction_from_ratio(Rational(148, 10)) * Rational(100)).to_decimal(2) == "93.24");
}

TEST_CASE("iso ratio uses fedavg over dosfl so reduction > 0 means dosfl is cheaper") {
    CostModelInput in = mnist_input();
    in.rounds = 100;
    const IsoResult iso = iso_ratio_and_reduction(in);
    CHECK(iso.ratio == tcc_fedavg(in) / tcc_dosfl(in));
    CHECK(iso.reduction == Rational(1) - Rational(1) / iso.ratio);
}

TEST_CASE("published break-even table rows label their matching form") {
    int eq5_matches = 0, raw_matches = 0;
    for (const auto& row : break_even_table()) {
        CostModelInput in;
        in.clients = 100;
        in.participation = row.participation;
        in.model_size = row.model_size;
        in.distill_steps = row.distill_steps;
        in.distill_batch = row.distill_batch;
        in.n_data = row.n_data;
        in.n_cls = row.n_cls;
        const double printed = Rational::from_decimal(row.printed).to_double();
        if (std::abs(break_even(in).to_double() - printed) <= 0.01) ++eq5_matches;
        else if (std::abs(break_even_raw(in).to_double() - printed) <= 0.011) ++raw_matches;
    }
    CHECK(eq5_matches == 2);  // mnist, transformer
    CHECK(raw_matches == 3);  // imdb, trec6, sent140/textcnn
}
