#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dosfl/errors.hpp"

namespace dosfl {

// Exact rational on 64-bit terms with 128-bit intermediates. Magnitudes in
// the communication formulas stay far below the overflow point once reduced.
class Rational {
public:
    Rational() = default;
    Rational(int64_t value) : num_(value), den_(1) {} // NOLINT: implicit by design
    Rational(int64_t num, int64_t den) : num_(num), den_(den) { normalize(); }

    // Parses integers and decimal strings ("0.1" -> 1/10) exactly.
    static Rational from_decimal(const std::string& s) {
        if (s.empty()) throw ConfigError("empty rational literal");
        bool negative = s[0] == '-';
        size_t pos = (s[0] == '-' || s[0] == '+') ? 1 : 0;
        int64_t num = 0, den = 1;
        bool after_point = false, any_digit = false;
        for (; pos < s.size(); ++pos) {
            const char c = s[pos];
            if (c == '.') {
                if (after_point) throw ConfigError("bad rational literal '" + s + "'");
                after_point = true;
                continue;
            }
            if (c < '0' || c > '9') throw ConfigError("bad rational literal '" + s + "'");
            num = num * 10 + (c - '0');
            if (after_point) den *= 10;
            any_digit = true;
        }
        if (!any_digit) throw ConfigError("bad rational literal '" + s + "'");
        return Rational(negative ? -num : num, den);
    }

    int64_t num() const { return num_; }
    int64_t den() const { return den_; }
    double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }
    bool is_integer() const { return den_ == 1; }

    Rational operator+(const Rational& o) const {
        return make(i128(num_) * o.den_ + i128(o.num_) * den_, i128(den_) * o.den_);
    }
    Rational operator-(const Rational& o) const {
        return make(i128(num_) * o.den_ - i128(o.num_) * den_, i128(den_) * o.den_);
    }
    Rational operator*(const Rational& o) const {
        return make(i128(num_) * o.num_, i128(den_) * o.den_);
    }
    Rational operator/(const Rational& o) const {
        if (o.num_ == 0) throw ContractViolation("rational division by zero");
        return make(i128(num_) * o.den_, i128(den_) * o.num_);
    }
    bool operator==(const Rational& o) const { return num_ == o.num_ && den_ == o.den_; }
    bool operator<(const Rational& o) const { return i128(num_) * o.den_ < i128(o.num_) * den_; }
    bool operator>(const Rational& o) const { return o < *this; }

    // Decimal rendering with round-half-away-from-zero at `places`.
    std::string to_decimal(int places) const {
        i128 scale = 1;
        for (int i = 0; i < places; ++i) scale *= 10;
        i128 scaled = i128(num_ < 0 ? -num_ : num_) * scale;
        i128 q = scaled / den_;
        i128 r = scaled % den_;
        if (2 * r >= den_) ++q;
        std::string digits;
        if (q == 0) digits = "0";
        while (q > 0) {
            digits.insert(digits.begin(), static_cast<char>('0' + static_cast<int>(q % 10)));
            q /= 10;
        }
        while (static_cast<int>(digits.size()) <= places)
            digits.insert(digits.begin(), '0');
        std::string out = (num_ < 0 ? "-" : "") + digits;
        if (places > 0) out.insert(out.size() - static_cast<size_t>(places), ".");
        return out;
    }

    std::string to_fraction() const {
        return std::to_string(num_) + "/" + std::to_string(den_);
    }

private:
    using i128 = __int128;
    int64_t num_ = 0;
    int64_t den_ = 1;

    static Rational make(i128 n, i128 d) {
        if (d < 0) { n = -n; d = -d; }
        i128 a = n < 0 ? -n : n, b = d;
        while (b != 0) { i128 t = a % b; a = b; b = t; }
        if (a != 0) { n /= a; d /= a; }
        if (n > INT64_MAX || n < INT64_MIN || d > INT64_MAX)
            throw ContractViolation("rational overflow");
        Rational r;
        r.num_ = static_cast<int64_t>(n);
        r.den_ = static_cast<int64_t>(d);
        return r;
    }

    void normalize() {
        if (den_ == 0) throw ContractViolation("rational with zero denominator");
        *this = make(num_, den_);
    }
};

// Inputs of the communication-cost formulas.
struct CostModelInput {
    int64_t clients = 0;        // N
    Rational participation = Rational(1, 10); // C
    int64_t model_size = 0;     // Theta
    int64_t distill_steps = 0;  // S_d
    int64_t distill_batch = 0;  // B_d
    int64_t n_data = 0;         // scalars per example
    int64_t n_cls = 0;
    int64_t rounds = 1;         // T (lifetime or iso-accuracy, per use)

    void validate() const {
        if (clients < 1 || model_size < 1 || distill_steps < 1 || distill_batch < 1 ||
            n_data < 1 || n_cls < 1)
            throw ConfigError("cost model inputs must be positive");
        if (!(participation > Rational(0)) || participation > Rational(1))
            throw ConfigError("cost model participation must lie in (0, 1]");
    }
};

// Lifetime FedAvg communication: N * C * Theta * (2T - 1).
inline Rational tcc_fedavg(const CostModelInput& in) {
    in.validate();
    if (in.rounds < 1) throw ConfigError("tcc_fedavg needs rounds >= 1");
    return Rational(in.clients) * in.participation * Rational(in.model_size) *
           Rational(2 * in.rounds - 1);
}

// One-shot distilled upload: N * S_d * (n_data + n_cls + 1) * B_d.
inline Rational tcc_dosfl(const CostModelInput& in) {
    in.validate();
    return Rational(in.clients) * Rational(in.distill_steps) *
           Rational(in.n_data + in.n_cls + 1) * Rational(in.distill_batch);
}

// Rounds at which lifetime FedAvg communication equals the one-shot cost:
// ((S_d (n_data + n_cls + 1) B_d) / (C Theta) + 1) / 2. Independent of N.
inline Rational break_even(const CostModelInput& in) {
    in.validate();
    const Rational raw = Rational(in.distill_steps) * Rational(in.n_data + in.n_cls + 1) *
                         Rational(in.distill_batch) /
                         (in.participation * Rational(in.model_size));
    return (raw + Rational(1)) / Rational(2);
}

// The same quantity without the (x + 1)/2 wrapper. Some published table rows
// match this raw ratio instead of the wrapped form; the reporting tool
// computes both and labels which one a row agrees with.
inline Rational break_even_raw(const CostModelInput& in) {
    in.validate();
    return Rational(in.distill_steps) * Rational(in.n_data + in.n_cls + 1) *
           Rational(in.distill_batch) / (in.participation * Rational(in.model_size));
}

struct IsoResult {
    Rational ratio;     // TCC_fedavg(T_iso) / TCC_dosfl: > 1 when DOSFL is cheaper
    Rational reduction; // 1 - 1/ratio, exactly
};

// Communication ratio at the iso-accuracy round and the percent reduction.
// The identity reduction == 1 - 1/ratio holds exactly in rational arithmetic.
inline IsoResult iso_ratio_and_reduction(const CostModelInput& in) {
    const Rational ratio = tcc_fedavg(in) / tcc_dosfl(in);
    return {ratio, Rational(1) - Rational(1) / ratio};
}

inline Rational reduction_from_ratio(const Rational& ratio) {
    return Rational(1) - Rational(1) / ratio;
}

// --- published-table reproduction -------------------------------------------------

// One row of the break-even table: stated inputs plus the printed value.
struct BreakEvenRow {
    std::string dataset;
    std::string model;
    int64_t n_data;
    int64_t n_cls;
    int64_t distill_steps;
    int64_t distill_batch;
    Rational participation;
    int64_t model_size;
    std::string printed; // value as printed in the source table
};

inline std::vector<BreakEvenRow> break_even_table() {
    return {
        {"mnist", "lenet", 28 * 28, 10, 30, 10, Rational(1, 10), 61706, "19.83"},
        {"imdb", "textcnn", 200 * 100, 2, 5, 1, Rational(1, 10), 120601, "8.29"},
        {"trec6", "bilstm", 30 * 100, 6, 2, 1, Rational(1, 10), 404406, "0.14"},
        {"sent140", "textcnn", 200 * 100, 2, 5, 1, Rational(1, 10), 120601, "8.29"},
        {"sent140", "transformer", 200 * 100, 2, 5, 1, Rational(1, 10), 13151238, "0.54"},
    };
}

// One row of the iso-accuracy comparison table: printed ratio and reduction.
struct IsoRow {
    std::string dataset;
    std::string model;
    int64_t clients;
    std::string printed_ratio;     // empty when the source reports no convergence
    std::string printed_reduction;
};

inline std::vector<IsoRow> iso_table() {
    return {
        {"mnist", "lenet", 100, "0.44", ""},
        {"imdb", "textcnn", 100, "3.0", "66.83"},
        {"trec6", "bilstm", 10, "127.76", "99.22"},
        {"trec6", "bilstm", 100, "356.4", "99.71"},
        {"sent140", "textcnn", 10, "8.3", "87.98"},
        {"sent140", "textcnn", 100, "14.8", "93.26"},
        {"sent140", "transformer", 100, "1012.5", "99.90"},
    };
}

} // namespace dosfl
