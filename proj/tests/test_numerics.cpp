#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "trgcn/gradcheck.hpp"
#include "trgcn/tensor.hpp"

using namespace trgcn;

namespace {

// Independent finite-difference oracle, used to freeze expected gradients.
// Central differences on a pure forward evaluation of `f`.
std::vector<double> fd_gradient(const std::function<double()>& f, Tensor& param,
                                double h = 1e-5) {
    auto vals = param.mutable_values();
    std::vector<double> g(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = f();
        vals[i] = orig - h;
        const double fm = f();
        vals[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("matmul forward examples") {
    Tensor id = Tensor::identity(2);
    Tensor v = Tensor::from_rows({{3.0}, {4.0}});
    Tensor r = matmul(id, v);
    CHECK(r.at(0, 0) == 3.0);
    CHECK(r.at(1, 0) == 4.0);

    Tensor a = Tensor::from_rows({{1.0, 2.0}});
    Tensor b = Tensor::from_rows({{3.0}, {4.0}});
    Tensor dot = matmul(a, b);
    CHECK(dot.rows() == 1);
    CHECK(dot.cols() == 1);
    CHECK(dot.at(0, 0) == 11.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a(2, 3), b(2, 2);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("2x2") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches hand value and finite differences") {
    Tensor a = Tensor::from_rows({{1.0, 2.0}});
    Tensor b = Tensor::from_rows({{3.0}, {4.0}});
    a.set_requires_grad();

    {
        Tape tape;
        Tensor loss = sum(matmul(a, b));
        tape.backward(loss);
    }
    // dL/da = b^T = [[3, 4]], frozen from the oracle below.
    CHECK(a.grad_at(0, 0) == Catch::Approx(3.0).margin(1e-12));
    CHECK(a.grad_at(0, 1) == Catch::Approx(4.0).margin(1e-12));

    auto fd = fd_gradient([&] { return sum(matmul(a, b)).at(0, 0); }, a);
    CHECK(fd[0] == Catch::Approx(3.0).margin(1e-4));
    CHECK(fd[1] == Catch::Approx(4.0).margin(1e-4));
}

TEST_CASE("elementwise ops") {
    Tensor x = Tensor::from_rows({{-1.0, 2.0}});
    Tensor r = relu(x);
    CHECK(r.at(0, 0) == 0.0);
    CHECK(r.at(0, 1) == 2.0);

    Tensor s = add(Tensor::from_rows({{1.0, 1.0}}), Tensor::from_rows({{2.0, 3.0}}));
    CHECK(s.at(0, 0) == 3.0);
    CHECK(s.at(0, 1) == 4.0);

    CHECK_THROWS_AS(add(Tensor(1, 2), Tensor(2, 1)), ShapeError);

    Tensor m = mul(Tensor::from_rows({{2.0, 3.0}}), Tensor::from_rows({{4.0, 5.0}}));
    CHECK(m.at(0, 0) == 8.0);
    CHECK(m.at(0, 1) == 15.0);

    Tensor sc = scale(x, -2.0);
    CHECK(sc.at(0, 0) == 2.0);
    CHECK(sc.at(0, 1) == -4.0);
}

TEST_CASE("relu is nonnegative and idempotent") {
    CounterRng rng(99, Stream::tokens);
    Tensor x(5, 7);
    for (std::size_t i = 0; i < x.size(); ++i) x.mutable_values()[i] = rng.uniform(-3.0, 3.0);
    Tensor once = relu(x);
    Tensor twice = relu(once);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(once.values()[i] >= 0.0);
        CHECK(once.values()[i] == twice.values()[i]);
    }
}

TEST_CASE("dropout") {
    Tensor x = Tensor::from_rows({{1.0, -2.0, 3.0, 0.5}});
    CounterRng rng(1, Stream::dropout, 0, 0, 0);

    SECTION("p=0 is the identity") {
        Tensor y = dropout(x, 0.0, rng, true);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
    }
    SECTION("eval mode is the identity") {
        Tensor y = dropout(x, 0.7, rng, false);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
    }
    SECTION("rejects p outside [0,1)") {
        CHECK_THROWS_AS(dropout(x, 1.0, rng, true), std::invalid_argument);
        CHECK_THROWS_AS(dropout(x, -0.1, rng, true), std::invalid_argument);
    }
    SECTION("training mode zeroes or rescales each entry") {
        Tensor y = dropout(x, 0.5, rng, true);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = y.values()[i];
            CHECK((v == 0.0 || v == Catch::Approx(2.0 * x.values()[i])));
        }
    }
    SECTION("same stream gives bit-identical masks") {
        Tensor a = dropout(x, 0.5, CounterRng(42, Stream::dropout, 3, 1, 7), true);
        Tensor b = dropout(x, 0.5, CounterRng(42, Stream::dropout, 3, 1, 7), true);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(a.values()[i] == b.values()[i]);
    }
}

TEST_CASE("softmax_rows examples") {
    Tensor uniform = softmax_rows(Tensor::from_rows({{0.0, 0.0, 0.0, 0.0}}));
    for (std::size_t j = 0; j < 4; ++j) CHECK(uniform.at(0, j) == Catch::Approx(0.25));

    Tensor big = softmax_rows(Tensor::from_rows({{1000.0, 1000.0}}));
    CHECK(big.at(0, 0) == Catch::Approx(0.5));
    CHECK(big.at(0, 1) == Catch::Approx(0.5));

    // e^0.7071 / (e^0.7071 + 1) = 0.6698 to 4 decimals (direct evaluation).
    Tensor t = softmax_rows(Tensor::from_rows({{0.7071, 0.0}}));
    CHECK(t.at(0, 0) == Catch::Approx(0.6698).margin(5e-5));
    CHECK(t.at(0, 1) == Catch::Approx(0.3302).margin(5e-5));
}

TEST_CASE("softmax_rows respects masks") {
    Tensor x = Tensor::from_rows({{5.0, 1.0, 2.0}});
    Mask mask(1, 3);
    mask.set(0, 0, false);
    Tensor y = softmax_rows(x, &mask);
    CHECK(y.at(0, 0) == 0.0);
    const double s = y.at(0, 1) + y.at(0, 2);
    CHECK(s == Catch::Approx(1.0).epsilon(1e-9));

    Mask all_off(1, 3, false);
    CHECK_THROWS_AS(softmax_rows(x, &all_off), std::runtime_error);
}

TEST_CASE("softmax rows sum to one over valid positions for random inputs") {
    CounterRng rng(7, Stream::tokens);
    for (int iter = 0; iter < 50; ++iter) {
        Tensor x(4, 6);
        Mask mask(4, 6, false);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t forced = rng.uniform_int(6);
            for (std::size_t j = 0; j < 6; ++j) {
                x.set(i, j, rng.uniform(-50.0, 50.0));
                mask.set(i, j, j == forced || rng.uniform() < 0.5);
            }
        }
        Tensor y = softmax_rows(x, &mask);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                if (mask.at(i, j)) {
                    CHECK(y.at(i, j) >= 0.0);
                    s += y.at(i, j);
                } else {
                    CHECK(y.at(i, j) == 0.0);
                }
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm examples") {
    Tensor gain3 = Tensor(1, 3, 1.0);
    Tensor bias3 = Tensor(1, 3, 0.0);
    Tensor constant_row = layer_norm(Tensor::from_rows({{1.0, 1.0, 1.0}}), gain3, bias3, 1e-5);
    for (std::size_t j = 0; j < 3; ++j)
        CHECK(constant_row.at(0, j) == Catch::Approx(0.0).margin(1e-12));

    // mean 0, variance 1 by hand -> unchanged with eps=0.
    Tensor gain2 = Tensor(1, 2, 1.0);
    Tensor bias2 = Tensor(1, 2, 0.0);
    Tensor pm = layer_norm(Tensor::from_rows({{-1.0, 1.0}}), gain2, bias2, 0.0);
    CHECK(pm.at(0, 0) == Catch::Approx(-1.0).margin(1e-12));
    CHECK(pm.at(0, 1) == Catch::Approx(1.0).margin(1e-12));

    Tensor bias5 = Tensor(1, 2, 5.0);
    Tensor passthrough = layer_norm(Tensor::from_rows({{0.0, 0.0}}), gain2, bias5, 1e-5);
    CHECK(passthrough.at(0, 0) == Catch::Approx(5.0).margin(1e-12));
    CHECK(passthrough.at(0, 1) == Catch::Approx(5.0).margin(1e-12));

    Tensor gain1 = Tensor(1, 1, 1.0);
    CHECK_THROWS_AS(layer_norm(Tensor(2, 1), gain1, gain1, 1e-5), ShapeError);
}

TEST_CASE("layer_norm rows have zero mean with unit gain and zero bias") {
    CounterRng rng(11, Stream::tokens);
    Tensor x(6, 9);
    for (std::size_t i = 0; i < x.size(); ++i) x.mutable_values()[i] = rng.uniform(-4.0, 4.0);
    Tensor gain(1, 9, 1.0);
    Tensor bias(1, 9, 0.0);
    Tensor y = layer_norm(x, gain, bias, 1e-5);
    for (std::size_t i = 0; i < y.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) mean += y.at(i, j);
        CHECK(std::abs(mean / static_cast<double>(y.cols())) < 1e-6);
    }
}

TEST_CASE("grad_check is exact for linear maps") {
    NamedParams params;
    Tensor& w = params.add("weight", Tensor(3, 2, 0.5));
    Tensor x = Tensor::from_rows({{1.0, -2.0, 0.3}});
    auto f = [&] { return sum(matmul(x, w)); };
    GradCheckReport report = grad_check(f, params);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-9);
    CHECK(report.checked_entries == 6);
}

TEST_CASE("grad_check flags a corrupted gradient rule with the parameter name") {
    NamedParams params;
    Tensor& w = params.add("bad.weight", Tensor(2, 2, 0.25));
    // Deliberately wrong backward: scales the true gradient by 1.5.
    auto corrupted_sum = [&]() {
        Tensor out(1, 1);
        double acc = 0.0;
        for (double v : w.values()) acc += v;
        out.set(0, 0, acc);
        if (Tape::active() && w.requires_grad()) {
            out.set_requires_grad(true);
            Tensor wc = w;
            Tensor oc = out;
            Tape::active()->record([wc, oc]() mutable {
                const double d = oc.grad()[0];
                for (double& g : wc.mutable_grad()) g += 1.5 * d;
            });
        }
        return out;
    };
    GradCheckReport report = grad_check(corrupted_sum, params);
    CHECK_FALSE(report.pass);
    CHECK(report.worst_param == "bad.weight");
    CHECK_FALSE(report.failures.empty());
}

TEST_CASE("grad_check rejects non-finite loss") {
    NamedParams params;
    params.add("w", Tensor(1, 1, 1.0));
    auto f = [&] {
        Tensor out(1, 1);
        out.set(0, 0, std::numeric_limits<double>::quiet_NaN());
        return out;
    };
    CHECK_THROWS_AS(grad_check(f, params), std::runtime_error);
}

TEST_CASE("backward of a composite graph matches finite differences") {
    NamedParams params;
    CounterRng rng(5, Stream::init);
    Tensor& w1 = params.add("w1", Tensor(4, 3));
    Tensor& w2 = params.add("w2", Tensor(3, 3));
    Tensor& gain = params.add("gain", Tensor(1, 3, 1.0), false);
    Tensor& bias = params.add("bias", Tensor(1, 3), false);
    for (auto& v : w1.mutable_values()) v = rng.uniform(-1.0, 1.0);
    for (auto& v : w2.mutable_values()) v = rng.uniform(-1.0, 1.0);
    Tensor x(2, 4);
    for (auto& v : x.mutable_values()) v = rng.uniform(-1.0, 1.0);

    auto f = [&] {
        Tensor h = relu(matmul(x, w1));
        Tensor g = layer_norm(matmul(h, w2), gain, bias, 1e-5);
        Tensor p = softmax_rows(g);
        Tensor q = mul(p, p);
        return sum(add(q, scale(transpose(transpose(g)), 0.5)));
    };
    GradCheckReport report = grad_check(f, params);
    INFO(report.worst_param << " rel err " << report.max_rel_err);
    CHECK(report.pass);
}

TEST_CASE("structural ops roundtrip and differentiate") {
    Tensor x = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}});
    x.set_requires_grad();

    {
        Tape tape;
        Tensor top = slice_rows(x, 0, 1);
        Tensor rest = slice_rows(x, 1, 2);
        Tensor back = concat_rows({top, rest});
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(back.values()[i] == x.values()[i]);
        Tensor pooled = mean_rows(back);
        CHECK(pooled.at(0, 0) == Catch::Approx(3.0));
        CHECK(pooled.at(0, 1) == Catch::Approx(4.0));
        Tensor loss = sum(pooled);
        x.zero_grad();
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(x.grad()[i] == Catch::Approx(1.0 / 3.0).margin(1e-12));

    Tensor wide = concat_cols({Tensor::from_rows({{1.0}, {2.0}}), Tensor::from_rows({{3.0}, {4.0}})});
    CHECK(wide.at(0, 1) == 3.0);
    CHECK(wide.at(1, 0) == 2.0);

    Tensor scaled = row_scale(x, {1.0, 0.0, 2.0});
    CHECK(scaled.at(1, 0) == 0.0);
    CHECK(scaled.at(2, 0) == 10.0);
}

TEST_CASE("neg_log_likelihood_mean anchors") {
    Tensor probs(3, 4, 0.25);
    Tensor loss = neg_log_likelihood_mean(probs, {0, 2, 3});
    CHECK(std::abs(loss.at(0, 0) - std::log(4.0)) < 1e-12);

    Tensor sharp(1, 4);
    sharp.set(0, 1, 1.0);
    Tensor zero_loss = neg_log_likelihood_mean(sharp, {1});
    CHECK(zero_loss.at(0, 0) == 0.0);

    CHECK_THROWS_AS(neg_log_likelihood_mean(probs, {0, 1}), ShapeError);
    CHECK_THROWS_AS(neg_log_likelihood_mean(probs, {0, 1, 7}), std::invalid_argument);
}

TEST_CASE("add_bias broadcasts and accumulates bias gradient") {
    NamedParams params;
    Tensor& b = params.add("b", Tensor(1, 2, 0.1), false);
    Tensor x = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    auto f = [&] { return sum(mul(add_bias(x, b), add_bias(x, b))); };
    GradCheckReport report = grad_check(f, params, 1e-5, 1e-6);
    CHECK(report.pass);
}

TEST_CASE("tape replay with the same seed is bit-identical") {
    Tensor x(3, 5);
    CounterRng init(21, Stream::init);
    for (auto& v : x.mutable_values()) v = init.uniform(-1.0, 1.0);

    auto run = [&] {
        Tape tape;
        Tensor h = dropout(relu(x), 0.3, CounterRng(9, Stream::dropout, 2, 4, 0), true);
        return sum(h).at(0, 0);
    };
    const double a = run();
    const double b = run();
    CHECK(a == b);
}
