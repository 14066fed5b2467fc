// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "testing_util.hpp"
#include "xmoe/objective.hpp"

using namespace xmoe;

namespace {

// direct double-loop evaluation of the balance objective
double naive_balance(const Tensor& scores, const std::vector<int64_t>& selected, double tau0) {
    const int64_t T = scores.dim(0), N = scores.dim(1);
    std::vector<double> counts(N, 0.0);
    for (int64_t s : selected) counts[s] += 1.0;
    double loss = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        const double t_i = counts[i] / T;
        for (int64_t t = 0; t < T; ++t) {
            double denom = 0.0;
            for (int64_t j = 0; j < N; ++j) denom += std::exp(scores.at({t, j}) / tau0);
            loss += t_i * std::exp(scores.at({t, i}) / tau0) / denom;
        }
    }
    return static_cast<double>(N) / T * loss;
}

}  // namespace

TEST_SUITE_BEGIN("objective");

TEST_CASE("uniform batch scores exactly one") {
    const int64_t T = 16, N = 4;
    Tensor scores = Tensor::zeros({T, N});
    std::vector<int64_t> selected(T);
    for (int64_t t = 0; t < T; ++t) selected[t] = t % N;  // t_i = 1/N
    CHECK(std::abs(balance_loss(scores, selected, 0.3).value() - 1.0) <= 1e-9);
}

TEST_CASE("total collapse approaches N") {
    const int64_t T = 8, N = 4;
    std::vector<double> sv(T * N, 0.0);
    for (int64_t t = 0; t < T; ++t) sv[t * N + 0] = 100.0;  // p_0 -> 1
    std::vector<int64_t> selected(T, 0);
    const double loss = balance_loss(Tensor::from({T, N}, sv), selected, 1.0).value();
    CHECK(std::abs(loss - double(N)) < 1e-6);
}

TEST_CASE("matches the double-loop oracle on random instances") {
    Rng rng(300);
    for (int rep = 0; rep < 100; ++rep) {
        Tensor scores = Tensor::randn({16, 4}, rng);
        auto selected = argmax_rows(scores);
        const double got = balance_loss(scores, selected, 0.3).value();
        CHECK(std::abs(got - naive_balance(scores, selected, 0.3)) <= 1e-12);
    }
}

TEST_CASE("argmax-consistent losses respect the provable bounds") {
    // With argmax-consistent assignments the selected expert's probability is
    // at least 1/N, so loss >= sum_i t_i^2; the upper bound N is attained at
    // total collapse. A loss floor of exactly 1 only holds when the load
    // vector t is uniform.
    Rng rng(301);
    for (int64_t N : {2, 4, 8}) {
        for (int rep = 0; rep < 400; ++rep) {
            Tensor scores = Tensor::randn({24, N}, rng);
            auto selected = argmax_rows(scores);
            const double loss = balance_loss(scores, selected, 1.0).value();

            std::vector<double> t(N, 0.0);
            for (int64_t s : selected) t[s] += 1.0 / 24.0;
            double sum_sq = 0.0;
            for (double x : t) sum_sq += x * x;
            CHECK(loss >= sum_sq - 1e-12);
            CHECK(loss <= double(N) + 1e-12);
        }
        // uniform loads pin the loss to exactly 1 regardless of the scores
        Tensor scores = Tensor::randn({4 * N, N}, rng);
        std::vector<int64_t> uniform(4 * N);
        for (int64_t t = 0; t < 4 * N; ++t) uniform[t] = t % N;
        CHECK(std::abs(balance_loss(scores, uniform, 1.0).value() - 1.0) <= 1e-9);
    }
}

TEST_CASE("gradient flows only through the softmax factor") {
    Rng rng(302);
    Tensor scores = Tensor::randn({12, 4}, rng);
    const auto selected = argmax_rows(scores);  // frozen assignment
    const double got = testing::gradcheck(
        [&](const Tensor& s) { return balance_loss(s, selected, 0.5); }, scores);
    CHECK(got < 1e-6);
}

TEST_CASE("a descent step reduces the most-loaded expert's mass") {
    Rng rng(303);
    // biased scores so one expert dominates
    std::vector<double> sv(20 * 4);
    for (auto& v : sv) v = rng.next_gauss() * 0.1;
    for (int64_t t = 0; t < 20; ++t) sv[t * 4 + 2] += 1.0;
    Tensor scores = Tensor::from({20, 4}, sv, true);
    auto selected = argmax_rows(scores);

    Tensor loss = balance_loss(scores, selected, 1.0);
    backward(loss);

    auto mean_prob = [&](const Tensor& s) {
        NoGradGuard ng;
        return mean_rows(softmax(s, 1)).values();
    };
    const auto before = mean_prob(scores);
    std::vector<double> updated = scores.values();
    for (size_t i = 0; i < updated.size(); ++i) updated[i] -= 0.1 * scores.grad()[i];
    const auto after = mean_prob(Tensor::from({20, 4}, updated));

    int64_t top = 0;
    for (int64_t i = 1; i < 4; ++i) {
        if (before[i] > before[top]) top = i;
    }
    CHECK(after[top] < before[top]);
}

TEST_CASE("total loss composition") {
    Tensor task = Tensor::scalar(2.0);
    Tensor bal = Tensor::scalar(1.0);
    CHECK(total_loss(task, bal, 0.0).value() == 2.0);
    CHECK(total_loss(task, bal, 0.5).value() == 2.5);

    Rng rng(304);
    Tensor scores = Tensor::randn({10, 4}, rng);
    auto selected = argmax_rows(scores);
    BalanceConfig cfg;
    cfg.alpha = 1e-2;
    cfg.tau0 = 0.3;
    LossBreakdown lb = combine_losses(task, scores, selected, cfg);
    CHECK(lb.total.value() ==
          doctest::Approx(lb.task_loss.value() + cfg.alpha * lb.balance_loss.value())
              .epsilon(1e-15));
    int64_t total_load = 0;
    for (int64_t l : lb.per_expert_load) total_load += l;
    CHECK(total_load == 10);
    CHECK(lb.per_expert_mean_prob.size() == 4);
}

TEST_CASE("empty batch is rejected") {
    CHECK_THROWS_AS(balance_loss(Tensor::zeros({0, 4}), {}, 1.0), Error);
}

TEST_SUITE_END();
