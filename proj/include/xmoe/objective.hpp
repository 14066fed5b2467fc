// SPDX-License-Identifier: Apache-2.0
//
// Load-balancing auxiliary loss and the total training objective.
//
// The balance term is N * sum_i t_i * mean_tokens softmax_i(s / tau0), with
// t_i the fraction of tokens routed to expert i. t_i is a constant of the
// batch: gradient reaches the scores only through the softmax factor. A
// perfectly uniform batch scores exactly 1; total collapse approaches N.
#pragma once

#include <cstdint>
#include <vector>

#include "xmoe/tensor.hpp"

namespace xmoe {

struct BalanceConfig {
    double alpha = 1e-2;  // weight of the balance term in the total loss
    double tau0 = 1.0;    // fixed softmax temperature, distinct from the gate tau

    void validate() const {
        if (alpha < 0.0) throw Error::config("balance: alpha must be >= 0");
        if (tau0 <= 0.0) throw Error::config("balance: tau0 must be > 0");
    }
};

struct LossBreakdown {
    Tensor task_loss;
    Tensor balance_loss;
    Tensor total;
    std::vector<int64_t> per_expert_load;       // token counts, sums to |B|
    std::vector<double> per_expert_mean_prob;   // mean softmax(s / tau0) per expert
};

Tensor balance_loss(const Tensor& scores, const std::vector<int64_t>& selected, double tau0);

Tensor total_loss(const Tensor& task, const Tensor& balance, double alpha);

LossBreakdown combine_losses(const Tensor& task, const Tensor& scores,
                             const std::vector<int64_t>& selected, const BalanceConfig& cfg);

std::vector<int64_t> expert_loads(const std::vector<int64_t>& selected, int64_t num_experts);

}  // namespace xmoe
