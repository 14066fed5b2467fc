// SPDX-License-Identifier: Apache-2.0
#include "xmoe/objective.hpp"

namespace xmoe {

std::vector<int64_t> expert_loads(const std::vector<int64_t>& selected, int64_t num_experts) {
    std::vector<int64_t> loads(num_experts, 0);
    for (int64_t s : selected) {
        if (s < 0 || s >= num_experts) {
            throw Error::runtime("expert_loads: selected index out of range");
        }
        ++loads[s];
    }
    return loads;
}

Tensor balance_loss(const Tensor& scores, const std::vector<int64_t>& selected, double tau0) {
    if (scores.rank() != 2) {
        throw Error::runtime("balance_loss: scores must be [T x N]");
    }
    const int64_t T = scores.dim(0);
    const int64_t N = scores.dim(1);
    if (T == 0) {
        throw Error::runtime("balance_loss: empty batch");
    }
    if (static_cast<int64_t>(selected.size()) != T) {
        throw Error::runtime("balance_loss: selected size mismatch");
    }
    if (tau0 <= 0.0) {
        throw Error::runtime("balance_loss: tau0 must be positive");
    }

    const std::vector<int64_t> loads = expert_loads(selected, N);
    std::vector<double> freq(N);
    for (int64_t i = 0; i < N; ++i) {
        freq[i] = static_cast<double>(loads[i]) / static_cast<double>(T);
    }
    Tensor t_const = Tensor::from({N}, std::move(freq));  // constant: no gradient through t_i

    Tensor p = softmax(scale(scores, 1.0 / tau0), 1);
    Tensor mean_p = mean_rows(p);
    return scale(sum_all(mul(mean_p, t_const)), static_cast<double>(N));
}

Tensor total_loss(const Tensor& task, const Tensor& balance, double alpha) {
    return add(task, scale(balance, alpha));
}

LossBreakdown combine_losses(const Tensor& task, const Tensor& scores,
                             const std::vector<int64_t>& selected, const BalanceConfig& cfg) {
    cfg.validate();
    LossBreakdown out;
    out.task_loss = task;
    out.balance_loss = balance_loss(scores, selected, cfg.tau0);
    out.total = total_loss(task, out.balance_loss, cfg.alpha);
    out.per_expert_load = expert_loads(selected, scores.dim(1));
    {
        NoGradGuard ng;
        out.per_expert_mean_prob = mean_rows(softmax(scale(scores, 1.0 / cfg.tau0), 1)).values();
    }
    return out;
}

}  // namespace xmoe
