#pragma once

#include "memloom/autodiff.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace memloom {

// One labelled stream element. `task` is the hidden task id; only the
// evaluator reads it.
struct Example {
    std::vector<double> x;
    std::size_t y = 0;
    std::string task;

    bool operator==(const Example&) const = default;
};

// Row-stacked inputs [n, d] with their labels.
struct Batch {
    ad::Tensor inputs;
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

Batch make_batch(std::span<const Example> examples);
Batch make_batch(std::span<const Example* const> examples);
Batch single_batch(std::span<const double> x, std::size_t y);

} // namespace memloom
