#pragma once

#include <vector>

#include "ivf/events.hpp"
#include "ivf/nn/tensor.hpp"

namespace ivf::repr {

// [2S, H, W]: per segment a signed accumulation channel followed by a time-surface channel.
using EventTensor = nn::Tensor<double>;
// [2 |P|, H, W]: per P an "after" and a "before" signed accumulation channel.
using SubtleSegmentTensor = nn::Tensor<double>;

EventTensor stack_events(const events::EventStream& stream, int segments = 6);

// (cos(2^0 pi t), sin(2^0 pi t), ..., cos(2^(L-1) pi t), sin(2^(L-1) pi t)).
std::vector<double> fourier_encode(double t, int frequencies = 8);

SubtleSegmentTensor subtle_segments(const events::EventStream& stream, double t, const std::vector<int>& counts);

}  // namespace ivf::repr
