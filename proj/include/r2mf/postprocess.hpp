#pragma once

#include "r2mf/mask.hpp"
#include "r2mf/tensor.hpp"

namespace r2mf {

/// Foreground where P >= t. Reads the first image of a (n,1,H,W) map.
template <typename T>
BinaryMask threshold(const Tensor<T>& prob, double t = 0.5);

/// Keeps the 8-connected component with the most pixels; on equal areas the
/// component discovered first in row-major order wins.
BinaryMask largest_component(const BinaryMask& mask);

/// 3x3 binary dilation; out-of-grid pixels count as background.
BinaryMask dilate3x3(const BinaryMask& mask);
/// 3x3 binary erosion; out-of-grid pixels count as background.
BinaryMask erode3x3(const BinaryMask& mask);
/// 3x3 closing evaluated on a canvas padded by one background pixel, then
/// cropped. Never removes a pixel and never splits a component.
BinaryMask closing(const BinaryMask& mask);

/// threshold -> largest_component -> closing.
template <typename T>
BinaryMask postprocess_pipeline(const Tensor<T>& prob, double t = 0.5);

}  // namespace r2mf
