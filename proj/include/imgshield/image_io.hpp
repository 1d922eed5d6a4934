#pragma once

#include "imgshield/ppm.hpp"
#include "imgshield/tensor.hpp"

#include <cmath>

namespace imgshield {

// PPM bytes -> [1,3,H,W] tensor in [0,1] (v / 255).
template <typename T>
Tensor<T> to_tensor(const PpmImage& img) {
    const int64_t H = img.height, W = img.width;
    Tensor<T> t = Tensor<T>::uninit({1, 3, H, W});
    auto d = t.data();
    for (int64_t i = 0; i < H * W; ++i)
        for (int64_t c = 0; c < 3; ++c)
            d[c * H * W + i] = static_cast<T>(img.rgb[3 * i + c] / 255.0);
    return t;
}

// [1,3,H,W] tensor in [0,1] -> PPM bytes, rounding to nearest and saturating.
template <typename T>
PpmImage to_ppm(const Tensor<T>& t) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
        throw std::invalid_argument("to_ppm: expected [1,3,H,W], got " + shape_str(t.shape()));
    PpmImage img;
    img.height = t.dim(2);
    img.width = t.dim(3);
    const int64_t HW = img.height * img.width;
    img.rgb.resize(static_cast<size_t>(3 * HW));
    auto d = t.data();
    for (int64_t i = 0; i < HW; ++i)
        for (int64_t c = 0; c < 3; ++c) {
            double v = std::round(static_cast<double>(d[c * HW + i]) * 255.0);
            img.rgb[3 * i + c] = static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
        }
    return img;
}

template <typename T>
Tensor<T> load_image(const std::string& path) {
    return to_tensor<T>(ppm_read(path));
}

template <typename T>
void save_image(const std::string& path, const Tensor<T>& t) {
    ppm_write(path, to_ppm(t));
}

} // namespace imgshield
