#pragma once

#include "imgshield/ppm.hpp"
#include "imgshield/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace imgshield {

// Procedural test image: a few low-frequency colour gradients, a soft-edged
// centred ellipse and a sprinkle of per-pixel noise. Content is a pure
// function of (seed, index, size).
inline PpmImage synth_image(uint64_t seed, int64_t index, int64_t size) {
    Rng rng = Rng::derive(seed, "synth:" + std::to_string(index));
    const double pi = 3.14159265358979323846;

    // Per-channel gradient parameters.
    double fx[3], fy[3], phx[3], phy[3], amp[3], base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        fx[c] = rng.uniform(0.5, 2.0);
        fy[c] = rng.uniform(0.5, 2.0);
        phx[c] = rng.uniform(0.0, 2 * pi);
        phy[c] = rng.uniform(0.0, 2 * pi);
        amp[c] = rng.uniform(0.10, 0.25);
        base[c] = rng.uniform(0.30, 0.70);
        gx[c] = rng.uniform(-0.25, 0.25);
        gy[c] = rng.uniform(-0.25, 0.25);
    }
    const double ra = rng.uniform(0.15, 0.35) * size;
    const double rb = rng.uniform(0.15, 0.35) * size;
    const double tilt = rng.uniform(0.0, pi);
    double ellipse_color[3];
    for (int c = 0; c < 3; ++c) ellipse_color[c] = rng.uniform(0.1, 0.9);
    const double noise_amp = rng.uniform(0.01, 0.03);

    PpmImage img;
    img.width = size;
    img.height = size;
    img.rgb.resize(static_cast<size_t>(3 * size * size));
    const double ct = std::cos(tilt), st = std::sin(tilt);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size, v = (y + 0.5) / size;
            const double dx = x + 0.5 - size / 2.0, dy = y + 0.5 - size / 2.0;
            const double ex = (ct * dx + st * dy) / ra, ey = (-st * dx + ct * dy) / rb;
            const double d = std::sqrt(ex * ex + ey * ey);
            const double inside = 1.0 / (1.0 + std::exp(18.0 * (d - 1.0))); // soft edge
            for (int c = 0; c < 3; ++c) {
                double val = base[c] + gx[c] * u + gy[c] * v +
                             amp[c] * std::sin(2 * pi * fx[c] * u + phx[c]) *
                                 std::cos(2 * pi * fy[c] * v + phy[c]);
                val = (1.0 - inside) * val + inside * ellipse_color[c];
                val += noise_amp * (rng.uniform() * 2.0 - 1.0);
                val = val < 0.0 ? 0.0 : (val > 1.0 ? 1.0 : val);
                img.rgb[3 * (y * size + x) + c] = static_cast<uint8_t>(std::lround(val * 255.0));
            }
        }
    return img;
}

inline std::string synth_name(int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%04lld.ppm", static_cast<long long>(index));
    return buf;
}

} // namespace imgshield
