#include "imgshield/jpeg.hpp"

#include <cmath>
#include <stdexcept>

namespace imgshield {

const std::array<int, 64>& base_luma_table() {
    static const std::array<int, 64> t = {
        16, 11, 10, 16, 24,  40,  51,  61,  //
        12, 12, 14, 19, 26,  58,  60,  55,  //
        14, 13, 16, 24, 40,  57,  69,  56,  //
        14, 17, 22, 29, 51,  87,  80,  62,  //
        18, 22, 37, 56, 68,  109, 103, 77,  //
        24, 35, 55, 64, 81,  104, 113, 92,  //
        49, 64, 78, 87, 103, 121, 120, 101, //
        72, 92, 95, 98, 112, 100, 103, 99,
    };
    return t;
}

const std::array<int, 64>& base_chroma_table() {
    static const std::array<int, 64> t = {
        17, 18, 24, 47, 99, 99, 99, 99, //
        18, 21, 26, 66, 99, 99, 99, 99, //
        24, 26, 56, 99, 99, 99, 99, 99, //
        47, 66, 99, 99, 99, 99, 99, 99, //
        99, 99, 99, 99, 99, 99, 99, 99, //
        99, 99, 99, 99, 99, 99, 99, 99, //
        99, 99, 99, 99, 99, 99, 99, 99, //
        99, 99, 99, 99, 99, 99, 99, 99,
    };
    return t;
}

std::array<int, 64> scaled_quant_table(const std::array<int, 64>& base, int quality) {
    if (quality < 1 || quality > 99)
        throw std::invalid_argument("quality must be in [1,99], got " +
                                    std::to_string(quality));
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<int, 64> out{};
    for (int i = 0; i < 64; ++i) {
        int v = (base[i] * scale + 50) / 100;
        out[i] = v < 1 ? 1 : (v > 255 ? 255 : v);
    }
    return out;
}

QuantTables quality_to_tables(int quality) {
    QuantTables qt{};
    const auto l = scaled_quant_table(base_luma_table(), quality);
    const auto c = scaled_quant_table(base_chroma_table(), quality);
    for (int i = 0; i < 64; ++i) {
        qt.luma[i] = static_cast<double>(l[i]);
        qt.chroma[i] = static_cast<double>(c[i]);
    }
    return qt;
}

const std::array<double, 64>& dct8_matrix() {
    static const std::array<double, 64> D = [] {
        std::array<double, 64> d{};
        const double pi = 3.14159265358979323846264338327950288;
        for (int u = 0; u < 8; ++u) {
            const double a = u == 0 ? std::sqrt(1.0 / 8.0) : 0.5;
            for (int x = 0; x < 8; ++x)
                d[u * 8 + x] = a * std::cos((2 * x + 1) * u * pi / 16.0);
        }
        return d;
    }();
    return D;
}

} // namespace imgshield
