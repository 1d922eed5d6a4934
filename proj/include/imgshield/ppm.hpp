#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace imgshield {

// Binary PPM (P6) with maxval 255. Reading accepts arbitrary whitespace and
// '#' comments in the header; writing emits the canonical form
// "P6\n<w> <h>\n255\n" so that write(read(f)) reproduces canonical files
// byte for byte.
struct PpmImage {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> rgb; // interleaved, 3 * width * height
};

PpmImage ppm_read(const std::string& path);
void ppm_write(const std::string& path, const PpmImage& img);

std::vector<uint8_t> ppm_encode(const PpmImage& img);
PpmImage ppm_decode(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>");

} // namespace imgshield
