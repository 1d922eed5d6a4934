#include "imgshield/ppm.hpp"

#include <fstream>
#include <stdexcept>

namespace imgshield {

namespace {

struct Cursor {
    const std::vector<uint8_t>& b;
    size_t pos = 0;
    const std::string& origin;

    [[noreturn]] void fail(const std::string& why) const {
        throw std::runtime_error(origin + ": " + why);
    }

    int peek() const { return pos < b.size() ? b[pos] : -1; }
    int take() { return pos < b.size() ? b[pos++] : -1; }

    // Skip whitespace and '#' comments (to end of line).
    void skip_space() {
        for (;;) {
            int c = peek();
            if (c == '#') {
                while (c != -1 && c != '\n') c = take();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                take();
            } else {
                return;
            }
        }
    }

    int64_t read_int(const char* what) {
        skip_space();
        if (peek() < '0' || peek() > '9') fail(std::string("malformed header: expected ") + what);
        int64_t v = 0;
        while (peek() >= '0' && peek() <= '9') {
            v = v * 10 + (take() - '0');
            if (v > (int64_t(1) << 40)) fail(std::string("absurd value for ") + what);
        }
        return v;
    }
};

} // namespace

PpmImage ppm_decode(const std::vector<uint8_t>& bytes, const std::string& origin) {
    Cursor c{bytes, 0, origin};
    if (c.take() != 'P' || c.take() != '6') c.fail("malformed header: not a P6 file");
    PpmImage img;
    img.width = c.read_int("width");
    img.height = c.read_int("height");
    int64_t maxval = c.read_int("maxval");
    if (img.width < 1 || img.height < 1) c.fail("malformed header: non-positive dimensions");
    if (maxval != 255)
        c.fail("unsupported maxval " + std::to_string(maxval) + " (only 255 is supported)");
    int ws = c.take();
    if (ws != ' ' && ws != '\t' && ws != '\r' && ws != '\n')
        c.fail("malformed header: expected single whitespace before pixel data");
    const size_t need = static_cast<size_t>(3 * img.width * img.height);
    if (bytes.size() - c.pos < need)
        c.fail("truncated pixel payload: need " + std::to_string(need) + " bytes, have " +
               std::to_string(bytes.size() - c.pos));
    img.rgb.assign(bytes.begin() + c.pos, bytes.begin() + c.pos + need);
    return img;
}

PpmImage ppm_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return ppm_decode(bytes, path);
}

std::vector<uint8_t> ppm_encode(const PpmImage& img) {
    if (img.rgb.size() != static_cast<size_t>(3 * img.width * img.height))
        throw std::invalid_argument("ppm_encode: payload size does not match dimensions");
    std::string head = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                       "\n255\n";
    std::vector<uint8_t> out(head.begin(), head.end());
    out.insert(out.end(), img.rgb.begin(), img.rgb.end());
    return out;
}

void ppm_write(const std::string& path, const PpmImage& img) {
    auto bytes = ppm_encode(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

} // namespace imgshield
