#pragma once

#include "imgshield/models.hpp"
#include "imgshield/sha1.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace imgshield {

namespace detail {

inline bool host_is_little_endian() {
    const uint32_t probe = 1;
    uint8_t b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

inline std::string dtype_name(size_t bytes) { return bytes == 4 ? "f32" : "f64"; }

inline std::string shape_compact(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(s[i]);
    }
    return out;
}

inline Shape parse_shape_compact(const std::string& s) {
    Shape out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) out.push_back(std::stoll(part));
    return out;
}

} // namespace detail

// Rebuild the parameter skeleton (names and shapes only) for a descriptor.
// Used to validate checkpoints against the code's architecture.
template <typename T>
ModelParams<T> arch_skeleton(const std::string& arch) {
    if (arch == "toy_recon") return make_toy_params<T>(0, 3, arch);
    if (arch == "toy_blend") return make_toy_params<T>(0, 6, arch);
    if (arch.rfind("unet:", 0) == 0) return make_unet_params<T>(UnetDesc::parse(arch), 0);
    if (arch.rfind("field:", 0) == 0) {
        // A bare tensor field, e.g. a dataset-global perturbation:
        // "field:1x3x64x64".
        ModelParams<T> m;
        m.arch = arch;
        m.params.push_back(
            {"delta", Tensor<T>::zeros(detail::parse_shape_compact(arch.substr(6)))});
        return m;
    }
    throw std::invalid_argument("unknown architecture descriptor '" + arch + "'");
}

// Checkpoint = human-readable manifest (<base>.manifest) plus raw
// little-endian scalar blob (<base>.blob), parameters in manifest order.
template <typename T>
void save_checkpoint(const std::string& base, const ModelParams<T>& m,
                     const std::map<std::string, std::string>& meta = {}) {
    if (!detail::host_is_little_endian())
        throw std::runtime_error("checkpoint blobs are little-endian; unsupported host");
    const std::string blob_path = base + ".blob";
    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) throw std::runtime_error("cannot write " + blob_path);
    std::ostringstream man;
    man << "format = checkpoint-v1\n";
    man << "arch = " << m.arch << "\n";
    man << "seed = " << m.seed << "\n";
    man << "dtype = " << detail::dtype_name(sizeof(T)) << "\n";
    man << "endian = little\n";
    man << "params = " << m.params.size() << "\n";
    int64_t offset = 0;
    for (size_t i = 0; i < m.params.size(); ++i) {
        const auto& p = m.params[i];
        man << "param." << i << ".name = " << p.name << "\n";
        man << "param." << i << ".shape = " << detail::shape_compact(p.value.shape()) << "\n";
        man << "param." << i << ".offset = " << offset << "\n";
        blob.write(reinterpret_cast<const char*>(p.value.data().data()),
                   static_cast<std::streamsize>(p.value.numel() * sizeof(T)));
        offset += p.value.numel() * static_cast<int64_t>(sizeof(T));
    }
    for (const auto& [k, v] : meta) man << "meta." << k << " = " << v << "\n";
    if (!blob) throw std::runtime_error("short write to " + blob_path);
    blob.close();
    std::ofstream mf(base + ".manifest", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write " + base + ".manifest");
    mf << man.str();
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& base,
                               std::map<std::string, std::string>* meta_out = nullptr) {
    std::ifstream mf(base + ".manifest");
    if (!mf) throw std::runtime_error("cannot open " + base + ".manifest");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    if (kv["format"] != "checkpoint-v1")
        throw std::runtime_error(base + ": not a checkpoint manifest");
    const std::string want = detail::dtype_name(sizeof(T));
    if (kv["dtype"] != want)
        throw std::runtime_error(base + ": dtype " + kv["dtype"] +
                                 " does not match build precision " + want);

    ModelParams<T> m;
    m.arch = kv["arch"];
    m.seed = kv.count("seed") ? std::stoull(kv["seed"]) : 0;

    std::ifstream blob(base + ".blob", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot open " + base + ".blob");
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)),
                            std::istreambuf_iterator<char>());

    const size_t count = std::stoull(kv["params"]);
    ModelParams<T> skel = arch_skeleton<T>(m.arch);
    if (skel.params.size() != count)
        throw std::runtime_error(base + ": manifest lists " + std::to_string(count) +
                                 " parameters, architecture has " +
                                 std::to_string(skel.params.size()));
    for (size_t i = 0; i < count; ++i) {
        const std::string prefix = "param." + std::to_string(i) + ".";
        const std::string name = kv[prefix + "name"];
        const Shape shape = detail::parse_shape_compact(kv[prefix + "shape"]);
        const int64_t offset = std::stoll(kv[prefix + "offset"]);
        if (skel.params[i].name != name || skel.params[i].value.shape() != shape)
            throw std::runtime_error(base + ": parameter " + std::to_string(i) + " ('" + name +
                                     "' " + kv[prefix + "shape"] +
                                     ") does not match architecture '" + m.arch + "'");
        const int64_t numel = shape_numel(shape);
        if (offset < 0 ||
            static_cast<size_t>(offset) + numel * sizeof(T) > bytes.size())
            throw std::runtime_error(base + ": blob too small for parameter '" + name + "'");
        Tensor<T> t = Tensor<T>::uninit(shape);
        std::memcpy(t.data().data(), bytes.data() + offset, numel * sizeof(T));
        m.params.push_back({name, t});
    }
    if (meta_out) {
        meta_out->clear();
        for (const auto& [k, v] : kv)
            if (k.rfind("meta.", 0) == 0) (*meta_out)[k.substr(5)] = v;
    }
    return m;
}

// Content hash of the parameter scalars (order-sensitive), for change checks
// and run manifests.
template <typename T>
std::string params_hash(const ModelParams<T>& m) {
    std::vector<uint8_t> bytes;
    for (const auto& p : m.params) {
        const auto* d = reinterpret_cast<const uint8_t*>(p.value.data().data());
        bytes.insert(bytes.end(), d, d + p.value.numel() * sizeof(T));
    }
    return sha1_hex(bytes);
}

} // namespace imgshield
