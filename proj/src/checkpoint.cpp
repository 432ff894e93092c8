#include "gpr/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "gpr/binio.hpp"

namespace gpr::ad {

namespace {
constexpr char kMagic[4] = {'G', 'P', 'R', 'W'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        binio::write_bytes(os, kMagic, 4);
        binio::write_pod<uint32_t>(os, kVersion);
        binio::write_pod<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            binio::write_string(os, name);
            binio::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
            for (const int d : t.shape) binio::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
            if (!t.data.empty()) {
                binio::write_bytes(os, t.data.data(), t.data.size() * sizeof(double));
            }
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("save_checkpoint: rename to " + path + " failed");
    }
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    binio::expect_magic(is, kMagic, "GPRW");
    const uint32_t version = binio::read_pod<uint32_t>(is, "GPRW version");
    if (version != kVersion) {
        throw std::runtime_error("GPRW: unknown version " + std::to_string(version));
    }
    const uint32_t count = binio::read_pod<uint32_t>(is, "GPRW tensor count");
    NamedTensors out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = binio::read_string(is, "GPRW tensor name");
        const uint32_t rank = binio::read_pod<uint32_t>(is, "GPRW rank");
        if (rank > 8) throw std::runtime_error("GPRW: unreasonable tensor rank");
        std::vector<int> shape(rank);
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<int>(binio::read_pod<uint32_t>(is, "GPRW dim"));
            numel *= shape[r];
        }
        std::vector<double> data(static_cast<size_t>(numel));
        if (numel) binio::read_bytes(is, data.data(), data.size() * sizeof(double), "GPRW payload");
        out.emplace_back(name, Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace gpr::ad
