// SPDX-License-Identifier: Apache-2.0

#include "lkv/container.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

#include "lkv/errors.hpp"

namespace lkv {

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u64_le(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw contract_error("container: truncated header");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

std::string dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw contract_error("container: unknown dtype " + s);
}

}  // namespace

void save_container(const std::string& path, const std::vector<ContainerEntry>& entries) {
    ordered_json meta = ordered_json::object();
    uint64_t offset = 0;
    for (const ContainerEntry& e : entries) {
        if (!e.tensor.defined()) throw contract_error("container: undefined tensor " + e.name);
        if (meta.contains(e.name)) throw contract_error("container: duplicate tensor name " + e.name);
        const uint64_t length = e.tensor.numel() * dtype_size(e.dtype);
        meta[e.name] = {{"dtype", dtype_name(e.dtype)},
                        {"shape", e.tensor.shape()},
                        {"byte_offset", offset},
                        {"byte_length", length}};
        offset += length;
    }
    const std::string meta_str = meta.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw contract_error("container: cannot open for writing: " + path);
    put_u64_le(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const ContainerEntry& e : entries) {
        const double* src = e.tensor.data();
        const size_t n = e.tensor.numel();
        if (e.dtype == Dtype::f64) {
            os.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n * 8));
        } else {
            std::vector<float> tmp(n);
            for (size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(src[i]);
            os.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
        }
    }
    if (!os) throw contract_error("container: write failed: " + path);
}

bool Container::has(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return true;
    }
    return false;
}

const Tensor& Container::at(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.tensor;
    }
    throw contract_error("container: missing tensor " + name);
}

Container Container::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw contract_error("container: cannot open: " + path);
    const uint64_t meta_len = get_u64_le(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw contract_error("container: truncated metadata");
    ordered_json meta = ordered_json::parse(meta_str, nullptr, /*allow_exceptions=*/false);
    if (meta.is_discarded() || !meta.is_object()) throw contract_error("container: bad metadata JSON");

    std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    Container c;
    uint64_t expected_offset = 0;
    for (auto it = meta.begin(); it != meta.end(); ++it) {
        const ordered_json& m = it.value();
        if (!m.contains("dtype") || !m.contains("shape") || !m.contains("byte_offset") ||
            !m.contains("byte_length")) {
            throw contract_error("container: incomplete record for " + it.key());
        }
        ContainerEntry e;
        e.name = it.key();
        e.dtype = dtype_from_name(m["dtype"].get<std::string>());
        const std::vector<int> shape = m["shape"].get<std::vector<int>>();
        const uint64_t off = m["byte_offset"].get<uint64_t>();
        const uint64_t len = m["byte_length"].get<uint64_t>();
        if (off != expected_offset) throw contract_error("container: offsets must be contiguous and in order");
        if (off + len > payload.size()) throw contract_error("container: payload shorter than metadata claims");
        size_t numel = 1;
        for (int d : shape) numel *= static_cast<size_t>(d);
        if (len != numel * dtype_size(e.dtype)) throw contract_error("container: byte length mismatch for " + e.name);

        std::vector<double> values(numel);
        if (e.dtype == Dtype::f64) {
            std::memcpy(values.data(), payload.data() + off, len);
        } else {
            std::vector<float> tmp(numel);
            std::memcpy(tmp.data(), payload.data() + off, len);
            for (size_t i = 0; i < numel; ++i) values[i] = static_cast<double>(tmp[i]);
        }
        e.tensor = Tensor::from(shape, std::move(values));
        c.entries_.push_back(std::move(e));
        expected_offset = off + len;
    }
    if (expected_offset != payload.size()) throw contract_error("container: trailing bytes after last tensor");
    return c;
}

}  // namespace lkv
