// SPDX-License-Identifier: Apache-2.0
//
// Flat binary tensor container: an 8-byte little-endian header length N,
// N bytes of JSON metadata mapping tensor names to
// {dtype, shape, byte_offset, byte_length}, then the concatenated
// little-endian payloads in declared order.

#pragma once

#include <string>
#include <vector>

#include "lkv/tensor.hpp"

namespace lkv {

enum class Dtype { f32, f64 };

struct ContainerEntry {
    std::string name;
    Tensor tensor;
    Dtype dtype = Dtype::f64;
};

void save_container(const std::string& path, const std::vector<ContainerEntry>& entries);

class Container {
public:
    const std::vector<ContainerEntry>& entries() const { return entries_; }
    bool has(const std::string& name) const;
    // f32 payloads come back widened to float64 values.
    const Tensor& at(const std::string& name) const;

    static Container load(const std::string& path);

private:
    std::vector<ContainerEntry> entries_;
};

}  // namespace lkv
