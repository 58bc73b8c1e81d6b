// SPDX-License-Identifier: Apache-2.0

#include "lkv/checkpoint.hpp"

#include "lkv/container.hpp"
#include "lkv/errors.hpp"

namespace lkv {

namespace {

constexpr double kModelVersion = 1.0;

}  // namespace

void save_model(const std::string& path, const ModelWeights& weights) {
    std::vector<ContainerEntry> entries;
    Tensor meta = Tensor::from({9}, {kModelVersion, static_cast<double>(weights.config.n_layers),
                                     static_cast<double>(weights.config.n_query_heads),
                                     static_cast<double>(weights.config.n_kv_heads),
                                     static_cast<double>(weights.config.head_dim),
                                     static_cast<double>(weights.config.vocab_size),
                                     static_cast<double>(weights.config.max_seq_len),
                                     static_cast<double>(weights.config.mlp_hidden),
                                     weights.frozen ? 1.0 : 0.0});
    entries.push_back({"__meta", meta, Dtype::f64});
    ModelWeights& mut = const_cast<ModelWeights&>(weights);
    for (auto& [name, t] : mut.named_params()) entries.push_back({name, *t, Dtype::f64});
    save_container(path, entries);
}

ModelWeights load_model(const std::string& path) {
    Container c = Container::load(path);
    const Tensor& meta = c.at("__meta");
    if (meta.numel() != 9 || meta.data()[0] != kModelVersion) {
        throw contract_error("model checkpoint: unsupported metadata");
    }
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(meta.data()[1]);
    cfg.n_query_heads = static_cast<int>(meta.data()[2]);
    cfg.n_kv_heads = static_cast<int>(meta.data()[3]);
    cfg.head_dim = static_cast<int>(meta.data()[4]);
    cfg.vocab_size = static_cast<int>(meta.data()[5]);
    cfg.max_seq_len = static_cast<int>(meta.data()[6]);
    cfg.mlp_hidden = static_cast<int>(meta.data()[7]);
    ModelWeights w = init_model(cfg);
    for (auto& [name, t] : w.named_params()) {
        const Tensor& loaded = c.at(name);
        if (loaded.shape() != t->shape()) throw contract_error("model checkpoint: shape mismatch for " + name);
        *t = loaded.detached_clone();
    }
    w.frozen = meta.data()[8] != 0.0;
    return w;
}

void save_lkv_params(const std::string& path, const LkvParams& params) {
    std::vector<ContainerEntry> entries;
    Tensor meta = Tensor::from({5}, {kModelVersion, static_cast<double>(params.n_layers),
                                     static_cast<double>(params.n_kv_heads),
                                     static_cast<double>(params.d_e),
                                     static_cast<double>(params.d_head)});
    entries.push_back({"__meta", meta, Dtype::f64});
    LkvParams& mut = const_cast<LkvParams&>(params);
    for (auto& [name, t] : mut.named_params()) entries.push_back({name, *t, Dtype::f64});
    save_container(path, entries);
}

LkvParams load_lkv_params(const std::string& path) {
    Container c = Container::load(path);
    const Tensor& meta = c.at("__meta");
    if (meta.numel() != 5 || meta.data()[0] != kModelVersion) {
        throw contract_error("policy checkpoint: unsupported metadata");
    }
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(meta.data()[1]);
    cfg.n_kv_heads = static_cast<int>(meta.data()[2]);
    cfg.head_dim = static_cast<int>(meta.data()[4]);
    cfg.n_query_heads = cfg.n_kv_heads;  // placeholder; scorers only need kv geometry
    LkvParams p = init_lkv_params(cfg, 0, static_cast<int>(meta.data()[3]));
    for (auto& [name, t] : p.named_params()) {
        const Tensor& loaded = c.at(name);
        if (loaded.shape() != t->shape()) throw contract_error("policy checkpoint: shape mismatch for " + name);
        *t = loaded.detached_clone();
    }
    return p;
}

}  // namespace lkv
