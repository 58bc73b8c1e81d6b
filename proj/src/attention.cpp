// SPDX-License-Identifier: Apache-2.0

#include "lkv/attention.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "lkv/errors.hpp"

namespace lkv {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kDegenerateFloor = 1e-300;

double mask_at(const AttentionCall& call, int j, int query_pos) {
    if (call.self_always_retained && j == query_pos) return 1.0;
    return call.soft_mask.empty() ? 1.0 : call.soft_mask[static_cast<size_t>(j)];
}

int admissible_end(const AttentionCall& call, int row) {
    if (!call.causal) return call.t;
    return std::min(call.t, call.query_pos_offset + row + 1);
}

}  // namespace

void validate_call(const AttentionCall& call) {
    if (call.n_q < 1 || call.t < 1 || call.d < 1) throw contract_error("attention: empty extents");
    if (call.queries.size() != static_cast<size_t>(call.n_q) * call.d) throw contract_error("attention: query size");
    if (call.keys.size() != static_cast<size_t>(call.t) * call.d) throw contract_error("attention: key size");
    if (call.values.size() != static_cast<size_t>(call.t) * call.d) throw contract_error("attention: value size");
    if (!call.soft_mask.empty() && call.soft_mask.size() != static_cast<size_t>(call.t)) {
        throw contract_error("attention: mask length must equal t");
    }
    for (double m : call.soft_mask) {
        if (!(m >= 0.0) || !std::isfinite(m)) throw contract_error("attention: mask values must be finite and >= 0");
    }
    if (call.causal && admissible_end(call, 0) < 1) throw contract_error("attention: first query row admits no key");
}

std::vector<double> masked_attention_dense(const AttentionCall& call, AttentionSaved* saved) {
    validate_call(call);
    const int n_q = call.n_q, t = call.t, d = call.d;
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> Q(call.queries.data(), n_q, d);
    Eigen::Map<const RowMat> K(call.keys.data(), t, d);
    Eigen::Map<const RowMat> V(call.values.data(), t, d);

    RowMat scores(n_q, t);
    scores.noalias() = call.scale * (Q * K.transpose());

    // Renormalized masked weights, zero at inadmissible positions.
    RowMat weights = RowMat::Zero(n_q, t);
    AttentionSaved local;
    AttentionSaved& sv = saved ? *saved : local;
    sv.p_raw.assign(static_cast<size_t>(n_q) * t, 0.0);
    sv.renorm.assign(static_cast<size_t>(n_q), 0.0);

    for (int r = 0; r < n_q; ++r) {
        const int end = admissible_end(call, r);
        const int pos = call.query_pos_offset + r;
        const double* s = scores.data() + static_cast<size_t>(r) * t;
        double* w = weights.data() + static_cast<size_t>(r) * t;
        double* p_raw = sv.p_raw.data() + static_cast<size_t>(r) * t;
        double mx = kNegInf;
        for (int j = 0; j < end; ++j) mx = std::max(mx, s[j]);
        double z_raw = 0.0;
        for (int j = 0; j < end; ++j) {
            p_raw[j] = std::exp(s[j] - mx);
            z_raw += p_raw[j];
        }
        double z_masked = 0.0;
        for (int j = 0; j < end; ++j) {
            p_raw[j] /= z_raw;
            w[j] = p_raw[j] * mask_at(call, j, pos);
            z_masked += w[j];
        }
        if (!(z_masked > kDegenerateFloor)) {
            throw degenerate_mask_error("attention row lost all admissible mass");
        }
        for (int j = 0; j < end; ++j) w[j] /= z_masked;
        sv.renorm[static_cast<size_t>(r)] = z_masked;
    }

    std::vector<double> out(static_cast<size_t>(n_q) * d);
    Eigen::Map<RowMat>(out.data(), n_q, d).noalias() = weights * V;
    if (saved) saved->p.assign(weights.data(), weights.data() + static_cast<size_t>(n_q) * t);
    return out;
}

std::vector<double> masked_attention_blocked(const AttentionCall& call, int block_size) {
    validate_call(call);
    if (block_size < 1) throw contract_error("attention: block_size must be >= 1");
    const int n_q = call.n_q, d = call.d;
    std::vector<double> out(static_cast<size_t>(n_q) * d, 0.0);
    std::vector<double> numer(static_cast<size_t>(d));
    for (int r = 0; r < n_q; ++r) {
        const int end = admissible_end(call, r);
        const int pos = call.query_pos_offset + r;
        const double* q = call.queries.data() + static_cast<size_t>(r) * d;
        double running_max = kNegInf;
        double denom = 0.0;
        std::fill(numer.begin(), numer.end(), 0.0);
        for (int b0 = 0; b0 < end; b0 += block_size) {
            const int b1 = std::min(end, b0 + block_size);
            double block_max = kNegInf;
            for (int j = b0; j < b1; ++j) {
                const double* k = call.keys.data() + static_cast<size_t>(j) * d;
                double dot = 0.0;
                for (int c = 0; c < d; ++c) dot += q[c] * k[c];
                block_max = std::max(block_max, call.scale * dot);
            }
            const double new_max = std::max(running_max, block_max);
            if (running_max != kNegInf && new_max != running_max) {
                const double rescale = std::exp(running_max - new_max);
                denom *= rescale;
                for (int c = 0; c < d; ++c) numer[static_cast<size_t>(c)] *= rescale;
            }
            running_max = new_max;
            for (int j = b0; j < b1; ++j) {
                const double* k = call.keys.data() + static_cast<size_t>(j) * d;
                double dot = 0.0;
                for (int c = 0; c < d; ++c) dot += q[c] * k[c];
                // Mask applied after exponentiation, never as an additive bias.
                const double e = std::exp(call.scale * dot - running_max) * mask_at(call, j, pos);
                denom += e;
                const double* v = call.values.data() + static_cast<size_t>(j) * d;
                for (int c = 0; c < d; ++c) numer[static_cast<size_t>(c)] += e * v[c];
            }
        }
        if (!(denom > kDegenerateFloor)) {
            throw degenerate_mask_error("attention row lost all admissible mass");
        }
        double* o = out.data() + static_cast<size_t>(r) * d;
        for (int c = 0; c < d; ++c) o[c] = numer[static_cast<size_t>(c)] / denom;
    }
    return out;
}

AttentionGrads masked_attention_vjp(const AttentionCall& call, const AttentionSaved& saved,
                                    const std::vector<double>& upstream) {
    validate_call(call);
    const int n_q = call.n_q, t = call.t, d = call.d;
    if (upstream.size() != static_cast<size_t>(n_q) * d) throw contract_error("attention vjp: upstream size");
    if (saved.p_raw.size() != static_cast<size_t>(n_q) * t) throw contract_error("attention vjp: stale saved state");

    AttentionGrads g;
    g.queries.assign(static_cast<size_t>(n_q) * d, 0.0);
    g.keys.assign(static_cast<size_t>(t) * d, 0.0);
    g.values.assign(static_cast<size_t>(t) * d, 0.0);
    if (!call.soft_mask.empty()) g.soft_mask.assign(static_cast<size_t>(t), 0.0);

    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> Q(call.queries.data(), n_q, d);
    Eigen::Map<const RowMat> K(call.keys.data(), t, d);
    Eigen::Map<const RowMat> V(call.values.data(), t, d);
    Eigen::Map<const RowMat> U(upstream.data(), n_q, d);
    Eigen::Map<const RowMat> P(saved.p.data(), n_q, t);

    // w_{rj} = <upstream_r, v_j>
    RowMat W(n_q, t);
    W.noalias() = U * V.transpose();

    // Score-space gradient, zero at inadmissible positions.
    RowMat d_scores = RowMat::Zero(n_q, t);
    for (int r = 0; r < n_q; ++r) {
        const int end = admissible_end(call, r);
        const int pos = call.query_pos_offset + r;
        const double* p_raw = saved.p_raw.data() + static_cast<size_t>(r) * t;
        const double* p = P.data() + static_cast<size_t>(r) * t;
        const double* w = W.data() + static_cast<size_t>(r) * t;
        const double z = saved.renorm[static_cast<size_t>(r)];
        double* ds = d_scores.data() + static_cast<size_t>(r) * t;

        double wp = 0.0;
        for (int j = 0; j < end; ++j) wp += w[j] * p[j];

        // d p~: renormalization Jacobian; mask grad factor is p_raw <= 1.
        double dp_dot = 0.0;
        for (int j = 0; j < end; ++j) {
            const double d_ptilde = (w[j] - wp) / z;
            if (!g.soft_mask.empty() && !(call.self_always_retained && j == pos)) {
                g.soft_mask[static_cast<size_t>(j)] += d_ptilde * p_raw[j];
            }
            const double d_praw = d_ptilde * mask_at(call, j, pos);
            ds[j] = d_praw;
            dp_dot += d_praw * p_raw[j];
        }
        for (int j = 0; j < end; ++j) ds[j] = p_raw[j] * (ds[j] - dp_dot) * call.scale;
    }

    Eigen::Map<RowMat>(g.values.data(), t, d).noalias() = P.transpose() * U;
    Eigen::Map<RowMat>(g.queries.data(), n_q, d).noalias() = d_scores * K;
    Eigen::Map<RowMat>(g.keys.data(), t, d).noalias() = d_scores.transpose() * Q;
    return g;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                        bool causal, double scale, int query_pos_offset,
                        bool self_always_retained) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw contract_error("masked_attention: rank-2 q/k/v required");
    AttentionCall call;
    call.n_q = q.dim(0);
    call.t = k.dim(0);
    call.d = q.dim(1);
    if (k.dim(1) != call.d || v.dim(1) != call.d || v.dim(0) != call.t) {
        throw contract_error("masked_attention: q/k/v shape mismatch");
    }
    call.queries.assign(q.data(), q.data() + q.numel());
    call.keys.assign(k.data(), k.data() + k.numel());
    call.values.assign(v.data(), v.data() + v.numel());
    if (mask.defined()) {
        if (mask.rank() != 1 || mask.dim(0) != call.t) throw contract_error("masked_attention: mask must be rank-1 of length t");
        call.soft_mask.assign(mask.data(), mask.data() + mask.numel());
    }
    call.causal = causal;
    call.scale = scale;
    call.query_pos_offset = query_pos_offset;
    call.self_always_retained = self_always_retained;

    AttentionSaved saved;
    std::vector<double> out = masked_attention_dense(call, &saved);

    std::vector<Tensor> inputs{q, k, v};
    const bool has_mask = mask.defined();
    if (has_mask) inputs.push_back(mask);

    const int n_q = call.n_q, t = call.t, d = call.d;
    return make_op_output(
        {n_q, d}, std::move(out), std::move(inputs),
        [call = std::move(call), saved = std::move(saved), has_mask, n_q, t, d](const Tensor& u) {
            AttentionGrads ag = masked_attention_vjp(call, saved, std::vector<double>(u.data(), u.data() + u.numel()));
            std::vector<Tensor> grads;
            grads.push_back(Tensor::from({n_q, d}, std::move(ag.queries)));
            grads.push_back(Tensor::from({t, d}, std::move(ag.keys)));
            grads.push_back(Tensor::from({t, d}, std::move(ag.values)));
            if (has_mask) grads.push_back(Tensor::from({t}, std::move(ag.soft_mask)));
            return grads;
        });
}

}  // namespace lkv
