// SPDX-License-Identifier: Apache-2.0
#include "cobo/seqvae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cobo/optim.hpp"

namespace cobo {

namespace {

ad::Tensor init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
    ad::Tensor w({rows, cols});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : w.data()) v = rng.normal() * scale;
    return w;
}

// y += x * W for a single flat input row; W is {in, out}.
void matvec_add(const ad::Tensor& w, const std::vector<double>& x, std::vector<double>& y) {
    const std::size_t in = w.shape()[0], out = w.shape()[1];
    for (std::size_t i = 0; i < in; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = w.data().data() + i * out;
        for (std::size_t j = 0; j < out; ++j) y[j] += xi * row[j];
    }
}

}  // namespace

VaeParams init_vae(std::size_t T, std::size_t V, std::size_t h, std::size_t n, Rng& rng) {
    VaeParams p;
    p.T = T;
    p.V = V;
    p.h = h;
    p.n = n;
    p.enc_w1 = init_weight(T * V, h, rng);
    p.enc_b1 = ad::Tensor({h});
    p.enc_w2 = init_weight(h, 2 * n, rng);
    p.enc_b2 = ad::Tensor({2 * n});
    p.dec_w1 = init_weight(n, h, rng);
    p.dec_b1 = ad::Tensor({h});
    p.dec_w2 = init_weight(h, T * V, rng);
    p.dec_b2 = ad::Tensor({T * V});
    return p;
}

ad::Tensor one_hot(const std::vector<SequenceX>& xs, std::size_t T, std::size_t V) {
    ad::Tensor t({xs.size(), T * V});
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != T) throw std::invalid_argument("one_hot: wrong sequence length");
        for (std::size_t pos = 0; pos < T; ++pos) {
            if (xs[i][pos] >= V) throw std::invalid_argument("one_hot: token index out of vocab");
            t[i * T * V + pos * V + xs[i][pos]] = 1.0;
        }
    }
    return t;
}

std::pair<LatentZ, std::vector<double>> encode(const VaeParams& p, const SequenceX& x) {
    if (x.size() != p.T) throw std::invalid_argument("encode: wrong sequence length");
    const std::size_t h = p.h, n = p.n, V = p.V;
    std::vector<double> a1(p.enc_b1.data());
    // one-hot input: sum the weight rows selected by each position's token
    for (std::size_t pos = 0; pos < p.T; ++pos) {
        if (x[pos] >= V) throw std::invalid_argument("encode: token index out of vocab");
        const double* row = p.enc_w1.data().data() + (pos * V + x[pos]) * h;
        for (std::size_t j = 0; j < h; ++j) a1[j] += row[j];
    }
    for (auto& v : a1) v = std::tanh(v);
    std::vector<double> out(p.enc_b2.data());
    matvec_add(p.enc_w2, a1, out);
    LatentZ mean(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> logvar(out.begin() + static_cast<std::ptrdiff_t>(n), out.end());
    for (auto& v : logvar) v = std::clamp(v, -kLogvarClamp, kLogvarClamp);
    return {std::move(mean), std::move(logvar)};
}

LatentZ encode_mean(const VaeParams& p, const SequenceX& x) { return encode(p, x).first; }

std::vector<double> decode_logits(const VaeParams& p, const LatentZ& z) {
    if (z.size() != p.n) throw std::invalid_argument("decode_logits: wrong latent length");
    std::vector<double> h1(p.dec_b1.data());
    matvec_add(p.dec_w1, z, h1);
    for (auto& v : h1) v = std::tanh(v);
    std::vector<double> logits(p.dec_b2.data());
    matvec_add(p.dec_w2, h1, logits);
    return logits;
}

SequenceX decode_map(const VaeParams& p, const LatentZ& z) {
    const auto logits = decode_logits(p, z);
    SequenceX out(p.T);
    for (std::size_t pos = 0; pos < p.T; ++pos) {
        std::size_t best = 0;
        double bestv = logits[pos * p.V];
        for (std::size_t v = 1; v < p.V; ++v)
            if (logits[pos * p.V + v] > bestv) {  // strict: ties keep the lowest index
                bestv = logits[pos * p.V + v];
                best = v;
            }
        out[pos] = best;
    }
    return out;
}

LatentZ reparameterize(const LatentZ& mean, const std::vector<double>& logvar, Rng& rng) {
    if (mean.size() != logvar.size())
        throw std::invalid_argument("reparameterize: length mismatch");
    LatentZ z(mean.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = mean[i] + std::exp(0.5 * logvar[i]) * rng.normal();
    return z;
}

double loss_recon(const VaeParams& p, const SequenceX& x, const LatentZ& z) {
    const auto logits = decode_logits(p, z);
    double total = 0.0;
    for (std::size_t pos = 0; pos < p.T; ++pos) {
        const double* row = logits.data() + pos * p.V;
        double mx = row[0];
        for (std::size_t v = 1; v < p.V; ++v) mx = std::max(mx, row[v]);
        double s = 0.0;
        for (std::size_t v = 0; v < p.V; ++v) s += std::exp(row[v] - mx);
        total += mx + std::log(s) - row[x[pos]];
    }
    return total / static_cast<double>(p.T);
}

double loss_kl(const LatentZ& mean, const std::vector<double>& logvar) {
    if (mean.size() != logvar.size()) throw std::invalid_argument("loss_kl: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i)
        s += std::exp(logvar[i]) + mean[i] * mean[i] - 1.0 - logvar[i];
    return 0.5 * s;
}

VaeNodes add_vae_params(ad::Graph& g, const VaeParams& p, const std::string& prefix) {
    VaeNodes vn;
    vn.enc_w1 = g.param(prefix + "enc_w1", p.enc_w1);
    vn.enc_b1 = g.param(prefix + "enc_b1", p.enc_b1);
    vn.enc_w2 = g.param(prefix + "enc_w2", p.enc_w2);
    vn.enc_b2 = g.param(prefix + "enc_b2", p.enc_b2);
    vn.dec_w1 = g.param(prefix + "dec_w1", p.dec_w1);
    vn.dec_b1 = g.param(prefix + "dec_b1", p.dec_b1);
    vn.dec_w2 = g.param(prefix + "dec_w2", p.dec_w2);
    vn.dec_b2 = g.param(prefix + "dec_b2", p.dec_b2);
    vn.all = {vn.enc_w1, vn.enc_b1, vn.enc_w2, vn.enc_b2,
              vn.dec_w1, vn.dec_b1, vn.dec_w2, vn.dec_b2};
    return vn;
}

std::pair<ad::NodeId, ad::NodeId> encode_nodes(ad::Graph& g, ad::NodeId xonehot,
                                               const VaeNodes& vn, std::size_t n) {
    ad::NodeId h1 = g.tanh(g.add_rowvec(g.matmul(xonehot, vn.enc_w1), vn.enc_b1));
    ad::NodeId out = g.add_rowvec(g.matmul(h1, vn.enc_w2), vn.enc_b2);
    ad::NodeId mean = g.slice_cols(out, 0, n);
    ad::NodeId logvar = g.clamp(g.slice_cols(out, n, 2 * n), -kLogvarClamp, kLogvarClamp);
    return {mean, logvar};
}

ad::NodeId decode_logits_nodes(ad::Graph& g, ad::NodeId z, const VaeNodes& vn) {
    ad::NodeId h1 = g.tanh(g.add_rowvec(g.matmul(z, vn.dec_w1), vn.dec_b1));
    return g.add_rowvec(g.matmul(h1, vn.dec_w2), vn.dec_b2);
}

ad::NodeId recon_nll_nodes(ad::Graph& g, ad::NodeId logits,
                           const std::vector<SequenceX>& xs, std::size_t T, std::size_t V) {
    const std::size_t N = xs.size();
    ad::NodeId flat = g.reshape(logits, {N * T, V});
    ad::NodeId lse = g.logsumexp_rows(flat);  // {N*T}
    std::vector<std::size_t> idx(N * T);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < T; ++t) idx[i * T + t] = (i * T + t) * V + xs[i][t];
    ad::NodeId truth = g.gather(flat, idx);  // {N*T}
    ad::NodeId nll = g.sub(lse, truth);
    return g.mul_scalar(g.reduce_sum_rows(g.reshape(nll, {N, T})), 1.0 / double(T));
}

ad::NodeId kl_nodes(ad::Graph& g, ad::NodeId mean, ad::NodeId logvar) {
    // 0.5 * sum_dims(exp(lv) + mean^2 - 1 - lv) per row
    ad::NodeId term = g.add(g.sub(g.exp(logvar), logvar),
                            g.add_scalar(g.mul(mean, mean), -1.0));
    return g.mul_scalar(g.reduce_sum_rows(term), 0.5);
}

void read_back_params(const ad::Graph& g, const VaeNodes& vn, VaeParams& p) {
    p.enc_w1 = g.value(vn.enc_w1);
    p.enc_b1 = g.value(vn.enc_b1);
    p.enc_w2 = g.value(vn.enc_w2);
    p.enc_b2 = g.value(vn.enc_b2);
    p.dec_w1 = g.value(vn.dec_w1);
    p.dec_b1 = g.value(vn.dec_b1);
    p.dec_w2 = g.value(vn.dec_w2);
    p.dec_b2 = g.value(vn.dec_b2);
}

std::pair<double, double> pretrain_vae(VaeParams& p, const std::vector<SequenceX>& corpus,
                                       int epochs, double lr, double kl_coeff, Rng& rng) {
    const std::size_t N = corpus.size();
    if (N == 0) throw std::invalid_argument("pretrain_vae: empty corpus");
    ad::Graph g;
    VaeNodes vn = add_vae_params(g, p, "");
    ad::NodeId x = g.constant(one_hot(corpus, p.T, p.V));
    ad::NodeId eps = g.input("eps", {N, p.n});
    auto [mean, logvar] = encode_nodes(g, x, vn, p.n);
    ad::NodeId z = g.add(mean, g.mul(g.exp(g.mul_scalar(logvar, 0.5)), eps));
    ad::NodeId logits = decode_logits_nodes(g, z, vn);
    ad::NodeId recon = g.reduce_mean(recon_nll_nodes(g, logits, corpus, p.T, p.V));
    ad::NodeId kl = g.reduce_mean(kl_nodes(g, mean, logvar));
    ad::NodeId loss = g.add(recon, g.mul_scalar(kl, kl_coeff));

    Adam opt(lr);
    double initial = 0.0, final_loss = 0.0;
    ad::Tensor eps_val({N, p.n});
    for (int e = 0; e < epochs; ++e) {
        for (auto& v : eps_val.data()) v = rng.normal();
        g.set_value(eps, eps_val);
        g.forward();
        if (e == 0) initial = g.value(loss).value();
        g.backward(loss);
        opt.step(g, vn.all);
        final_loss = g.value(loss).value();
    }
    if (epochs > 0) read_back_params(g, vn, p);
    return {initial, final_loss};
}

namespace {

constexpr char kVaeMagic[8] = {'C', 'B', 'V', 'A', 'E', '0', '0', '1'};

void write_u64(std::ofstream& f, std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void write_tensor(std::ofstream& f, const ad::Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_tensor(std::ifstream& f, ad::Tensor& t) {
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

}  // namespace

void save_vae(const VaeParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_vae: cannot open " + path);
    f.write(kVaeMagic, sizeof(kVaeMagic));
    write_u64(f, p.T);
    write_u64(f, p.V);
    write_u64(f, p.h);
    write_u64(f, p.n);
    for (const ad::Tensor* t : {&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2,
                                &p.dec_w1, &p.dec_b1, &p.dec_w2, &p.dec_b2})
        write_tensor(f, *t);
    if (!f) throw std::runtime_error("save_vae: write failed for " + path);
}

VaeParams load_vae(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_vae: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kVaeMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_vae: bad magic in " + path);
    VaeParams p;
    p.T = read_u64(f);
    p.V = read_u64(f);
    p.h = read_u64(f);
    p.n = read_u64(f);
    p.enc_w1 = ad::Tensor({p.T * p.V, p.h});
    p.enc_b1 = ad::Tensor({p.h});
    p.enc_w2 = ad::Tensor({p.h, 2 * p.n});
    p.enc_b2 = ad::Tensor({2 * p.n});
    p.dec_w1 = ad::Tensor({p.n, p.h});
    p.dec_b1 = ad::Tensor({p.h});
    p.dec_w2 = ad::Tensor({p.h, p.T * p.V});
    p.dec_b2 = ad::Tensor({p.T * p.V});
    for (ad::Tensor* t : {&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2,
                          &p.dec_w1, &p.dec_b1, &p.dec_w2, &p.dec_b2})
        read_tensor(f, *t);
    if (!f) throw std::runtime_error("load_vae: truncated file " + path);
    return p;
}

}  // namespace cobo
