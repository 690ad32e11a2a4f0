#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "textrec/common.hpp"
#include "textrec/tensor.hpp"

namespace textrec {

struct ModelConfig {
    int n_layers = 2;  // encoder and decoder each
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    int vocab_size = 0;
    int max_positions = 512;
    double dropout_rate = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1) throw std::runtime_error("model config: sizes must be positive");
        if (d_model % n_heads != 0) throw std::runtime_error("model config: d_model must be divisible by n_heads");
        if (vocab_size < 1) throw std::runtime_error("model config: vocab_size must be positive");
        if (max_positions < 1) throw std::runtime_error("model config: max_positions must be positive");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::runtime_error("model config: dropout_rate out of [0,1)");
    }

    nlohmann::json to_json() const {
        return {{"n_layers", n_layers},       {"n_heads", n_heads},
                {"d_model", d_model},         {"d_ff", d_ff},
                {"vocab_size", vocab_size},   {"max_positions", max_positions},
                {"dropout_rate", dropout_rate}, {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_positions = j.at("max_positions").get<int>();
        c.dropout_rate = j.at("dropout_rate").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }

    bool same_shape(const ModelConfig& o) const {
        return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model && d_ff == o.d_ff &&
               vocab_size == o.vocab_size && max_positions == o.max_positions;
    }
};

/// All weights of the encoder-decoder model. The token embedding is shared by
/// encoder input, decoder input and the output projection (tied). Layer norms
/// carry gains only; residual blocks are pre-norm.
template <typename T>
struct Parameters {
    struct Attention {
        Mat<T> wq, wk, wv, wo;  // [d, d] each
    };
    struct Ffn {
        Mat<T> w1;  // [d, d_ff]
        Mat<T> w2;  // [d_ff, d]
    };
    struct EncLayer {
        Mat<T> ln1_gain;
        Attention attn;
        Mat<T> ln2_gain;
        Ffn ffn;
    };
    struct DecLayer {
        Mat<T> ln1_gain;
        Attention self_attn;
        Mat<T> ln2_gain;
        Attention cross_attn;
        Mat<T> ln3_gain;
        Ffn ffn;
    };

    ModelConfig config;
    Mat<T> tok_emb;   // [vocab, d]
    Mat<T> enc_pos;   // [max_positions, d]
    Mat<T> dec_pos;   // [max_positions, d]
    std::vector<EncLayer> enc;
    std::vector<DecLayer> dec;
    Mat<T> enc_final_gain;
    Mat<T> dec_final_gain;

    static Parameters shaped(const ModelConfig& cfg) {
        cfg.validate();
        Parameters p;
        p.config = cfg;
        const auto v = static_cast<std::size_t>(cfg.vocab_size);
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto ff = static_cast<std::size_t>(cfg.d_ff);
        const auto mp = static_cast<std::size_t>(cfg.max_positions);
        p.tok_emb = Mat<T>(v, d);
        p.enc_pos = Mat<T>(mp, d);
        p.dec_pos = Mat<T>(mp, d);
        auto attn = [&] { return Attention{Mat<T>(d, d), Mat<T>(d, d), Mat<T>(d, d), Mat<T>(d, d)}; };
        for (int l = 0; l < cfg.n_layers; ++l) {
            p.enc.push_back({Mat<T>(1, d), attn(), Mat<T>(1, d), Ffn{Mat<T>(d, ff), Mat<T>(ff, d)}});
            p.dec.push_back({Mat<T>(1, d), attn(), Mat<T>(1, d), attn(), Mat<T>(1, d), Ffn{Mat<T>(d, ff), Mat<T>(ff, d)}});
        }
        p.enc_final_gain = Mat<T>(1, d);
        p.dec_final_gain = Mat<T>(1, d);
        return p;
    }

    /// Fixed-order (name, tensor) manifest used by init, optimizer, checkpoint
    /// and gradient checks.
    std::vector<std::pair<std::string, Mat<T>*>> tensors() {
        std::vector<std::pair<std::string, Mat<T>*>> out;
        out.emplace_back("tok_emb", &tok_emb);
        out.emplace_back("enc_pos", &enc_pos);
        out.emplace_back("dec_pos", &dec_pos);
        for (std::size_t l = 0; l < enc.size(); ++l) {
            const std::string pre = "enc." + std::to_string(l) + ".";
            auto& L = enc[l];
            out.emplace_back(pre + "ln1.gain", &L.ln1_gain);
            out.emplace_back(pre + "attn.wq", &L.attn.wq);
            out.emplace_back(pre + "attn.wk", &L.attn.wk);
            out.emplace_back(pre + "attn.wv", &L.attn.wv);
            out.emplace_back(pre + "attn.wo", &L.attn.wo);
            out.emplace_back(pre + "ln2.gain", &L.ln2_gain);
            out.emplace_back(pre + "ffn.w1", &L.ffn.w1);
            out.emplace_back(pre + "ffn.w2", &L.ffn.w2);
        }
        for (std::size_t l = 0; l < dec.size(); ++l) {
            const std::string pre = "dec." + std::to_string(l) + ".";
            auto& L = dec[l];
            out.emplace_back(pre + "ln1.gain", &L.ln1_gain);
            out.emplace_back(pre + "self_attn.wq", &L.self_attn.wq);
            out.emplace_back(pre + "self_attn.wk", &L.self_attn.wk);
            out.emplace_back(pre + "self_attn.wv", &L.self_attn.wv);
            out.emplace_back(pre + "self_attn.wo", &L.self_attn.wo);
            out.emplace_back(pre + "ln2.gain", &L.ln2_gain);
            out.emplace_back(pre + "cross_attn.wq", &L.cross_attn.wq);
            out.emplace_back(pre + "cross_attn.wk", &L.cross_attn.wk);
            out.emplace_back(pre + "cross_attn.wv", &L.cross_attn.wv);
            out.emplace_back(pre + "cross_attn.wo", &L.cross_attn.wo);
            out.emplace_back(pre + "ln3.gain", &L.ln3_gain);
            out.emplace_back(pre + "ffn.w1", &L.ffn.w1);
            out.emplace_back(pre + "ffn.w2", &L.ffn.w2);
        }
        out.emplace_back("enc_final.gain", &enc_final_gain);
        out.emplace_back("dec_final.gain", &dec_final_gain);
        return out;
    }

    std::vector<std::pair<std::string, const Mat<T>*>> tensors() const {
        auto mut = const_cast<Parameters*>(this)->tensors();
        std::vector<std::pair<std::string, const Mat<T>*>> out;
        out.reserve(mut.size());
        for (auto& [n, m] : mut) out.emplace_back(n, m);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, m] : tensors()) n += m->size();
        return n;
    }
};

/// Deterministic initialization: weights ~ Normal(0, 0.02^2), layer-norm gains 1.
template <typename T>
Parameters<T> init_params(const ModelConfig& cfg) {
    auto p = Parameters<T>::shaped(cfg);
    Rng rng(cfg.seed);
    for (auto& [name, m] : p.tensors()) {
        if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0) {
            m->fill(T(1));
        } else {
            for (auto& x : m->data) x = static_cast<T>(rng.normal() * 0.02);
        }
    }
    return p;
}

/// Integer id matrix, PAD-padded to rectangular shape.
struct TokenMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> ids;

    TokenMatrix() = default;
    TokenMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), ids(r * c, 0) {}

    int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
    int& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }

    static TokenMatrix from_rows(const std::vector<std::vector<int>>& rows_in) {
        std::size_t width = 0;
        for (const auto& r : rows_in) width = std::max(width, r.size());
        TokenMatrix m(rows_in.size(), width);
        for (std::size_t r = 0; r < rows_in.size(); ++r)
            for (std::size_t c = 0; c < rows_in[r].size(); ++c) m.at(r, c) = rows_in[r][c];
        return m;
    }
};

struct Batch {
    TokenMatrix encoder;  // prompted, masked text sequences
    TokenMatrix target;   // sentinel-delimited span targets, EOS-terminated

    void validate(const ModelConfig& cfg) const {
        if (encoder.rows != target.rows) throw std::runtime_error("batch: encoder/target row mismatch");
        if (encoder.rows == 0) throw std::runtime_error("batch: empty");
        for (int id : encoder.ids)
            if (id < 0 || id >= cfg.vocab_size) throw std::runtime_error("batch: encoder id out of vocabulary range");
        for (int id : target.ids)
            if (id < 0 || id >= cfg.vocab_size) throw std::runtime_error("batch: target id out of vocabulary range");
        if (encoder.cols > static_cast<std::size_t>(cfg.max_positions) ||
            target.cols > static_cast<std::size_t>(cfg.max_positions))
            throw std::runtime_error("batch: sequence exceeds max_positions");
    }
};

enum class Mode { train, eval };

constexpr int kPadId = 0;  // PAD doubles as the decoder start token

namespace nn {

template <typename T>
struct LnTape {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
struct AttnTape {
    Mat<T> q, k, v;                  // [rows, d]
    Mat<T> probs;                    // [(b*H + h)*Sq + i, Sk], pre-dropout
    std::vector<std::uint8_t> drop;  // same layout as probs; empty in eval mode
    Mat<T> ctx;                      // [rows_q, d]
};

template <typename T>
struct FfnTape {
    Mat<T> pre;                      // [rows, d_ff], pre-activation
    Mat<T> act;                      // [rows, d_ff], post-activation pre-dropout
    std::vector<std::uint8_t> drop;  // empty in eval mode
};

constexpr double kLnEps = 1e-5;

template <typename T>
Mat<T> ln_forward(const Mat<T>& x, const Mat<T>& gain, LnTape<T>& tape) {
    const std::size_t d = x.cols;
    Mat<T> y(x.rows, d);
    tape.xhat = Mat<T>(x.rows, d);
    tape.inv_std.assign(x.rows, T(0));
    for (std::size_t r = 0; r < x.rows; ++r) {
        const T* xr = x.row(r);
        double mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<double>(d);
        double var = 0;
        for (std::size_t c = 0; c < d; ++c) {
            const double e = xr[c] - mean;
            var += e * e;
        }
        var /= static_cast<double>(d);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + kLnEps));
        tape.inv_std[r] = istd;
        T* hr = tape.xhat.row(r);
        T* yr = y.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            hr[c] = static_cast<T>((xr[c] - mean) * istd);
            yr[c] = gain.data[c] * hr[c];
        }
    }
    return y;
}

template <typename T>
void ln_backward(const Mat<T>& dy, const Mat<T>& gain, const LnTape<T>& tape, Mat<T>& dx_accum, Mat<T>& dgain_accum) {
    const std::size_t d = dy.cols;
    for (std::size_t r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        const T* hr = tape.xhat.row(r);
        double sum_dh = 0, sum_dh_h = 0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dh = static_cast<double>(dyr[c]) * gain.data[c];
            sum_dh += dh;
            sum_dh_h += dh * hr[c];
            dgain_accum.data[c] += static_cast<T>(static_cast<double>(dyr[c]) * hr[c]);
        }
        const double mean_dh = sum_dh / static_cast<double>(d);
        const double mean_dh_h = sum_dh_h / static_cast<double>(d);
        T* dxr = dx_accum.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double dh = static_cast<double>(dyr[c]) * gain.data[c];
            dxr[c] += static_cast<T>(tape.inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h));
        }
    }
}

template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5 * static_cast<double>(x) * (1.0 + std::erf(static_cast<double>(x) * M_SQRT1_2)));
}

template <typename T>
T gelu_prime(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
    return static_cast<T>(cdf + xd * pdf);
}

template <typename T>
Mat<T> ffn_forward(const typename Parameters<T>::Ffn& p, const Mat<T>& x, Mode mode, double drop_rate, Rng* rng,
                   FfnTape<T>& tape) {
    tape.pre = Mat<T>(x.rows, p.w1.cols);
    matmul_nn(tape.pre, x, p.w1);
    tape.act = Mat<T>(x.rows, p.w1.cols);
    for (std::size_t i = 0; i < tape.pre.size(); ++i) tape.act.data[i] = gelu(tape.pre.data[i]);
    Mat<T> dropped = tape.act;
    if (mode == Mode::train && drop_rate > 0.0) {
        tape.drop.assign(tape.act.size(), 1);
        const T scale = static_cast<T>(1.0 / (1.0 - drop_rate));
        for (std::size_t i = 0; i < dropped.size(); ++i) {
            if (rng->bernoulli(drop_rate)) {
                tape.drop[i] = 0;
                dropped.data[i] = T(0);
            } else {
                dropped.data[i] *= scale;
            }
        }
    }
    Mat<T> out(x.rows, p.w2.cols);
    matmul_nn(out, dropped, p.w2);
    return out;
}

template <typename T>
void ffn_backward(const typename Parameters<T>::Ffn& p, typename Parameters<T>::Ffn& g, const Mat<T>& x, const Mat<T>& dout,
                  double drop_rate, const FfnTape<T>& tape, Mat<T>& dx_accum) {
    Mat<T> dropped = tape.act;
    const bool has_drop = !tape.drop.empty();
    const T scale = static_cast<T>(has_drop ? 1.0 / (1.0 - drop_rate) : 1.0);
    if (has_drop)
        for (std::size_t i = 0; i < dropped.size(); ++i) dropped.data[i] = tape.drop[i] ? dropped.data[i] * scale : T(0);
    matmul_tn(g.w2, dropped, dout, true);  // dW2 += dropped^T * dout
    Mat<T> dact(dout.rows, p.w1.cols);
    matmul_nt(dact, dout, p.w2);  // dact = dout * W2^T
    if (has_drop)
        for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] = tape.drop[i] ? dact.data[i] * scale : T(0);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] *= gelu_prime(tape.pre.data[i]);
    matmul_tn(g.w1, x, dact, true);  // dW1 += x^T * dact
    matmul_nt(dx_accum, dact, p.w1, true);
}

template <typename T>
using Strided = Eigen::Map<detail::EMat<T>, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;
template <typename T>
using CStrided = Eigen::Map<const detail::EMat<T>, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;

template <typename T>
Strided<T> head_block(Mat<T>& m, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
    return Strided<T>(m.data.data() + row0 * m.cols + col0, static_cast<Eigen::Index>(nrows),
                      static_cast<Eigen::Index>(ncols), Eigen::OuterStride<Eigen::Dynamic>(static_cast<Eigen::Index>(m.cols)));
}

template <typename T>
CStrided<T> head_block(const Mat<T>& m, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
    return CStrided<T>(m.data.data() + row0 * m.cols + col0, static_cast<Eigen::Index>(nrows),
                       static_cast<Eigen::Index>(ncols), Eigen::OuterStride<Eigen::Dynamic>(static_cast<Eigen::Index>(m.cols)));
}

/// Multi-head scaled dot-product attention over padded rectangular batches.
/// x_q: [Bq*Sq, d] queries; x_kv: [Bm*Sk, d] keys/values; mem_index maps each
/// query example onto its key/value example (identity for self-attention;
/// shared memory for candidate scoring). Invalid key positions and, when
/// causal, future positions are masked out of the softmax.
template <typename T>
Mat<T> attention_forward(const typename Parameters<T>::Attention& p, const Mat<T>& x_q, const Mat<T>& x_kv, std::size_t b_q,
                         std::size_t s_q, std::size_t s_k, const std::vector<std::size_t>& mem_index,
                         const std::vector<std::uint8_t>& key_valid, bool causal, int n_heads, Mode mode, double drop_rate,
                         Rng* rng, AttnTape<T>& tape) {
    const std::size_t d = x_q.cols;
    const std::size_t h = static_cast<std::size_t>(n_heads);
    const std::size_t dh = d / h;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    tape.q = Mat<T>(x_q.rows, d);
    tape.k = Mat<T>(x_kv.rows, d);
    tape.v = Mat<T>(x_kv.rows, d);
    matmul_nn(tape.q, x_q, p.wq);
    matmul_nn(tape.k, x_kv, p.wk);
    matmul_nn(tape.v, x_kv, p.wv);

    tape.probs = Mat<T>(b_q * h * s_q, s_k);
    const bool use_drop = mode == Mode::train && drop_rate > 0.0;
    if (use_drop) tape.drop.assign(tape.probs.size(), 1);
    const T keep_scale = static_cast<T>(use_drop ? 1.0 / (1.0 - drop_rate) : 1.0);

    tape.ctx = Mat<T>(x_q.rows, d);
    Mat<T> scores(s_q, s_k);
    Mat<T> dropped(s_q, s_k);
    for (std::size_t b = 0; b < b_q; ++b) {
        const std::size_t m = mem_index[b];
        for (std::size_t hh = 0; hh < h; ++hh) {
            auto qb = head_block(tape.q, b * s_q, s_q, hh * dh, dh);
            auto kb = head_block(tape.k, m * s_k, s_k, hh * dh, dh);
            auto vb = head_block(tape.v, m * s_k, s_k, hh * dh, dh);
            as_eigen(scores).noalias() = qb * kb.transpose();
            for (std::size_t i = 0; i < s_q; ++i) {
                T* sr = scores.row(i);
                double maxv = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < s_k; ++j) {
                    const bool masked = !key_valid[m * s_k + j] || (causal && j > i);
                    if (masked) {
                        sr[j] = T(0);
                    } else {
                        sr[j] *= inv_sqrt_dh;
                        maxv = std::max(maxv, static_cast<double>(sr[j]));
                    }
                }
                double denom = 0;
                for (std::size_t j = 0; j < s_k; ++j) {
                    const bool masked = !key_valid[m * s_k + j] || (causal && j > i);
                    if (masked) {
                        sr[j] = T(0);
                    } else {
                        sr[j] = static_cast<T>(std::exp(static_cast<double>(sr[j]) - maxv));
                        denom += sr[j];
                    }
                }
                const T inv = static_cast<T>(1.0 / denom);
                const std::size_t prow = (b * h + hh) * s_q + i;
                T* pr = tape.probs.row(prow);
                T* dr = dropped.row(i);
                for (std::size_t j = 0; j < s_k; ++j) {
                    pr[j] = sr[j] * inv;
                    dr[j] = pr[j];
                }
                if (use_drop) {
                    std::uint8_t* mk = tape.drop.data() + prow * s_k;
                    for (std::size_t j = 0; j < s_k; ++j) {
                        if (rng->bernoulli(drop_rate)) {
                            mk[j] = 0;
                            dr[j] = T(0);
                        } else {
                            dr[j] *= keep_scale;
                        }
                    }
                }
            }
            auto cb = head_block(tape.ctx, b * s_q, s_q, hh * dh, dh);
            cb.noalias() = as_eigen(dropped) * vb;
        }
    }
    Mat<T> out(x_q.rows, d);
    matmul_nn(out, tape.ctx, p.wo);
    return out;
}

template <typename T>
void attention_backward(const typename Parameters<T>::Attention& p, typename Parameters<T>::Attention& g, const Mat<T>& x_q,
                        const Mat<T>& x_kv, const Mat<T>& dout, std::size_t b_q, std::size_t s_q, std::size_t s_k,
                        const std::vector<std::size_t>& mem_index, int n_heads, double drop_rate, const AttnTape<T>& tape,
                        Mat<T>& dx_q_accum, Mat<T>& dx_kv_accum) {
    const std::size_t d = x_q.cols;
    const std::size_t h = static_cast<std::size_t>(n_heads);
    const std::size_t dh = d / h;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool has_drop = !tape.drop.empty();
    const T keep_scale = static_cast<T>(has_drop ? 1.0 / (1.0 - drop_rate) : 1.0);

    matmul_tn(g.wo, tape.ctx, dout, true);  // dWo += ctx^T * dout
    Mat<T> dctx(dout.rows, d);
    matmul_nt(dctx, dout, p.wo);

    Mat<T> dq(tape.q.rows, d);
    Mat<T> dk(tape.k.rows, d);
    Mat<T> dv(tape.v.rows, d);
    Mat<T> dprobs(s_q, s_k);
    Mat<T> dscores(s_q, s_k);
    Mat<T> dropped(s_q, s_k);
    for (std::size_t b = 0; b < b_q; ++b) {
        const std::size_t m = mem_index[b];
        for (std::size_t hh = 0; hh < h; ++hh) {
            auto qb = head_block(tape.q, b * s_q, s_q, hh * dh, dh);
            auto kb = head_block(tape.k, m * s_k, s_k, hh * dh, dh);
            auto vb = head_block(tape.v, m * s_k, s_k, hh * dh, dh);
            auto dcb = head_block(dctx, b * s_q, s_q, hh * dh, dh);
            const std::size_t prow0 = (b * h + hh) * s_q;

            // reconstruct post-dropout probabilities for the dV path
            for (std::size_t i = 0; i < s_q; ++i) {
                const T* pr = tape.probs.row(prow0 + i);
                T* dr = dropped.row(i);
                if (has_drop) {
                    const std::uint8_t* mk = tape.drop.data() + (prow0 + i) * s_k;
                    for (std::size_t j = 0; j < s_k; ++j) dr[j] = mk[j] ? pr[j] * keep_scale : T(0);
                } else {
                    for (std::size_t j = 0; j < s_k; ++j) dr[j] = pr[j];
                }
            }
            auto dvb = head_block(dv, m * s_k, s_k, hh * dh, dh);
            dvb.noalias() += as_eigen(dropped).transpose() * dcb;
            as_eigen(dprobs).noalias() = dcb * vb.transpose();
            if (has_drop) {
                for (std::size_t i = 0; i < s_q; ++i) {
                    const std::uint8_t* mk = tape.drop.data() + (prow0 + i) * s_k;
                    T* dpr = dprobs.row(i);
                    for (std::size_t j = 0; j < s_k; ++j) dpr[j] = mk[j] ? dpr[j] * keep_scale : T(0);
                }
            }
            // softmax backward: dS = P .* (dP - sum(dP .* P))
            for (std::size_t i = 0; i < s_q; ++i) {
                const T* pr = tape.probs.row(prow0 + i);
                const T* dpr = dprobs.row(i);
                double dot = 0;
                for (std::size_t j = 0; j < s_k; ++j) dot += static_cast<double>(dpr[j]) * pr[j];
                T* dsr = dscores.row(i);
                for (std::size_t j = 0; j < s_k; ++j)
                    dsr[j] = static_cast<T>(pr[j] * (static_cast<double>(dpr[j]) - dot) * inv_sqrt_dh);
            }
            auto dqb = head_block(dq, b * s_q, s_q, hh * dh, dh);
            dqb.noalias() = as_eigen(dscores) * kb;
            auto dkb = head_block(dk, m * s_k, s_k, hh * dh, dh);
            dkb.noalias() += as_eigen(dscores).transpose() * qb;
        }
    }
    matmul_tn(g.wq, x_q, dq, true);
    matmul_tn(g.wk, x_kv, dk, true);
    matmul_tn(g.wv, x_kv, dv, true);
    matmul_nt(dx_q_accum, dq, p.wq, true);
    matmul_nt(dx_kv_accum, dk, p.wk, true);
    matmul_nt(dx_kv_accum, dv, p.wv, true);
}

template <typename T>
struct EncLayerTape {
    LnTape<T> ln1;
    Mat<T> ln1_out;
    AttnTape<T> attn;
    LnTape<T> ln2;
    Mat<T> ln2_out;
    FfnTape<T> ffn;
};

template <typename T>
struct DecLayerTape {
    LnTape<T> ln1;
    Mat<T> ln1_out;
    AttnTape<T> self_attn;
    LnTape<T> ln2;
    Mat<T> ln2_out;
    AttnTape<T> cross_attn;
    LnTape<T> ln3;
    Mat<T> ln3_out;
    FfnTape<T> ffn;
};

}  // namespace nn

template <typename T>
struct EncoderOut {
    std::size_t batch = 0, seq = 0;
    Mat<T> h;                             // [B*S, d], after the final layer norm
    std::vector<std::uint8_t> key_valid;  // non-PAD mask
    std::vector<nn::EncLayerTape<T>> layer_tapes;
    nn::LnTape<T> final_ln;
};

template <typename T>
struct DecodeOut {
    std::size_t batch = 0, seq = 0;
    TokenMatrix input;  // shifted decoder input ids
    std::vector<std::size_t> mem_index;
    Mat<T> logits;      // [B*S, vocab]
    Mat<T> final_out;   // [B*S, d], input of the output projection
    std::vector<nn::DecLayerTape<T>> layer_tapes;
    nn::LnTape<T> final_ln;
};

namespace nn {

template <typename T>
Mat<T> embed(const Parameters<T>& p, const TokenMatrix& ids, const Mat<T>& pos) {
    const std::size_t d = static_cast<std::size_t>(p.config.d_model);
    if (ids.cols > pos.rows) throw std::runtime_error("embed: sequence exceeds max_positions");
    Mat<T> h(ids.rows * ids.cols, d);
    for (std::size_t r = 0; r < ids.rows; ++r) {
        for (std::size_t c = 0; c < ids.cols; ++c) {
            const int id = ids.at(r, c);
            if (id < 0 || id >= p.config.vocab_size) throw std::runtime_error("embed: id out of vocabulary range");
            const T* e = p.tok_emb.row(static_cast<std::size_t>(id));
            const T* q = pos.row(c);
            T* out = h.row(r * ids.cols + c);
            for (std::size_t j = 0; j < d; ++j) out[j] = e[j] + q[j];
        }
    }
    return h;
}

}  // namespace nn

/// Encoder pass: pre-norm self-attention + feed-forward blocks with residuals,
/// padding positions masked out of attention, final layer norm.
template <typename T>
EncoderOut<T> encode(const Parameters<T>& p, const TokenMatrix& enc_ids, Mode mode = Mode::eval, Rng* rng = nullptr) {
    const auto& cfg = p.config;
    EncoderOut<T> out;
    out.batch = enc_ids.rows;
    out.seq = enc_ids.cols;
    out.key_valid.assign(enc_ids.ids.size(), 0);
    for (std::size_t i = 0; i < enc_ids.ids.size(); ++i) out.key_valid[i] = enc_ids.ids[i] != kPadId;

    Mat<T> h = nn::embed(p, enc_ids, p.enc_pos);
    std::vector<std::size_t> identity(out.batch);
    for (std::size_t b = 0; b < out.batch; ++b) identity[b] = b;

    out.layer_tapes.resize(p.enc.size());
    for (std::size_t l = 0; l < p.enc.size(); ++l) {
        auto& L = p.enc[l];
        auto& tape = out.layer_tapes[l];
        tape.ln1_out = nn::ln_forward(h, L.ln1_gain, tape.ln1);
        Mat<T> attn = nn::attention_forward<T>(L.attn, tape.ln1_out, tape.ln1_out, out.batch, out.seq, out.seq, identity,
                                               out.key_valid, false, cfg.n_heads, mode, cfg.dropout_rate, rng, tape.attn);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += attn.data[i];
        tape.ln2_out = nn::ln_forward(h, L.ln2_gain, tape.ln2);
        Mat<T> ffn = nn::ffn_forward<T>(L.ffn, tape.ln2_out, mode, cfg.dropout_rate, rng, tape.ffn);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += ffn.data[i];
    }
    out.h = nn::ln_forward(h, p.enc_final_gain, out.final_ln);
    return out;
}

/// Decoder pass over a shifted input batch: causal self-attention, cross
/// attention over the encoder output (selected per row via mem_index),
/// feed-forward, final layer norm, then logits through the tied embedding.
template <typename T>
DecodeOut<T> decode(const Parameters<T>& p, const EncoderOut<T>& enc, const std::vector<std::size_t>& mem_index,
                    const TokenMatrix& dec_input, const std::vector<std::uint8_t>& dec_valid, Mode mode = Mode::eval,
                    Rng* rng = nullptr) {
    const auto& cfg = p.config;
    if (mem_index.size() != dec_input.rows) throw std::runtime_error("decode: mem_index size mismatch");
    for (auto m : mem_index)
        if (m >= enc.batch) throw std::runtime_error("decode: mem_index out of range");

    DecodeOut<T> out;
    out.batch = dec_input.rows;
    out.seq = dec_input.cols;
    out.input = dec_input;
    out.mem_index = mem_index;

    Mat<T> h = nn::embed(p, dec_input, p.dec_pos);
    std::vector<std::size_t> identity(out.batch);
    for (std::size_t b = 0; b < out.batch; ++b) identity[b] = b;

    out.layer_tapes.resize(p.dec.size());
    for (std::size_t l = 0; l < p.dec.size(); ++l) {
        auto& L = p.dec[l];
        auto& tape = out.layer_tapes[l];
        tape.ln1_out = nn::ln_forward(h, L.ln1_gain, tape.ln1);
        Mat<T> self = nn::attention_forward<T>(L.self_attn, tape.ln1_out, tape.ln1_out, out.batch, out.seq, out.seq, identity,
                                               dec_valid, true, cfg.n_heads, mode, cfg.dropout_rate, rng, tape.self_attn);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += self.data[i];
        tape.ln2_out = nn::ln_forward(h, L.ln2_gain, tape.ln2);
        Mat<T> cross = nn::attention_forward<T>(L.cross_attn, tape.ln2_out, enc.h, out.batch, out.seq, enc.seq, mem_index,
                                                enc.key_valid, false, cfg.n_heads, mode, cfg.dropout_rate, rng, tape.cross_attn);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += cross.data[i];
        tape.ln3_out = nn::ln_forward(h, L.ln3_gain, tape.ln3);
        Mat<T> ffn = nn::ffn_forward<T>(L.ffn, tape.ln3_out, mode, cfg.dropout_rate, rng, tape.ffn);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += ffn.data[i];
    }
    out.final_out = nn::ln_forward(h, p.dec_final_gain, out.final_ln);
    out.logits = Mat<T>(out.final_out.rows, static_cast<std::size_t>(cfg.vocab_size));
    matmul_nt(out.logits, out.final_out, p.tok_emb);
    return out;
}

/// Decoder input: targets shifted right with PAD (the start token) prepended.
inline TokenMatrix shift_right(const TokenMatrix& target) {
    TokenMatrix input(target.rows, target.cols);
    for (std::size_t r = 0; r < target.rows; ++r) {
        input.at(r, 0) = kPadId;
        for (std::size_t c = 1; c < target.cols; ++c) input.at(r, c) = target.at(r, c - 1);
    }
    return input;
}

/// Valid decoder positions: position j participates iff target[j] is non-PAD
/// (the shifted input at j feeds the prediction of target[j]).
inline std::vector<std::uint8_t> decoder_valid(const TokenMatrix& target) {
    std::vector<std::uint8_t> valid(target.ids.size(), 0);
    for (std::size_t i = 0; i < target.ids.size(); ++i) valid[i] = target.ids[i] != kPadId;
    return valid;
}

template <typename T>
struct ForwardOut {
    EncoderOut<T> enc;
    DecodeOut<T> dec;
};

template <typename T>
ForwardOut<T> forward(const Parameters<T>& p, const Batch& batch, Mode mode = Mode::eval, Rng* rng = nullptr) {
    batch.validate(p.config);
    ForwardOut<T> out;
    out.enc = encode(p, batch.encoder, mode, rng);
    std::vector<std::size_t> identity(batch.encoder.rows);
    for (std::size_t b = 0; b < identity.size(); ++b) identity[b] = b;
    out.dec = decode(p, out.enc, identity, shift_right(batch.target), decoder_valid(batch.target), mode, rng);
    return out;
}

/// Mean cross-entropy over non-PAD target tokens (log-space, stable).
template <typename T>
double loss(const Mat<T>& logits, const TokenMatrix& target) {
    if (logits.rows != target.rows * target.cols) throw std::runtime_error("loss: logits/target shape mismatch");
    std::size_t count = 0;
    double total = 0;
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const int y = target.ids[r];
        if (y == kPadId) continue;
        const T* lr = logits.row(r);
        double maxv = lr[0];
        for (std::size_t c = 1; c < logits.cols; ++c) maxv = std::max(maxv, static_cast<double>(lr[c]));
        double denom = 0;
        for (std::size_t c = 0; c < logits.cols; ++c) denom += std::exp(static_cast<double>(lr[c]) - maxv);
        total += std::log(denom) + maxv - static_cast<double>(lr[static_cast<std::size_t>(y)]);
        ++count;
    }
    if (count == 0) throw std::runtime_error("loss: no non-PAD target tokens");
    return total / static_cast<double>(count);
}

/// d(loss)/d(logits), scaled by loss_scale.
template <typename T>
Mat<T> loss_grad(const Mat<T>& logits, const TokenMatrix& target, double loss_scale = 1.0) {
    std::size_t count = 0;
    for (int y : target.ids)
        if (y != kPadId) ++count;
    if (count == 0) throw std::runtime_error("loss: no non-PAD target tokens");
    const double w = loss_scale / static_cast<double>(count);
    Mat<T> d(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const int y = target.ids[r];
        if (y == kPadId) continue;
        const T* lr = logits.row(r);
        double maxv = lr[0];
        for (std::size_t c = 1; c < logits.cols; ++c) maxv = std::max(maxv, static_cast<double>(lr[c]));
        double denom = 0;
        for (std::size_t c = 0; c < logits.cols; ++c) denom += std::exp(static_cast<double>(lr[c]) - maxv);
        T* dr = d.row(r);
        for (std::size_t c = 0; c < logits.cols; ++c)
            dr[c] = static_cast<T>(std::exp(static_cast<double>(lr[c]) - maxv) / denom * w);
        dr[static_cast<std::size_t>(y)] -= static_cast<T>(w);
    }
    return d;
}

namespace nn {

template <typename T>
void embed_backward(Parameters<T>& g, const TokenMatrix& ids, Mat<T>& pos_grad, const Mat<T>& dh) {
    const std::size_t d = dh.cols;
    for (std::size_t r = 0; r < ids.rows; ++r) {
        for (std::size_t c = 0; c < ids.cols; ++c) {
            const T* src = dh.row(r * ids.cols + c);
            T* e = g.tok_emb.row(static_cast<std::size_t>(ids.at(r, c)));
            T* q = pos_grad.row(c);
            for (std::size_t j = 0; j < d; ++j) {
                e[j] += src[j];
                q[j] += src[j];
            }
        }
    }
}

}  // namespace nn

/// Reverse-mode gradient of loss(forward(params, batch)) w.r.t. every
/// parameter. With mode == train the tape's dropout masks are reused, so the
/// gradient matches the stochastic forward exactly.
template <typename T>
Parameters<T> backward(const Parameters<T>& p, const Batch& batch, const ForwardOut<T>& f, const Mat<T>& d_logits) {
    const auto& cfg = p.config;
    auto g = Parameters<T>::shaped(cfg);

    // output projection (tied embedding)
    Mat<T> dh(f.dec.final_out.rows, f.dec.final_out.cols);
    matmul_nn(dh, d_logits, p.tok_emb);
    matmul_tn(g.tok_emb, d_logits, f.dec.final_out, true);

    // decoder final layer norm
    Mat<T> dx(dh.rows, dh.cols);
    nn::ln_backward(dh, p.dec_final_gain, f.dec.final_ln, dx, g.dec_final_gain);
    dh = std::move(dx);

    Mat<T> d_enc_out(f.enc.h.rows, f.enc.h.cols);
    const std::size_t b = f.dec.batch, sd = f.dec.seq, se = f.enc.seq;
    std::vector<std::size_t> identity(b);
    for (std::size_t i = 0; i < b; ++i) identity[i] = i;

    for (std::size_t li = p.dec.size(); li-- > 0;) {
        const auto& L = p.dec[li];
        auto& G = g.dec[li];
        const auto& tape = f.dec.layer_tapes[li];

        Mat<T> d_ln3(dh.rows, dh.cols);
        nn::ffn_backward<T>(L.ffn, G.ffn, tape.ln3_out, dh, cfg.dropout_rate, tape.ffn, d_ln3);
        nn::ln_backward(d_ln3, L.ln3_gain, tape.ln3, dh, G.ln3_gain);

        Mat<T> d_ln2(dh.rows, dh.cols);
        nn::attention_backward<T>(L.cross_attn, G.cross_attn, tape.ln2_out, f.enc.h, dh, b, sd, se, f.dec.mem_index,
                                  cfg.n_heads, cfg.dropout_rate, tape.cross_attn, d_ln2, d_enc_out);
        nn::ln_backward(d_ln2, L.ln2_gain, tape.ln2, dh, G.ln2_gain);

        Mat<T> d_ln1(dh.rows, dh.cols);
        nn::attention_backward<T>(L.self_attn, G.self_attn, tape.ln1_out, tape.ln1_out, dh, b, sd, sd, identity, cfg.n_heads,
                                  cfg.dropout_rate, tape.self_attn, d_ln1, d_ln1);
        nn::ln_backward(d_ln1, L.ln1_gain, tape.ln1, dh, G.ln1_gain);
    }
    nn::embed_backward(g, f.dec.input, g.dec_pos, dh);

    // encoder
    Mat<T> deh(d_enc_out.rows, d_enc_out.cols);
    nn::ln_backward(d_enc_out, p.enc_final_gain, f.enc.final_ln, deh, g.enc_final_gain);

    for (std::size_t li = p.enc.size(); li-- > 0;) {
        const auto& L = p.enc[li];
        auto& G = g.enc[li];
        const auto& tape = f.enc.layer_tapes[li];

        Mat<T> d_ln2(deh.rows, deh.cols);
        nn::ffn_backward<T>(L.ffn, G.ffn, tape.ln2_out, deh, cfg.dropout_rate, tape.ffn, d_ln2);
        nn::ln_backward(d_ln2, L.ln2_gain, tape.ln2, deh, G.ln2_gain);

        Mat<T> d_ln1(deh.rows, deh.cols);
        nn::attention_backward<T>(L.attn, G.attn, tape.ln1_out, tape.ln1_out, deh, b, se, se, identity, cfg.n_heads,
                                  cfg.dropout_rate, tape.attn, d_ln1, d_ln1);
        nn::ln_backward(d_ln1, L.ln1_gain, tape.ln1, deh, G.ln1_gain);
    }
    nn::embed_backward(g, batch.encoder, g.enc_pos, deh);
    return g;
}

template <typename T>
struct GradResult {
    double loss = 0;
    Parameters<T> grads;
};

/// loss + exact gradient in one call. Non-finite values abort with the
/// offending tensor named.
template <typename T>
GradResult<T> grad(const Parameters<T>& p, const Batch& batch, Mode mode = Mode::eval, Rng* rng = nullptr,
                   double loss_scale = 1.0) {
    ForwardOut<T> f = forward(p, batch, mode, rng);
    GradResult<T> out;
    out.loss = loss(f.dec.logits, batch.target) * loss_scale;
    if (!std::isfinite(out.loss)) throw std::runtime_error("grad: non-finite loss");
    Mat<T> dl = loss_grad(f.dec.logits, batch.target, loss_scale);
    out.grads = backward(p, batch, f, dl);
    for (const auto& [name, m] : out.grads.tensors()) {
        for (const T x : m->data) {
            if (!std::isfinite(static_cast<double>(x))) throw std::runtime_error("grad: non-finite gradient in " + name);
        }
    }
    return out;
}

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
    std::size_t step = 0;
    Parameters<T> m;
    Parameters<T> v;

    static AdamWState init(const ModelConfig& cfg) {
        return {0, Parameters<T>::shaped(cfg), Parameters<T>::shaped(cfg)};
    }
};

/// Decoupled-weight-decay adaptive-moment update with bias correction.
template <typename T>
void adamw_step(Parameters<T>& p, const Parameters<T>& g, AdamWState<T>& s, const AdamWConfig& hp) {
    ++s.step;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(s.step));
    auto pt = p.tensors();
    auto gt = g.tensors();
    auto mt = s.m.tensors();
    auto vt = s.v.tensors();
    for (std::size_t t = 0; t < pt.size(); ++t) {
        Mat<T>& w = *pt[t].second;
        const Mat<T>& gr = *gt[t].second;
        Mat<T>& m = *mt[t].second;
        Mat<T>& v = *vt[t].second;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = gr.data[i];
            const double mi = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
            const double vi = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + hp.eps) + hp.weight_decay * w.data[i];
            w.data[i] = static_cast<T>(w.data[i] - hp.lr * update);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "B2T1", u32 little-endian header length, UTF-8 JSON
// header {format_version, config, tensors:[{name, rows, cols}]}, then the raw
// little-endian 32-bit floats concatenated in manifest order.
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const Parameters<T>& p, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = p.config.to_json();
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, m] : p.tensors())
        header["tensors"].push_back({{"name", name}, {"rows", m->rows}, {"cols", m->cols}});
    const std::string hs = header.dump();
    out.write("B2T1", 4);
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> buf;
    for (const auto& [name, m] : p.tensors()) {
        buf.resize(m->size());
        for (std::size_t i = 0; i < m->size(); ++i) buf[i] = static_cast<float>(m->data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T>
Parameters<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot read " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "B2T1", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    std::uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), 4)) throw std::runtime_error("load_checkpoint: truncated header length");
    std::string hs(len, '\0');
    if (!in.read(hs.data(), len)) throw std::runtime_error("load_checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("load_checkpoint: corrupt header JSON");
    if (header.at("format_version").get<int>() != 1) throw std::runtime_error("load_checkpoint: unsupported format version");
    ModelConfig cfg = ModelConfig::from_json(header.at("config"));
    auto p = Parameters<T>::shaped(cfg);
    auto manifest = header.at("tensors");
    auto tensors = p.tensors();
    if (manifest.size() != tensors.size()) throw std::runtime_error("load_checkpoint: tensor manifest size mismatch");
    std::vector<float> buf;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        auto& [name, m] = tensors[t];
        const auto& entry = manifest[t];
        if (entry.at("name").get<std::string>() != name || entry.at("rows").get<std::size_t>() != m->rows ||
            entry.at("cols").get<std::size_t>() != m->cols)
            throw std::runtime_error("load_checkpoint: shape mismatch for tensor " + name);
        buf.resize(m->size());
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
            throw std::runtime_error("load_checkpoint: truncated tensor data at " + name);
        for (std::size_t i = 0; i < m->size(); ++i) m->data[i] = static_cast<T>(buf[i]);
    }
    return p;
}

}  // namespace textrec
