// SPDX-License-Identifier: Apache-2.0

#include "occmove/toy_backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "occmove/io.hpp"
#include "occmove/seed.hpp"

namespace occmove {

namespace {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

constexpr int kTimeDims = 8;
constexpr int kBos = 0;
constexpr int kEos = 1;
constexpr std::size_t kWordPiece = 8;

struct AttnWeights {
    Matrix Wq, Wk, Wv, Wo;
};

Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

Vector time_embedding(int timestep) {
    Vector e(kTimeDims);
    for (int j = 0; j < kTimeDims / 2; ++j) {
        const double w = std::numbers::pi / 1000.0 * std::pow(4.0, j);
        e(2 * j) = std::sin(timestep * w);
        e(2 * j + 1) = std::cos(timestep * w);
    }
    return e;
}

// Rows are pooled cells in row-major order, columns the latent channels.
Matrix tensor_rows(const Tensor& t) {
    const int n = t.height() * t.width();
    Matrix m(n, t.channels());
    for (int c = 0; c < t.channels(); ++c)
        for (int i = 0; i < n; ++i) m(i, c) = t.plane(c)[i];
    return m;
}

const char* const kProjNames[] = {"to_q", "to_k", "to_v", "to_out"};

struct AttnState {
    AttnWeights w;
    Matrix Xq, Xkv, Q, K, V, A, O;
    bool kv_replaced = false;
    double scale = 1.0;
};

AttnState attention_forward(const AttnWeights& w, const Matrix& Xq, const Matrix& Xkv, const LayerKV* replaced,
                            const BoolArray* allowed) {
    AttnState s;
    s.w = w;
    s.Xq = Xq;
    s.Xkv = Xkv;
    s.scale = 1.0 / std::sqrt(static_cast<double>(w.Wq.rows()));
    s.Q = Xq * w.Wq.transpose();
    if (replaced) {
        s.K = replaced->keys;
        s.V = replaced->values;
        s.kv_replaced = true;
    } else {
        s.K = Xkv * w.Wk.transpose();
        s.V = Xkv * w.Wv.transpose();
    }
    const Matrix logits = (s.Q * s.K.transpose()) * s.scale;
    s.A = allowed ? masked_softmax(logits, *allowed) : softmax_rows(logits);
    s.O = s.A * s.V;
    return s;
}

Matrix attention_output(const AttnState& s) { return s.O * s.w.Wo.transpose(); }

struct AttnGrad {
    Matrix dWq, dWk, dWv, dWo;
    Matrix dXq;
};

AttnGrad attention_backward(const AttnState& s, const Matrix& d_out) {
    AttnGrad g;
    g.dWo = d_out.transpose() * s.O;
    const Matrix dO = d_out * s.w.Wo;
    const Matrix dA = dO * s.V.transpose();
    const Matrix dV = s.A.transpose() * dO;
    const Vector row_dot = (dA.array() * s.A.array()).rowwise().sum();
    const Matrix d_logits = (s.A.array() * (dA.colwise() - row_dot).array()).matrix() * s.scale;
    const Matrix dQ = d_logits * s.K;
    g.dWq = dQ.transpose() * s.Xq;
    g.dXq = dQ * s.w.Wq;
    if (s.kv_replaced) {
        g.dWk = Matrix::Zero(s.w.Wk.rows(), s.w.Wk.cols());
        g.dWv = Matrix::Zero(s.w.Wv.rows(), s.w.Wv.cols());
    } else {
        const Matrix dK = d_logits.transpose() * s.Q;
        g.dWk = dK.transpose() * s.Xkv;
        g.dWv = dV.transpose() * s.Xkv;
    }
    return g;
}

Matrix effective(const Matrix& base, const LoRAAdapter* lora, const std::string& target) {
    if (!lora || lora->scale == 0.0) return base;
    const LoRADelta* d = lora->find(target);
    if (!d) return base;
    OCCMOVE_CHECK(d->up.rows() == base.rows() && d->down.cols() == base.cols() && d->up.cols() == d->down.rows(),
                  shape, "LoRA delta for ", target, " does not match the projection shape");
    return base + lora->scale * (d->up * d->down);
}

AttnWeights effective(const AttnWeights& base, const LoRAAdapter* lora, const std::string& prefix) {
    return {effective(base.Wq, lora, prefix + ".to_q"), effective(base.Wk, lora, prefix + ".to_k"),
            effective(base.Wv, lora, prefix + ".to_v"), effective(base.Wo, lora, prefix + ".to_out")};
}

}  // namespace

struct ToyBackbone::Level {
    std::string id;
    int factor = 2;
    bool decoder = false;
    Matrix W_in;  // d x (channels + time)
    Vector b_in;
    AttnWeights self_attn;
    AttnWeights cross_attn;
    Matrix W_r;  // channels x d
};

struct LevelState {
    int side = 0;
    Matrix h, h2, r;
    AttnState a1, a2;
};

struct ToyBackbone::Forward {
    Tensor eps;
    std::vector<LevelState> levels;
    AttentionSnapshot snapshot;
    KVStore kv;
    HookReport report;
};

ToyBackbone::ToyBackbone(ToyBackboneOptions options) : m_options(options), m_codec(options.codec_factor) {
    OCCMOVE_CHECK(options.codec_factor >= 1, config, "toy codec factor must be >= 1");
    OCCMOVE_CHECK(options.latent_side % 4 == 0, config, "toy latent side must be divisible by 4");
    m_info.name = "toy";
    m_info.latent_channels = 4;
    m_info.latent_downsample = options.codec_factor;
    m_info.native_side = options.latent_side * options.codec_factor;
    m_info.text_token_limit = options.token_limit;
    m_info.train_steps = 1000;
    m_train_alphas = NoiseSchedule::scaled_linear_alphas(1000);

    const int d = options.head_dim;
    const int dt = options.text_dim;
    const int c = m_info.latent_channels;
    const struct {
        const char* id;
        int factor;
        bool decoder;
    } specs[] = {{"down", 2, false}, {"mid", 4, false}, {"up", 2, true}};
    for (const auto& spec : specs) {
        std::mt19937_64 rng(derive_seed(options.seed, spec.id));
        Level level;
        level.id = spec.id;
        level.factor = spec.factor;
        level.decoder = spec.decoder;
        level.W_in = gaussian_matrix(rng, d, c + kTimeDims, 2.0 / std::sqrt(double(c + kTimeDims)));
        level.b_in = gaussian_matrix(rng, d, 1, 0.1);
        level.self_attn = {gaussian_matrix(rng, d, d, 1.5 / std::sqrt(double(d))),
                           gaussian_matrix(rng, d, d, 1.5 / std::sqrt(double(d))),
                           gaussian_matrix(rng, d, d, 1.0 / std::sqrt(double(d))),
                           gaussian_matrix(rng, d, d, 1.0 / std::sqrt(double(d)))};
        level.cross_attn = {gaussian_matrix(rng, d, d, 1.5 / std::sqrt(double(d))),
                            gaussian_matrix(rng, d, dt, 1.5 / std::sqrt(double(dt))),
                            gaussian_matrix(rng, d, dt, 1.0 / std::sqrt(double(dt))),
                            gaussian_matrix(rng, d, d, 1.0 / std::sqrt(double(d)))};
        level.W_r = gaussian_matrix(rng, c, d, 1.0 / std::sqrt(double(d)));
        m_levels.push_back(std::move(level));
    }

    std::mt19937_64 rng(derive_seed(options.seed, "base"));
    m_cond_proj = gaussian_matrix(rng, c, dt, 1.0 / std::sqrt(double(dt)));
    std::uniform_real_distribution<double> freq(0.5, 2.0), phase(0.0, 2 * std::numbers::pi), rate(1.0, 4.0);
    m_base_freq.resize(c, 4);
    for (int ch = 0; ch < c; ++ch) {
        m_base_freq(ch, 0) = freq(rng);
        m_base_freq(ch, 1) = freq(rng);
        m_base_freq(ch, 2) = phase(rng);
        m_base_freq(ch, 3) = rate(rng);
    }

    std::string fp = "toy|seed=" + std::to_string(options.seed) + "|codec=" + std::to_string(options.codec_factor) +
                     "|side=" + std::to_string(options.latent_side) + "|d=" + std::to_string(d) +
                     "|gain=" + std::to_string(options.response_gain);
    m_info.fingerprint = io::fingerprint(fp);
}

ToyBackbone::~ToyBackbone() = default;

std::vector<LayerInfo> ToyBackbone::layers() const {
    std::vector<LayerInfo> out;
    for (const auto& l : m_levels) out.push_back({l.id, l.factor, l.decoder, m_options.head_dim});
    return out;
}

std::vector<ProjectionInfo> ToyBackbone::projections() const {
    const int d = m_options.head_dim;
    const int dt = m_options.text_dim;
    std::vector<ProjectionInfo> out;
    for (const auto& l : m_levels) {
        for (const char* p : kProjNames) out.push_back({l.id + ".attn1." + p, d, d});
        for (const char* p : kProjNames) {
            const bool text_side = std::string(p) == "to_k" || std::string(p) == "to_v";
            out.push_back({l.id + ".attn2." + p, text_side ? dt : d, d});
        }
    }
    return out;
}

Matrix ToyBackbone::token_vector(int id, int position) const {
    const int dt = m_options.text_dim;
    std::mt19937_64 rng(derive_seed(m_options.seed ^ 0x7e57u, static_cast<std::uint64_t>(id)));
    Matrix v = gaussian_matrix(rng, 1, dt, 1.0);
    for (int k = 0; k < dt; ++k) {
        const double w = 1.0 / std::pow(100.0, static_cast<double>(k) / dt);
        v(0, k) += 0.1 * ((k % 2 == 0) ? std::sin(position * w) : std::cos(position * w));
    }
    return v;
}

TextEmbedding ToyBackbone::embed_words(const std::string& prompt, const std::vector<std::string>& words) const {
    TextEmbedding e;
    e.prompt = prompt;
    e.tokens.push_back(kBos);
    const int limit = m_options.token_limit;
    for (const auto& w : words) {
        std::vector<int> pieces;
        for (std::size_t i = 0; i < w.size(); i += kWordPiece) {
            const auto piece = w.substr(i, kWordPiece) + (i + kWordPiece < w.size() ? "@@" : "");
            const auto h = io::fingerprint(piece);
            pieces.push_back(2 + static_cast<int>(std::stoull(h.substr(8), nullptr, 16) % 49406));
        }
        // Room is left for the end token.
        if (static_cast<int>(e.tokens.size() + pieces.size()) > limit - 1) {
            e.truncated = true;
            e.dropped_words.push_back(w);
            continue;
        }
        if (e.truncated) {
            e.dropped_words.push_back(w);
            continue;
        }
        const int begin = static_cast<int>(e.tokens.size());
        e.tokens.insert(e.tokens.end(), pieces.begin(), pieces.end());
        e.token_spans.push_back({w, {begin, static_cast<int>(e.tokens.size())}});
    }
    e.tokens.push_back(kEos);
    e.embedding.resize(static_cast<Eigen::Index>(e.tokens.size()), m_options.text_dim);
    for (std::size_t i = 0; i < e.tokens.size(); ++i)
        e.embedding.row(static_cast<Eigen::Index>(i)) = token_vector(e.tokens[i], static_cast<int>(i));
    return e;
}

TextEmbedding ToyBackbone::embed_prompt(std::string_view prompt) const {
    const auto words = split_words(prompt);
    OCCMOVE_CHECK(!words.empty(), input, "prompt is empty");
    return embed_words(std::string(prompt), words);
}

TextEmbedding ToyBackbone::null_embedding() const { return embed_words("", {}); }

ToyBackbone::Forward ToyBackbone::run(const Tensor& z, int timestep, const TextEmbedding& cond, const HookSet& hooks,
                                      bool keep) const {
    OCCMOVE_CHECK(z.channels() == m_info.latent_channels, shape, "latent has ", z.channels(), " channels, expected ",
                  m_info.latent_channels);
    OCCMOVE_CHECK(z.height() % 4 == 0 && z.width() % 4 == 0 && z.height() == z.width(), dimension,
                  "toy backbone needs square latents with side divisible by 4, got ", z.height(), "x", z.width());
    OCCMOVE_CHECK(timestep >= 0 && timestep < m_info.train_steps, range, "timestep ", timestep, " outside 0..",
                  m_info.train_steps - 1);
    OCCMOVE_CHECK(cond.embedding.cols() == m_options.text_dim, shape, "text embedding width mismatch");

    for (const auto& dir : hooks.directives) {
        for (const auto& id : dir.layers) {
            const bool known = std::any_of(m_levels.begin(), m_levels.end(), [&](const Level& l) { return l.id == id; });
            OCCMOVE_CHECK(known, config, "hook references nonexistent layer '", id, "'");
        }
    }

    Forward fw;
    const int H = z.height();
    const int W = z.width();
    const int C = z.channels();
    const double gain = m_options.response_gain;
    const Vector temb = time_embedding(timestep);

    // Base field: smooth in position and time, shifted per channel by the prompt.
    fw.eps = Tensor(C, H, W);
    const Vector mean_tok = cond.embedding.colwise().mean().transpose();
    const Vector cond_shift = (m_cond_proj * mean_tok).array().tanh() * 0.5;
    for (int c = 0; c < C; ++c) {
        const double fy = m_base_freq(c, 0), fx = m_base_freq(c, 1), ph = m_base_freq(c, 2), rt = m_base_freq(c, 3);
        for (int y = 0; y < H; ++y) {
            const double v = (y + 0.5) / H;
            for (int x = 0; x < W; ++x) {
                const double u = (x + 0.5) / W;
                fw.eps.at(c, y, x) = 0.8 * std::sin(2 * std::numbers::pi * (fy * v + fx * u) + ph + rt * timestep / 1000.0) +
                                     cond_shift(c);
            }
        }
    }

    if (hooks.capture_maps) {
        fw.snapshot.head_dim = m_options.head_dim;
        fw.snapshot.tokens = cond.token_count();
    }

    for (const auto& level : m_levels) {
        const int side = H / level.factor;
        const int n = side * side;
        const Matrix x = tensor_rows(avg_pool(z, level.factor));
        Matrix X(n, C + kTimeDims);
        X.leftCols(C) = x;
        X.rightCols(kTimeDims) = temb.transpose().replicate(n, 1);
        LevelState st;
        st.side = side;
        st.h = (X * level.W_in.transpose()).rowwise() + level.b_in.transpose();

        // Resolve injection directives for this level.
        const LayerKV* replaced = nullptr;
        BoolArray allowed;
        bool masked = false;
        auto ensure_mask = [&] {
            if (!masked) {
                allowed = BoolArray::Constant(n, n, true);
                masked = true;
            }
        };
        for (const auto& dir : hooks.directives) {
            const bool listed = std::find(dir.layers.begin(), dir.layers.end(), level.id) != dir.layers.end();
            if (const auto* r = std::get_if<RestrictSelfAttention>(&dir.payload)) {
                const bool in_scope = dir.layers.empty() ? (level.decoder && side >= H / 2) : listed;
                if (!in_scope) continue;
                const Mask permitted = resample_mask(r->permitted, side, side, MaskSpace::latent);
                if (!permitted.any()) {
                    fw.report.warnings.push_back("restriction map empty at " + level.id + "; directive skipped");
                    continue;
                }
                const Mask queries = resample_mask(r->query_region, side, side, MaskSpace::latent);
                ensure_mask();
                for (int i = 0; i < n; ++i) {
                    if (!queries.bits()[i]) continue;
                    for (int j = 0; j < n; ++j)
                        if (!permitted.bits()[j]) allowed(i, j) = false;
                }
            } else if (const auto* kv = std::get_if<ReplaceKV>(&dir.payload)) {
                if (!dir.layers.empty() && !listed) continue;
                OCCMOVE_CHECK(kv->source != nullptr, contract, "replace_kv directive without a key/value source");
                const auto it = kv->source->find(level.id);
                OCCMOVE_CHECK(it != kv->source->end(), contract, "key/value cache has no entry for layer '", level.id,
                              "'");
                OCCMOVE_CHECK(it->second.keys.rows() == n && it->second.values.rows() == n, shape,
                              "cached keys/values for ", level.id, " do not match the current resolution");
                replaced = &it->second;
                if (kv->background_guidance) {
                    const Mask object = resample_mask(*kv->background_guidance, side, side, MaskSpace::latent);
                    if (object.all()) {
                        fw.report.warnings.push_back("background guidance covers everything at " + level.id +
                                                     "; key masking skipped");
                    } else if (object.any()) {
                        ensure_mask();
                        for (int j = 0; j < n; ++j)
                            if (object.bits()[j]) allowed.col(j).setConstant(false);
                    }
                }
            }
        }

        const AttnWeights w1 = effective(level.self_attn, hooks.lora, level.id + ".attn1");
        const AttnWeights w2 = effective(level.cross_attn, hooks.lora, level.id + ".attn2");
        st.a1 = attention_forward(w1, st.h, st.h, replaced, masked ? &allowed : nullptr);
        st.h2 = st.h + attention_output(st.a1);
        st.a2 = attention_forward(w2, st.h2, cond.embedding, nullptr, nullptr);
        const Matrix h3 = st.h2 + attention_output(st.a2);
        st.r = (h3 * level.W_r.transpose()).array().tanh();

        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    fw.eps.at(c, y, xx) += gain * st.r((y / level.factor) * side + xx / level.factor, c);

        if (hooks.capture_maps) {
            fw.snapshot.layers.push_back({level.id, side, level.decoder, st.a2.A, st.a1.A});
        }
        if (hooks.capture_kv) {
            // Keys/values of the current latent, before any replacement.
            fw.kv[level.id] = LayerKV{st.h * w1.Wk.transpose(), st.h * w1.Wv.transpose()};
        }
        if (keep) fw.levels.push_back(std::move(st));
    }
    return fw;
}

NoisePrediction ToyBackbone::predict_noise(const Tensor& z, int timestep, const TextEmbedding* cond,
                                           const HookSet& hooks) const {
    const TextEmbedding null = cond ? TextEmbedding{} : null_embedding();
    auto fw = run(z, timestep, cond ? *cond : null, hooks, false);
    NoisePrediction pred;
    pred.epsilon = std::move(fw.eps);
    if (hooks.capture_maps) pred.snapshot = std::move(fw.snapshot);
    if (hooks.capture_kv) pred.kv = std::move(fw.kv);
    pred.report = std::move(fw.report);
    return pred;
}

std::map<std::string, Matrix> ToyBackbone::self_queries(const Tensor& z, int timestep, const TextEmbedding* cond,
                                                       const HookSet& hooks) const {
    const TextEmbedding null = cond ? TextEmbedding{} : null_embedding();
    const auto fw = run(z, timestep, cond ? *cond : null, hooks, true);
    std::map<std::string, Matrix> out;
    for (std::size_t i = 0; i < m_levels.size(); ++i) out[m_levels[i].id] = fw.levels[i].a1.Q;
    return out;
}

LoRAGradient ToyBackbone::lora_gradient(const Tensor& z, int timestep, const TextEmbedding* cond, const HookSet& hooks,
                                        const UpstreamFn& upstream_fn) const {
    OCCMOVE_CHECK(hooks.lora != nullptr, contract, "lora_gradient needs an adapter in the hook set");
    const TextEmbedding null = cond ? TextEmbedding{} : null_embedding();
    const auto fw = run(z, timestep, cond ? *cond : null, hooks, true);
    const Tensor upstream = upstream_fn(fw.eps);
    OCCMOVE_CHECK(upstream.same_shape(z), shape, "upstream gradient must match the latent shape");
    const LoRAAdapter& lora = *hooks.lora;
    const int C = z.channels();

    std::map<std::string, Matrix> dW;  // projection target -> gradient of the effective weight
    for (std::size_t li = 0; li < m_levels.size(); ++li) {
        const auto& level = m_levels[li];
        const auto& st = fw.levels[li];
        const int side = st.side;
        const int n = side * side;
        Matrix dr = Matrix::Zero(n, C);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < z.height(); ++y)
                for (int x = 0; x < z.width(); ++x)
                    dr((y / level.factor) * side + x / level.factor, c) += m_options.response_gain * upstream.at(c, y, x);
        const Matrix d_pre = (dr.array() * (1.0 - st.r.array().square())).matrix();
        const Matrix dh3 = d_pre * level.W_r;

        const AttnGrad g2 = attention_backward(st.a2, dh3);
        const Matrix dh2 = dh3 + g2.dXq;
        const AttnGrad g1 = attention_backward(st.a1, dh2);

        const std::string p1 = level.id + ".attn1.";
        const std::string p2 = level.id + ".attn2.";
        dW[p1 + "to_q"] = g1.dWq;
        dW[p1 + "to_k"] = g1.dWk;
        dW[p1 + "to_v"] = g1.dWv;
        dW[p1 + "to_out"] = g1.dWo;
        dW[p2 + "to_q"] = g2.dWq;
        dW[p2 + "to_k"] = g2.dWk;
        dW[p2 + "to_v"] = g2.dWv;
        dW[p2 + "to_out"] = g2.dWo;
    }

    LoRAGradient grad;
    for (const auto& d : lora.deltas) {
        const auto it = dW.find(d.target);
        OCCMOVE_CHECK(it != dW.end(), config, "LoRA target '", d.target, "' is not a toy projection");
        grad.up.push_back(lora.scale * it->second * d.down.transpose());
        grad.down.push_back(lora.scale * d.up.transpose() * it->second);
    }
    grad.epsilon = fw.eps;
    return grad;
}

}  // namespace occmove
