// SPDX-License-Identifier: Apache-2.0

#include "occmove/backbone.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "occmove/io.hpp"
#include "occmove/pretrained.hpp"
#include "occmove/toy_backbone.hpp"

namespace occmove {

std::vector<double> NoiseSchedule::scaled_linear_alphas(int train_steps, double beta_start, double beta_end) {
    OCCMOVE_CHECK(train_steps >= 2, config, "training schedule needs at least 2 steps");
    std::vector<double> alphas(train_steps);
    const double s0 = std::sqrt(beta_start);
    const double s1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double s = s0 + (s1 - s0) * i / (train_steps - 1);
        prod *= 1.0 - s * s;
        alphas[i] = prod;
    }
    return alphas;
}

NoiseSchedule::NoiseSchedule(int steps, const std::vector<double>& train_alphas) {
    OCCMOVE_CHECK(steps >= 2, config, "schedule needs T >= 2, got ", steps);
    const int train = static_cast<int>(train_alphas.size());
    OCCMOVE_CHECK(steps <= train, config, "T=", steps, " exceeds the ", train, " training timesteps");
    m_alphas.push_back(1.0);
    m_timesteps.push_back(0);
    for (int k = 1; k <= steps; ++k) {
        const int t = static_cast<int>(std::lround(static_cast<double>(k) * train / steps)) - 1;
        m_timesteps.push_back(t);
        m_alphas.push_back(train_alphas[t]);
    }
    validate();
}

NoiseSchedule::NoiseSchedule(std::vector<double> level_alphas, std::vector<int> timesteps)
    : m_alphas(std::move(level_alphas)), m_timesteps(std::move(timesteps)) {
    OCCMOVE_CHECK(m_alphas.size() == m_timesteps.size(), config, "alphas and timesteps differ in length");
    OCCMOVE_CHECK(m_alphas.size() >= 3, config, "schedule needs T >= 2");
    validate();
}

void NoiseSchedule::validate() const {
    for (std::size_t k = 0; k < m_alphas.size(); ++k) {
        OCCMOVE_CHECK(m_alphas[k] >= 0.0 && m_alphas[k] <= 1.0, config, "alpha out of [0, 1] at level ", k);
        if (k > 0) {
            OCCMOVE_CHECK(m_alphas[k] < m_alphas[k - 1], config,
                          "alphas must strictly decrease with noise level (level ", k, ")");
        }
    }
}

double NoiseSchedule::alpha(int level) const {
    OCCMOVE_CHECK(level >= 0 && level <= steps(), range, "level ", level, " outside schedule 0..", steps());
    return m_alphas[level];
}

double NoiseSchedule::signal(int level) const { return std::sqrt(alpha(level)); }
double NoiseSchedule::noise(int level) const { return std::sqrt(1.0 - alpha(level)); }

int NoiseSchedule::timestep(int level) const {
    OCCMOVE_CHECK(level >= 0 && level <= steps(), range, "level ", level, " outside schedule 0..", steps());
    return m_timesteps[level];
}

Tensor IdentityCodec::encode(const Tensor& image) const {
    OCCMOVE_CHECK(image.channels() == m_channels, shape, "identity codec expects ", m_channels, " channels");
    return image;
}

Tensor IdentityCodec::decode(const Tensor& latent) const {
    OCCMOVE_CHECK(latent.channels() == m_channels, shape, "identity codec expects ", m_channels, " channels");
    return latent;
}

Tensor ToyCodec::encode(const Tensor& image) const {
    OCCMOVE_CHECK(image.channels() == 3, shape, "toy codec encodes RGB images, got ", image.channels(), " channels");
    OCCMOVE_CHECK(image.height() % m_factor == 0 && image.width() % m_factor == 0, dimension, "image ",
                  image.height(), "x", image.width(), " not divisible by ", m_factor);
    const Tensor pooled = avg_pool(image, m_factor);
    Tensor z(4, pooled.height(), pooled.width());
    for (int y = 0; y < pooled.height(); ++y)
        for (int x = 0; x < pooled.width(); ++x) {
            double sum = 0.0;
            for (int c = 0; c < 3; ++c) {
                z.at(c, y, x) = pooled.at(c, y, x);
                sum += pooled.at(c, y, x);
            }
            z.at(3, y, x) = sum / 3.0;
        }
    return z;
}

Tensor ToyCodec::decode(const Tensor& latent) const {
    OCCMOVE_CHECK(latent.channels() == 4, shape, "toy codec decodes 4-channel latents, got ", latent.channels());
    Tensor rgb(3, latent.height(), latent.width());
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < latent.height(); ++y)
            for (int x = 0; x < latent.width(); ++x) rgb.at(c, y, x) = std::clamp(latent.at(c, y, x), 0.0, 1.0);
    return upsample_nearest(rgb, m_factor);
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u) || ch == '\'') {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::optional<TokenSpan> TextEmbedding::find_span(std::string_view phrase) const {
    const auto words = split_words(phrase);
    if (words.empty() || words.size() > token_spans.size()) return std::nullopt;
    for (std::size_t start = token_spans.size() - words.size() + 1; start-- > 0;) {
        bool match = true;
        for (std::size_t i = 0; i < words.size() && match; ++i) match = token_spans[start + i].word == words[i];
        if (match) {
            return TokenSpan{token_spans[start].tokens.begin, token_spans[start + words.size() - 1].tokens.end};
        }
    }
    return std::nullopt;
}

const LoRADelta* LoRAAdapter::find(std::string_view target) const {
    for (const auto& d : deltas)
        if (d.target == target) return &d;
    return nullptr;
}

std::size_t LoRAAdapter::parameter_count() const {
    std::size_t n = 0;
    for (const auto& d : deltas) n += static_cast<std::size_t>(d.down.size() + d.up.size());
    return n;
}


void LoRAAdapter::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"rank", rank}, {"scale", scale}, {"target_layers", target_layers}};
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const auto down = "delta_" + std::to_string(i) + "_down.npy";
        const auto up = "delta_" + std::to_string(i) + "_up.npy";
        io::write_matrix(dir / down, deltas[i].down);
        io::write_matrix(dir / up, deltas[i].up);
        list.push_back({{"target", deltas[i].target}, {"down", down}, {"up", up}});
    }
    j["deltas"] = list;
    io::write_text(dir / "adapter.json", j.dump(2));
}

LoRAAdapter LoRAAdapter::load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(io::read_text(dir / "adapter.json"));
    LoRAAdapter a;
    a.rank = j.at("rank").get<int>();
    a.scale = j.at("scale").get<double>();
    a.target_layers = j.at("target_layers").get<std::vector<std::string>>();
    for (const auto& d : j.at("deltas")) {
        a.deltas.push_back({d.at("target").get<std::string>(),
                            io::read_matrix(dir / d.at("down").get<std::string>()),
                            io::read_matrix(dir / d.at("up").get<std::string>())});
    }
    return a;
}

Tensor Backbone::encode_image(const Tensor& image) const {
    const int f = codec().downsample();
    OCCMOVE_CHECK(image.height() % f == 0 && image.width() % f == 0, dimension, "image ", image.height(), "x",
                  image.width(), " is not divisible by the latent downsample factor ", f);
    return codec().encode(image);
}

Tensor Backbone::decode_latent(const Tensor& latent) const {
    OCCMOVE_CHECK(latent.channels() == info().latent_channels, shape, "latent has ", latent.channels(),
                  " channels, backbone expects ", info().latent_channels);
    return codec().decode(latent);
}

LoRAGradient Backbone::lora_gradient(const Tensor& z, int timestep, const TextEmbedding* cond, const HookSet& hooks,
                                     const Tensor& upstream) const {
    return lora_gradient(z, timestep, cond, hooks, [&](const Tensor&) { return upstream; });
}

LoRAGradient Backbone::lora_gradient(const Tensor&, int, const TextEmbedding*, const HookSet&,
                                     const UpstreamFn&) const {
    throw Error(ErrorKind::unavailable, info().name + " does not support LoRA training");
}

LoRAAdapter Backbone::make_lora(int rank, const std::vector<std::string>& targets, std::uint64_t seed,
                                double scale) const {
    OCCMOVE_CHECK(rank > 0, config, "LoRA rank must be positive");
    const auto projs = projections();
    LoRAAdapter adapter;
    adapter.rank = rank;
    adapter.scale = scale;
    adapter.target_layers = targets;
    std::mt19937_64 rng(seed);
    for (const auto& t : targets) {
        const bool known = std::any_of(projs.begin(), projs.end(), [&](const ProjectionInfo& p) {
            return p.target == t || p.target.rfind(t + ".", 0) == 0;
        });
        OCCMOVE_CHECK(known, config, "LoRA target '", t, "' matches no attention projection");
    }
    for (const auto& p : projs) {
        const bool selected = targets.empty() || std::any_of(targets.begin(), targets.end(), [&](const std::string& t) {
                                  return p.target == t || p.target.rfind(t + ".", 0) == 0;
                              });
        if (!selected) continue;
        LoRADelta d{p.target, Matrix(rank, p.in), Matrix::Zero(p.out, rank)};
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.in));
        std::uniform_real_distribution<double> uni(-bound, bound);
        for (Eigen::Index i = 0; i < d.down.size(); ++i) d.down.data()[i] = uni(rng);
        adapter.deltas.push_back(std::move(d));
    }
    return adapter;
}

std::shared_ptr<const Backbone> load_backbone(const BackboneSelection& selection) {
    if (selection.kind == "toy") {
        ToyBackboneOptions opts;
        opts.seed = selection.seed;
        opts.codec_factor = selection.toy_codec_factor;
        return std::make_shared<ToyBackbone>(opts);
    }
    if (selection.kind == "pretrained") return load_pretrained_backbone(selection.checkpoint);
    throw Error(ErrorKind::config, "unknown backbone '" + selection.kind + "' (expected toy | pretrained)");
}

void export_snapshot(const std::filesystem::path& dir, const AttentionSnapshot& snapshot) {
    std::filesystem::create_directories(dir);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : snapshot.layers) {
        const auto cross = l.layer + ".cross.npy";
        const auto self = l.layer + ".self.npy";
        io::write_matrix(dir / cross, l.cross);
        io::write_matrix(dir / self, l.self);
        layers.push_back({{"layer", l.layer}, {"side", l.side}, {"decoder", l.decoder}, {"cross", cross},
                          {"self", self}});
    }
    nlohmann::json index{{"format", "npy-v1 <f8 row-major"},
                         {"head_dim", snapshot.head_dim},
                         {"tokens", snapshot.tokens},
                         {"layers", layers}};
    io::write_text(dir / "index.json", index.dump(2));
}

AttentionSnapshot import_snapshot(const std::filesystem::path& dir) {
    const auto index = nlohmann::json::parse(io::read_text(dir / "index.json"));
    AttentionSnapshot s;
    s.head_dim = index.at("head_dim").get<int>();
    s.tokens = index.at("tokens").get<int>();
    for (const auto& l : index.at("layers")) {
        LayerMaps m;
        m.layer = l.at("layer").get<std::string>();
        m.side = l.at("side").get<int>();
        m.decoder = l.at("decoder").get<bool>();
        m.cross = io::read_matrix(dir / l.at("cross").get<std::string>());
        m.self = io::read_matrix(dir / l.at("self").get<std::string>());
        s.layers.push_back(std::move(m));
    }
    return s;
}

}  // namespace occmove
