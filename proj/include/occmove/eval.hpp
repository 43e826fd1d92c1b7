// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "occmove/pipeline.hpp"

namespace occmove {

// ---------------------------------------------------------------- masks

/// COCO run-length encoding: column-major, counts alternate starting with zeros.
struct Rle {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;
};

Rle encode_rle(const Mask& mask);
Mask decode_rle(const Rle& rle, MaskSpace space = MaskSpace::pixel);
/// Compressed COCO count string (as written by pycocotools).
std::vector<std::uint32_t> decode_rle_string(const std::string& s);
std::string encode_rle_string(const std::vector<std::uint32_t>& counts);

/// Even-odd fill of pixel centres; `polygons` holds flat x,y lists.
Mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int height, int width);

/// Accepts a polygon list, a single flat polygon, or an RLE object ({"size", "counts"}).
Mask mask_from_json(const nlohmann::json& seg, int height, int width);

// ---------------------------------------------------------------- dataset

struct AnnotatedObject {
    std::string image_id;
    std::string file_name;
    int height = 0;
    int width = 0;
    int region_index = 0;
    std::string category;
    Mask visible;
    std::optional<Mask> amodal;
};

/// Reads COCOA-style amodal annotations: images[] plus annotations[] whose
/// regions[] carry "segmentation" (amodal), optional "visible_mask" and "name".
std::vector<AnnotatedObject> load_cocoa(const nlohmann::json& doc);

struct DatasetFilters {
    double min_visible_fraction = 0.01;   // visible area / image area
    double min_occluded_fraction = 0.10;  // 1 - visible / amodal
    int targets_per_sample = 8;
    double relax = 1.3;  // eta, sets the metric box side
};

struct TargetPoint {
    int x = 0;
    int y = 0;
};

struct SampleRecord {
    std::string image_path;
    std::string image_id;
    int region_index = 0;
    int height = 0;
    int width = 0;
    std::string category;
    std::string prompt;
    Mask visible;
    std::optional<Mask> amodal;
    int box_side = 0;  // r
    Box original_box;
    std::vector<TargetPoint> targets;

    Box target_box(std::size_t k) const;
};

struct DatasetBuild {
    std::vector<SampleRecord> samples;
    std::vector<std::string> log;  // one line per dropped object
};

DatasetBuild build_dataset(const std::vector<AnnotatedObject>& objects, const DatasetFilters& filters,
                           std::uint64_t seed);

/// Square box of side `side` centred on (cx, cy), shifted to lie inside the image.
Box box_around(int cx, int cy, int side, int height, int width);

nlohmann::json to_json(const SampleRecord& s);
SampleRecord sample_from_json(const nlohmann::json& j);
void write_jsonl(const std::filesystem::path& path, const std::vector<SampleRecord>& samples);
std::vector<SampleRecord> read_jsonl(const std::filesystem::path& path);

// ---------------------------------------------------------------- embedders

enum class EmbedderKind { image, image_text };

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual EmbedderKind kind() const = 0;
    virtual int dim() const = 0;
    virtual std::string fingerprint() const = 0;
    virtual Vector embed_image(const Tensor& rgb) const = 0;
    /// Only for image-text embedders.
    virtual Vector embed_text(const std::string& text) const;
};

/// Offline deterministic embedder: area-resize to a fixed grid, seeded random
/// projection. Text goes through hashed bag-of-words into the same space.
class StubEmbedder final : public Embedder {
public:
    StubEmbedder(EmbedderKind kind, int dim, std::uint64_t seed, int grid = 8);
    EmbedderKind kind() const override { return m_kind; }
    int dim() const override { return m_dim; }
    std::string fingerprint() const override { return m_fingerprint; }
    Vector embed_image(const Tensor& rgb) const override;
    Vector embed_text(const std::string& text) const override;

private:
    EmbedderKind m_kind;
    int m_dim;
    int m_grid;
    Matrix m_image_proj;
    std::uint64_t m_seed;
    std::string m_fingerprint;
};

/// Client for an external embedding server.
///   GET  /info        -> {"kind": "image"|"image_text", "dim": n, "name": s}
///   POST /embed/image (image/png body) -> {"embedding": [...]}
///   POST /embed/text  (text/plain body) -> {"embedding": [...]}
class HttpEmbedder final : public Embedder {
public:
    explicit HttpEmbedder(std::string base_url);
    EmbedderKind kind() const override { return m_kind; }
    int dim() const override { return m_dim; }
    std::string fingerprint() const override { return m_fingerprint; }
    Vector embed_image(const Tensor& rgb) const override;
    Vector embed_text(const std::string& text) const override;

private:
    nlohmann::json post(const std::string& path, const std::string& body, const std::string& type) const;

    std::string m_url;
    EmbedderKind m_kind = EmbedderKind::image;
    int m_dim = 0;
    std::string m_fingerprint;
};

// ---------------------------------------------------------------- metrics

double cosine(const Vector& a, const Vector& b);

struct KidOptions {
    int degree = 3;
    double gamma = 0.0;  // 0: 1 / dim
    double coef0 = 1.0;
    int block_size = 50;
};

struct KidResult {
    double value = 0.0;  // unbiased MMD^2 over the full sets
    double block_std = 0.0;
    int blocks = 0;
    int block_size = 0;
    std::vector<std::string> warnings;
};

/// Rows are embeddings. Equal-size sets are treated as paired (sample i of each),
/// so the cross term skips i == j and kid(A, A) is exactly zero.
KidResult kid_features(const Matrix& a, const Matrix& b, const KidOptions& options = {});
KidResult kid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b, const Embedder& embedder,
              const KidOptions& options = {});

/// Object pixels over a white background.
Tensor composite_on_white(const Tensor& image, const Mask& mask);

/// Mean image/text cosine times 100.
double clip_t(const std::vector<Tensor>& images, const std::vector<std::string>& prompts, const Embedder& embedder);

double dino_op(const Tensor& source, const Tensor& edited, const Box& original, const Embedder& embedder);
double dino_tp(const Tensor& source, const Tensor& edited, const Box& original, const Box& target,
               const Embedder& embedder);
double clip_tp(const Tensor& source, const Tensor& edited, const Box& original, const Box& target,
               const Embedder& embedder);

// ---------------------------------------------------------------- runs

struct CaseMetrics {
    std::size_t sample = 0;
    int target = 0;
    double dino_op = 0.0;
    double dino_tp = 0.0;
    double clip_tp = 0.0;
};

struct MetricReport {
    std::vector<CaseMetrics> cases;
    std::vector<double> clip_t_per_sample;
    KidResult kid;
    double clip_t = 0.0;
    double dino_op = 0.0;
    double dino_tp = 0.0;
    double clip_tp = 0.0;
    std::string config_fingerprint;
    std::string image_embedder;
    std::string image_text_embedder;
    std::vector<std::string> warnings;

    /// Recomputes the aggregate means from the per-case values.
    void aggregate();
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// Reports are comparable only when both embedder fingerprints match.
bool comparable(const nlohmann::json& a, const nlohmann::json& b);

struct EvalOptions {
    std::filesystem::path images_dir;
    std::size_t limit = 0;  // 0: every sample
    KidOptions kid;
    bool keep_runs = false;  // keep per-case artifact directories
};

MetricReport run_evaluation(const Backbone& backbone, const std::vector<SampleRecord>& samples,
                            const PipelineConfig& config, const Embedder& image_embedder,
                            const Embedder& image_text_embedder, const EvalOptions& options,
                            const std::filesystem::path& out_dir);

}  // namespace occmove
