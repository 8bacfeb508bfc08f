#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "metabal/rng.hpp"
#include "metabal/tensor.hpp"

namespace metabal::ep {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Origin { InDistribution, OutOfDistribution };

// One few-shot task: class-indexed support sets plus a labelled query set.
struct Episode {
    std::vector<ad::Tensor> support;  // per class, [N_c, d]
    ad::Tensor query_x;               // [M, d]
    std::vector<int> query_y;         // 0..C-1
    Origin origin = Origin::InDistribution;

    int num_classes() const { return static_cast<int>(support.size()); }
    std::vector<int64_t> counts() const;
    int64_t support_total() const;
    int64_t query_total() const { return static_cast<int64_t>(query_y.size()); }
};

struct EpisodeDistribution {
    int classes_per_episode = 5;
    int shot_min = 1;
    int shot_max = 50;
    double class_imbalance_prob = 0.5;
    int queries_per_class = 15;
};

// A class-indexed source of instances. Generator-backed pools draw fresh
// instances on demand; dataset-backed pools sample stored rows without
// replacement within one call.
class Pool {
  public:
    virtual ~Pool() = default;
    virtual int num_classes() const = 0;
    virtual int feature_dim() const = 0;
    virtual int64_t available(int class_idx) const = 0;
    // Row-major [n, feature_dim] draw of class class_idx.
    virtual std::vector<double> draw(int class_idx, int n, Rng& rng) const = 0;
    virtual Origin origin() const = 0;
};

Episode sample_episode(const EpisodeDistribution& dist, const Pool& pool, Rng& rng);
// Regime-forced variant for diagnostics: shared=true gives every class the
// same shot count (shared_shot when set, else one draw).
Episode sample_episode_forced(const EpisodeDistribution& dist, const Pool& pool, Rng& rng,
                              bool shared, std::optional<int> shared_shot = std::nullopt);

enum class Family { GaussianBlobs, RingMixtures };

struct FamilyParams {
    Family family = Family::GaussianBlobs;
    int dim = 2;
    int classes_per_split = 16;
    double center_scale = 4.0;
    double noise_scale = 0.5;
    // Blobs only: minimum pairwise center distance (0 disables).
    double min_separation = 0.0;
    uint64_t seed = 0;
};

enum class Split { MetaTrain, MetaVal, MetaTest };

// Splits use disjoint class-parameter draws derived from params.seed.
std::unique_ptr<Pool> synth_task_family(const FamilyParams& params, Split split);

enum class ShiftKind { Identity, Scale, Rotate, Translate, FamilySwap };

struct OodShift {
    ShiftKind kind = ShiftKind::Identity;
    double amount = 0.0;             // scale factor or rotation angle
    std::vector<double> offset;      // translate
};

// Pool whose class generators are the base split's, transformed by `shift`
// (identity reproduces the base distribution exactly). Episodes drawn from
// it carry Origin::OutOfDistribution (identity keeps the base tag).
std::unique_ptr<Pool> make_ood_pool(const FamilyParams& base, Split split, const OodShift& shift,
                                    Rng& rng);

// ---- on-disk pools ----

enum class PoolFormat { CsvLabeled, IdxImages };

struct PoolData {
    std::map<int, std::vector<std::vector<double>>> classes;
    int feature_dim = 0;
};

// csv_labeled: UTF-8, header row, first column integer label, remaining
// columns decimal floats. idx_images: standard big-endian IDX; `path` names
// the image file and the label file is derived from it (images->labels,
// idx3->idx1). Image pixels are scaled to [0,1] and flattened.
PoolData load_pool(const std::string& path, PoolFormat format);
PoolData load_pool_idx(const std::string& images_path, const std::string& labels_path);
void save_pool(const PoolData& data, const std::string& path, PoolFormat format);
void save_pool_idx(const PoolData& data, const std::string& images_path,
                   const std::string& labels_path, int rows, int cols);

struct Normalization {
    std::vector<double> mean;
    std::vector<double> std;
};

Normalization compute_normalization(const PoolData& data);

std::unique_ptr<Pool> make_dataset_pool(PoolData data, const Normalization& norm, Origin origin);

// Manifest: {format_version, splits, class_counts, normalization}. Writes
// one file per split next to the manifest; normalization comes from the
// meta_train split only.
void write_manifest(const std::string& manifest_path,
                    const std::map<std::string, PoolData>& splits, PoolFormat format);
std::unique_ptr<Pool> load_manifest_pool(const std::string& manifest_path,
                                         const std::string& split, Origin origin);

std::string episodes_to_json(const std::vector<Episode>& episodes);

}  // namespace metabal::ep
