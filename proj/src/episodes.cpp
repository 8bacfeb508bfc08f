#include "metabal/episodes.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

namespace metabal::ep {

using ad::make_tensor;
using ad::Tensor;
using nlohmann::json;

std::vector<int64_t> Episode::counts() const {
    std::vector<int64_t> out;
    out.reserve(support.size());
    for (const Tensor& s : support) out.push_back(s.shape[0]);
    return out;
}

int64_t Episode::support_total() const {
    int64_t n = 0;
    for (const Tensor& s : support) n += s.shape[0];
    return n;
}

namespace {

std::vector<int> choose_distinct(int count, int from, Rng& rng) {
    std::vector<int> all(static_cast<size_t>(from));
    std::iota(all.begin(), all.end(), 0);
    for (int i = 0; i < count; ++i) {
        int j = rng.uniform_int(i, from - 1);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    all.resize(static_cast<size_t>(count));
    return all;
}

Episode sample_impl(const EpisodeDistribution& dist, const Pool& pool, Rng& rng,
                    std::optional<bool> regime_shared, std::optional<int> shared_shot) {
    const int c = dist.classes_per_episode;
    const int q = dist.queries_per_class;
    const int d = pool.feature_dim();
    if (pool.num_classes() < c) {
        throw std::invalid_argument("sample_episode: pool has " +
                                    std::to_string(pool.num_classes()) + " classes, need " +
                                    std::to_string(c));
    }
    if (dist.shot_min < 1 || dist.shot_max < dist.shot_min) {
        throw std::invalid_argument("sample_episode: bad shot range");
    }

    std::vector<int> classes = choose_distinct(c, pool.num_classes(), rng);

    bool imbalanced;
    if (regime_shared.has_value()) {
        imbalanced = !*regime_shared;
    } else {
        imbalanced = rng.uniform() < dist.class_imbalance_prob;
    }
    std::vector<int> shots(static_cast<size_t>(c));
    if (imbalanced) {
        for (auto& s : shots) s = rng.uniform_int(dist.shot_min, dist.shot_max);
    } else {
        int n = shared_shot.value_or(rng.uniform_int(dist.shot_min, dist.shot_max));
        std::fill(shots.begin(), shots.end(), n);
    }

    Episode ep;
    ep.origin = pool.origin();
    std::vector<double> query;
    query.reserve(static_cast<size_t>(c) * q * d);
    for (int i = 0; i < c; ++i) {
        int cls = classes[static_cast<size_t>(i)];
        int need = shots[static_cast<size_t>(i)] + q;
        if (pool.available(cls) < need) {
            throw std::invalid_argument(
                "sample_episode: class " + std::to_string(cls) + " has " +
                std::to_string(pool.available(cls)) + " instances, episode needs " +
                std::to_string(need));
        }
        std::vector<double> rows = pool.draw(cls, need, rng);
        int64_t n_sup = shots[static_cast<size_t>(i)];
        ep.support.push_back(make_tensor(
            {n_sup, d}, std::vector<double>(rows.begin(), rows.begin() + n_sup * d)));
        query.insert(query.end(), rows.begin() + n_sup * d, rows.end());
        ep.query_y.insert(ep.query_y.end(), static_cast<size_t>(q), i);
    }
    ep.query_x = make_tensor({static_cast<int64_t>(c) * q, d}, std::move(query));
    return ep;
}

}  // namespace

Episode sample_episode(const EpisodeDistribution& dist, const Pool& pool, Rng& rng) {
    return sample_impl(dist, pool, rng, std::nullopt, std::nullopt);
}

Episode sample_episode_forced(const EpisodeDistribution& dist, const Pool& pool, Rng& rng,
                              bool shared, std::optional<int> shared_shot) {
    return sample_impl(dist, pool, rng, shared, shared_shot);
}

// ---- generator-backed pools ----

namespace {

struct ClassGen {
    Family family;
    std::vector<double> mean;    // blob mean / ring center
    std::vector<double> stddev;  // blobs: per-dim
    double radius = 0.0;         // rings
    double thickness = 0.0;
};

ClassGen draw_class_gen(const FamilyParams& p, Family family, double center_offset, Rng& rng) {
    ClassGen g;
    g.family = family;
    g.mean.resize(static_cast<size_t>(p.dim));
    for (auto& m : g.mean) {
        m = center_offset + (2.0 * rng.uniform() - 1.0) * p.center_scale;
    }
    if (family == Family::GaussianBlobs) {
        g.stddev.resize(static_cast<size_t>(p.dim));
        for (auto& s : g.stddev) s = p.noise_scale * (0.5 + rng.uniform());
    } else {
        g.radius = (0.5 + 0.5 * rng.uniform()) * p.center_scale;
        g.thickness = p.noise_scale * (0.5 + rng.uniform());
    }
    return g;
}

std::vector<ClassGen> draw_family(const FamilyParams& p, Split split) {
    uint64_t seed = mix_seed(p.seed, static_cast<uint64_t>(split) + 101);
    Rng rng(seed);
    std::vector<ClassGen> gens;
    for (int k = 0; k < p.classes_per_split; ++k) {
        ClassGen g;
        bool ok = false;
        for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
            g = draw_class_gen(p, p.family, 0.0, rng);
            ok = true;
            if (p.family == Family::GaussianBlobs && p.min_separation > 0.0) {
                for (const ClassGen& prev : gens) {
                    double d2 = 0.0;
                    for (size_t j = 0; j < g.mean.size(); ++j) {
                        double diff = g.mean[j] - prev.mean[j];
                        d2 += diff * diff;
                    }
                    if (std::sqrt(d2) < p.min_separation) {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if (!ok) {
            throw std::invalid_argument(
                "synth_task_family: could not place class centers min_separation apart");
        }
        gens.push_back(std::move(g));
    }
    return gens;
}

void draw_instance(const ClassGen& g, int dim, Rng& rng, double* out) {
    if (g.family == Family::GaussianBlobs) {
        for (int j = 0; j < dim; ++j) {
            out[j] = g.mean[static_cast<size_t>(j)] +
                     g.stddev[static_cast<size_t>(j)] * rng.normal();
        }
    } else {
        double theta = 2.0 * 3.14159265358979323846 * rng.uniform();
        double r = g.radius + g.thickness * rng.normal();
        out[0] = g.mean[0] + r * std::cos(theta);
        if (dim > 1) out[1] = g.mean[1] + r * std::sin(theta);
        for (int j = 2; j < dim; ++j) {
            out[j] = g.mean[static_cast<size_t>(j)] + g.thickness * rng.normal();
        }
    }
}

class GeneratorPool final : public Pool {
  public:
    GeneratorPool(std::vector<ClassGen> gens, int dim, OodShift shift, Origin origin)
        : gens_(std::move(gens)), dim_(dim), shift_(std::move(shift)), origin_(origin) {}

    int num_classes() const override { return static_cast<int>(gens_.size()); }
    int feature_dim() const override { return dim_; }
    int64_t available(int) const override { return std::numeric_limits<int64_t>::max(); }
    Origin origin() const override { return origin_; }

    std::vector<double> draw(int class_idx, int n, Rng& rng) const override {
        if (class_idx < 0 || class_idx >= num_classes()) {
            throw std::invalid_argument("pool: class index out of range");
        }
        std::vector<double> out(static_cast<size_t>(n) * static_cast<size_t>(dim_));
        for (int i = 0; i < n; ++i) {
            double* row = out.data() + static_cast<int64_t>(i) * dim_;
            draw_instance(gens_[static_cast<size_t>(class_idx)], dim_, rng, row);
            apply_shift(row);
        }
        return out;
    }

  private:
    void apply_shift(double* row) const {
        switch (shift_.kind) {
            case ShiftKind::Identity:
            case ShiftKind::FamilySwap:
                return;
            case ShiftKind::Scale:
                for (int j = 0; j < dim_; ++j) row[j] *= shift_.amount;
                return;
            case ShiftKind::Rotate: {
                if (dim_ < 2) return;
                double c = std::cos(shift_.amount), s = std::sin(shift_.amount);
                double x = row[0], y = row[1];
                row[0] = c * x - s * y;
                row[1] = s * x + c * y;
                return;
            }
            case ShiftKind::Translate:
                for (int j = 0; j < dim_; ++j) {
                    double off = shift_.offset.empty()
                                     ? shift_.amount
                                     : shift_.offset[static_cast<size_t>(j) % shift_.offset.size()];
                    row[j] += off;
                }
                return;
        }
    }

    std::vector<ClassGen> gens_;
    int dim_;
    OodShift shift_;
    Origin origin_;
};

}  // namespace

std::unique_ptr<Pool> synth_task_family(const FamilyParams& params, Split split) {
    if (params.dim < 2 || params.classes_per_split < 2) {
        throw std::invalid_argument("synth_task_family: dim >= 2 and >= 2 classes required");
    }
    return std::make_unique<GeneratorPool>(draw_family(params, split), params.dim, OodShift{},
                                           Origin::InDistribution);
}

std::unique_ptr<Pool> make_ood_pool(const FamilyParams& base, Split split, const OodShift& shift,
                                    Rng& rng) {
    if (base.dim < 2 || base.classes_per_split < 2) {
        throw std::invalid_argument("make_ood_pool: dim >= 2 and >= 2 classes required");
    }
    Origin origin =
        shift.kind == ShiftKind::Identity ? Origin::InDistribution : Origin::OutOfDistribution;
    if (shift.kind == ShiftKind::FamilySwap) {
        // Heterogeneous stand-in family: the other generator family placed in
        // an offset center range so per-feature moments clearly separate.
        Family swapped = base.family == Family::GaussianBlobs ? Family::RingMixtures
                                                              : Family::GaussianBlobs;
        std::vector<ClassGen> gens;
        for (int k = 0; k < base.classes_per_split; ++k) {
            gens.push_back(draw_class_gen(base, swapped, 4.0 * base.center_scale, rng));
        }
        return std::make_unique<GeneratorPool>(std::move(gens), base.dim, OodShift{}, origin);
    }
    return std::make_unique<GeneratorPool>(draw_family(base, split), base.dim, shift, origin);
}

// ---- dataset-backed pools ----

namespace {

class DatasetPool final : public Pool {
  public:
    DatasetPool(PoolData data, const Normalization& norm, Origin origin)
        : dim_(data.feature_dim), origin_(origin) {
        for (auto& [label, rows] : data.classes) {
            (void)label;
            for (auto& row : rows) {
                if (!norm.mean.empty()) {
                    for (size_t j = 0; j < row.size(); ++j) {
                        row[j] = (row[j] - norm.mean[j]) / norm.std[j];
                    }
                }
            }
            classes_.push_back(std::move(rows));
        }
    }

    int num_classes() const override { return static_cast<int>(classes_.size()); }
    int feature_dim() const override { return dim_; }
    int64_t available(int c) const override {
        return static_cast<int64_t>(classes_[static_cast<size_t>(c)].size());
    }
    Origin origin() const override { return origin_; }

    std::vector<double> draw(int class_idx, int n, Rng& rng) const override {
        const auto& rows = classes_[static_cast<size_t>(class_idx)];
        if (static_cast<size_t>(n) > rows.size()) {
            throw std::invalid_argument("pool: class " + std::to_string(class_idx) + " has " +
                                        std::to_string(rows.size()) + " instances, need " +
                                        std::to_string(n));
        }
        std::vector<int> idx(rows.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<double> out;
        out.reserve(static_cast<size_t>(n) * static_cast<size_t>(dim_));
        for (int i = 0; i < n; ++i) {
            int j = rng.uniform_int(i, static_cast<int>(rows.size()) - 1);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
            const auto& row = rows[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            out.insert(out.end(), row.begin(), row.end());
        }
        return out;
    }

  private:
    std::vector<std::vector<std::vector<double>>> classes_;
    int dim_;
    Origin origin_;
};

uint32_t read_be32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError(path + ": truncated while reading " + std::string(what));
    }
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

PoolData load_pool_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path + ": cannot open");
    PoolData data;
    std::string line;
    size_t line_no = 0;
    if (!std::getline(in, line)) throw IoError(path + ": empty file");
    ++line_no;
    if (line.rfind("label", 0) != 0) {
        throw IoError(path + ":1: expected a header row starting with 'label'");
    }
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) {
            throw IoError(path + ":" + std::to_string(line_no) + ": missing label column");
        }
        int label;
        std::vector<double> row;
        try {
            label = std::stoi(cell);
            while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw IoError(path + ":" + std::to_string(line_no) + ": cannot parse '" + cell + "'");
        }
        if (data.feature_dim == 0) {
            data.feature_dim = static_cast<int>(row.size());
        } else if (static_cast<int>(row.size()) != data.feature_dim) {
            throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                          std::to_string(data.feature_dim) + " features, got " +
                          std::to_string(row.size()));
        }
        data.classes[label].push_back(std::move(row));
    }
    if (data.classes.empty()) throw IoError(path + ": no data rows");
    return data;
}

std::string derive_idx_labels_path(std::string path) {
    auto replace_once = [](std::string& s, const std::string& from, const std::string& to) {
        size_t pos = s.find(from);
        if (pos == std::string::npos) return false;
        s.replace(pos, from.size(), to);
        return true;
    };
    bool a = replace_once(path, "images", "labels");
    bool b = replace_once(path, "idx3", "idx1");
    if (!a && !b) {
        throw IoError(path + ": cannot derive a label file name (expected 'images'/'idx3')");
    }
    return path;
}

}  // namespace

PoolData load_pool_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError(images_path + ": cannot open");
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError(labels_path + ": cannot open");

    uint32_t magic = read_be32(img, images_path, "magic");
    if (magic != 0x00000803) {
        std::ostringstream os;
        os << images_path << ": bad image magic 0x" << std::hex << magic << ", expected 0x803";
        throw IoError(os.str());
    }
    uint32_t count = read_be32(img, images_path, "count");
    uint32_t rows = read_be32(img, images_path, "rows");
    uint32_t cols = read_be32(img, images_path, "cols");

    uint32_t lmagic = read_be32(lab, labels_path, "magic");
    if (lmagic != 0x00000801) {
        std::ostringstream os;
        os << labels_path << ": bad label magic 0x" << std::hex << lmagic << ", expected 0x801";
        throw IoError(os.str());
    }
    uint32_t lcount = read_be32(lab, labels_path, "count");
    if (lcount != count) {
        throw IoError(images_path + ": " + std::to_string(count) + " images vs " +
                      std::to_string(lcount) + " labels");
    }

    PoolData data;
    data.feature_dim = static_cast<int>(rows * cols);
    std::vector<unsigned char> pixels(static_cast<size_t>(rows) * cols);
    for (uint32_t i = 0; i < count; ++i) {
        if (!img.read(reinterpret_cast<char*>(pixels.data()),
                      static_cast<std::streamsize>(pixels.size()))) {
            throw IoError(images_path + ": truncated image data at index " + std::to_string(i));
        }
        char label;
        if (!lab.read(&label, 1)) {
            throw IoError(labels_path + ": truncated labels at index " + std::to_string(i));
        }
        std::vector<double> row(pixels.size());
        for (size_t j = 0; j < pixels.size(); ++j) row[j] = pixels[j] / 255.0;
        data.classes[static_cast<int>(static_cast<unsigned char>(label))].push_back(
            std::move(row));
    }
    return data;
}

PoolData load_pool(const std::string& path, PoolFormat format) {
    PoolData data = format == PoolFormat::CsvLabeled
                        ? load_pool_csv(path)
                        : load_pool_idx(path, derive_idx_labels_path(path));
    for (const auto& [label, rows] : data.classes) {
        if (rows.size() < 16) {
            std::cerr << "warning: class " << label << " has only " << rows.size()
                      << " instances; it cannot fill a full query set plus support\n";
        }
    }
    return data;
}

void save_pool(const PoolData& data, const std::string& path, PoolFormat format) {
    if (format != PoolFormat::CsvLabeled) {
        throw std::invalid_argument("save_pool: use save_pool_idx for idx_images");
    }
    std::ofstream out(path);
    if (!out) throw IoError(path + ": cannot open for writing");
    out << "label";
    for (int j = 0; j < data.feature_dim; ++j) out << ",f" << j;
    out << "\n";
    char buf[32];
    for (const auto& [label, rows] : data.classes) {
        for (const auto& row : rows) {
            out << label;
            for (double x : row) {
                std::snprintf(buf, sizeof buf, "%.17g", x);
                out << "," << buf;
            }
            out << "\n";
        }
    }
}

void save_pool_idx(const PoolData& data, const std::string& images_path,
                   const std::string& labels_path, int rows, int cols) {
    if (rows * cols != data.feature_dim) {
        throw std::invalid_argument("save_pool_idx: rows*cols must equal feature_dim");
    }
    uint32_t count = 0;
    for (const auto& [label, instances] : data.classes) {
        (void)label;
        count += static_cast<uint32_t>(instances.size());
    }
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) throw IoError("save_pool_idx: cannot open output files");
    write_be32(img, 0x00000803);
    write_be32(img, count);
    write_be32(img, static_cast<uint32_t>(rows));
    write_be32(img, static_cast<uint32_t>(cols));
    write_be32(lab, 0x00000801);
    write_be32(lab, count);
    for (const auto& [label, instances] : data.classes) {
        for (const auto& row : instances) {
            std::vector<unsigned char> bytes(row.size());
            for (size_t j = 0; j < row.size(); ++j) {
                bytes[j] = static_cast<unsigned char>(std::lround(row[j] * 255.0));
            }
            img.write(reinterpret_cast<char*>(bytes.data()),
                      static_cast<std::streamsize>(bytes.size()));
            char l = static_cast<char>(label);
            lab.write(&l, 1);
        }
    }
}

Normalization compute_normalization(const PoolData& data) {
    Normalization norm;
    norm.mean.assign(static_cast<size_t>(data.feature_dim), 0.0);
    norm.std.assign(static_cast<size_t>(data.feature_dim), 0.0);
    int64_t n = 0;
    for (const auto& [label, rows] : data.classes) {
        (void)label;
        for (const auto& row : rows) {
            for (size_t j = 0; j < row.size(); ++j) norm.mean[j] += row[j];
            ++n;
        }
    }
    for (auto& m : norm.mean) m /= static_cast<double>(n);
    for (const auto& [label, rows] : data.classes) {
        (void)label;
        for (const auto& row : rows) {
            for (size_t j = 0; j < row.size(); ++j) {
                double d = row[j] - norm.mean[j];
                norm.std[j] += d * d;
            }
        }
    }
    for (auto& s : norm.std) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-12);
    return norm;
}

std::unique_ptr<Pool> make_dataset_pool(PoolData data, const Normalization& norm, Origin origin) {
    return std::make_unique<DatasetPool>(std::move(data), norm, origin);
}

void write_manifest(const std::string& manifest_path,
                    const std::map<std::string, PoolData>& splits, PoolFormat format) {
    auto it = splits.find("meta_train");
    if (it == splits.end()) {
        throw std::invalid_argument("write_manifest: a meta_train split is required");
    }
    Normalization norm = compute_normalization(it->second);

    std::string dir = manifest_path.substr(0, manifest_path.find_last_of('/') + 1);
    json j;
    j["format_version"] = 1;
    j["normalization"] = {{"mean", norm.mean}, {"std", norm.std}};
    for (const auto& [name, data] : splits) {
        std::string file = name + ".csv";
        save_pool(data, dir + file, format);
        j["splits"][name] = {{"path", file}, {"format", "csv_labeled"}};
        json counts = json::object();
        for (const auto& [label, rows] : data.classes) {
            counts[std::to_string(label)] = rows.size();
        }
        j["class_counts"][name] = counts;
    }
    std::ofstream out(manifest_path);
    if (!out) throw IoError(manifest_path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

std::unique_ptr<Pool> load_manifest_pool(const std::string& manifest_path,
                                         const std::string& split, Origin origin) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError(manifest_path + ": cannot open");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw IoError(manifest_path + ": parse error at byte " + std::to_string(e.byte) + ": " +
                      e.what());
    }
    if (j.value("format_version", 0) != 1) {
        throw IoError(manifest_path + ": unsupported format_version " +
                      j.value("format_version", json{}).dump());
    }
    if (!j["splits"].contains(split)) {
        throw IoError(manifest_path + ": no split named '" + split + "'");
    }
    std::string dir = manifest_path.substr(0, manifest_path.find_last_of('/') + 1);
    std::string file = j["splits"][split]["path"];
    std::string fmt = j["splits"][split]["format"];
    PoolData data = load_pool(
        dir + file, fmt == "csv_labeled" ? PoolFormat::CsvLabeled : PoolFormat::IdxImages);
    Normalization norm;
    norm.mean = j["normalization"]["mean"].get<std::vector<double>>();
    norm.std = j["normalization"]["std"].get<std::vector<double>>();
    return make_dataset_pool(std::move(data), norm, origin);
}

std::string episodes_to_json(const std::vector<Episode>& episodes) {
    json out;
    out["format_version"] = 1;
    out["episodes"] = json::array();
    for (const Episode& ep : episodes) {
        json e;
        e["origin"] =
            ep.origin == Origin::OutOfDistribution ? "out_of_distribution" : "in_distribution";
        e["counts"] = ep.counts();
        json support = json::array();
        for (const Tensor& s : ep.support) {
            json rows = json::array();
            int64_t d = s.shape[1];
            for (int64_t i = 0; i < s.shape[0]; ++i) {
                std::vector<double> row(s.data().begin() + i * d, s.data().begin() + (i + 1) * d);
                rows.push_back(row);
            }
            support.push_back(rows);
        }
        e["support"] = support;
        json qx = json::array();
        int64_t d = ep.query_x.shape[1];
        for (int64_t i = 0; i < ep.query_x.shape[0]; ++i) {
            std::vector<double> row(ep.query_x.data().begin() + i * d,
                                    ep.query_x.data().begin() + (i + 1) * d);
            qx.push_back(row);
        }
        e["query"] = {{"x", qx}, {"y", ep.query_y}};
        out["episodes"].push_back(std::move(e));
    }
    return out.dump();
}

}  // namespace metabal::ep
