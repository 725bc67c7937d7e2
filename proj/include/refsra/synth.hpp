#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refsra/errors.hpp"
#include "refsra/image.hpp"
#include "refsra/rng.hpp"

namespace refsra {

constexpr int kScale = 4;
constexpr int kDefaultGtSize = 64;
constexpr int kNumSimilarityLevels = 5;

/// One dataset sample: ground truth, its bicubic x1/4 low-resolution input,
/// and a reference image whose content overlap with the GT is controlled by
/// similarity_level (1 = highest overlap, 5 = lowest).
struct SampleTriplet {
    ImagePlane gt;
    ImagePlane lr;
    ImagePlane ref;
    int similarity_level = 1;
    std::string sample_id;
};

/// Content-overlap fraction for each similarity level, 1-based.
inline double level_overlap_fraction(int level) {
    static const double kFractions[] = {0.9, 0.7, 0.5, 0.3, 0.1};
    if (level < 1 || level > kNumSimilarityLevels)
        throw DataError("similarity level must be in 1..5, got " + std::to_string(level));
    return kFractions[level - 1];
}

/// Horizontal displacement of the reference crop for a given level.
inline int level_shift(int gt_size, int level) {
    return static_cast<int>(std::llround((1.0 - level_overlap_fraction(level)) * gt_size));
}

/// Deterministic procedural texture: six oriented sinusoids (4-24 cycles per
/// image, random phase/orientation/per-channel amplitude) plus a bicubically
/// upsampled 8x8 random grid, affinely normalized into [0.05, 0.95].
inline ImagePlane generate_texture(uint64_t seed, int size) {
    if (size < 16) throw DataError("generate_texture: size must be >= 16");
    Rng rng(seed);

    struct Wave {
        double freq, cos_o, sin_o, phase, amp[3];
    };
    std::vector<Wave> waves(6);
    for (auto& wv : waves) {
        wv.freq = rng.uniform(4.0, 24.0);
        const double orient = rng.uniform(0.0, 6.283185307179586);
        wv.cos_o = std::cos(orient);
        wv.sin_o = std::sin(orient);
        wv.phase = rng.uniform(0.0, 6.283185307179586);
        for (double& a : wv.amp) a = rng.uniform(0.25, 1.0);
    }
    std::vector<double> grid(8 * 8 * 3);
    for (auto& v : grid) v = rng.uniform();
    Tensor coarse = bicubic_resize_op(Tensor::from({8, 8, 3}, std::move(grid)), size, size);

    ImagePlane img(size, size);
    const double inv = 1.0 / size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) * inv;
            const double v = (y + 0.5) * inv;
            for (int c = 0; c < 3; ++c) {
                double val = coarse.at((static_cast<int64_t>(y) * size + x) * 3 + c);
                for (const auto& wv : waves)
                    val += wv.amp[c] *
                           std::sin(6.283185307179586 * wv.freq * (u * wv.cos_o + v * wv.sin_o) +
                                    wv.phase);
                img.at(y, x, c) = val;
            }
        }
    }
    double lo = img.values[0], hi = img.values[0];
    for (double v : img.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) {
        for (auto& v : img.values) v = 0.5;
        return img;
    }
    const double scale = 0.9 / (hi - lo);
    for (auto& v : img.values) v = std::clamp(0.05 + (v - lo) * scale, 0.05, 0.95);
    return img;
}

/// Builds one (GT, LR, Ref) triplet. The per-sample RNG stream depends only
/// on (master_seed, sample_index), so generation order is irrelevant, and
/// the level affects only the reference: same index => identical GT and LR.
inline SampleTriplet synthesize_triplet(uint64_t master_seed, int sample_index,
                                        int similarity_level, int gt_size = kDefaultGtSize) {
    if (gt_size % kScale != 0)
        throw DataError("gt_size must be a multiple of " + std::to_string(kScale));
    level_overlap_fraction(similarity_level);  // validates the level

    const int g = gt_size;
    const int canvas = (5 * g) / 2;
    const uint64_t base = hash_combine(master_seed, static_cast<uint64_t>(sample_index));
    const ImagePlane scene = generate_texture(hash_combine(base, 1), canvas);
    const ImagePlane filler = generate_texture(hash_combine(base, 2), canvas);
    Rng gain_rng(hash_combine(base, 3));
    const double gain = gain_rng.uniform(0.95, 1.05);

    SampleTriplet t;
    t.similarity_level = similarity_level;
    t.sample_id = "s" + std::to_string(sample_index) + "_l" + std::to_string(similarity_level);
    t.gt = crop(scene, 0, 0, g, g);

    const int dx = level_shift(g, similarity_level);
    ImagePlane ref = crop(scene, 0, dx, g, g);
    // Reference columns past the overlap come from canvas columns >= g;
    // replace them with unrelated texture so low levels are truly dissimilar.
    for (int y = 0; y < g; ++y)
        for (int x = g - dx; x < g; ++x)
            for (int c = 0; c < 3; ++c) ref.at(y, x, c) = filler.at(y, dx + x, c);
    for (auto& v : ref.values) v = std::clamp(v * gain, 0.0, 1.0);
    t.ref = std::move(ref);

    t.lr = bicubic_resize(t.gt, 1.0 / kScale);
    return t;
}

// ----- dataset manifest -------------------------------------------------------

struct ManifestEntry {
    std::string id;
    int level = 1;
    std::string gt_path;   // empty = synthesize from seed
    std::string ref_path;  // empty = synthesize from seed
};

struct DatasetManifest {
    uint64_t master_seed = 0;
    int scale = kScale;
    std::vector<ManifestEntry> entries;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json je;
        je["id"] = e.id;
        je["level"] = e.level;
        je["gt"] = e.gt_path.empty() ? nlohmann::json() : nlohmann::json(e.gt_path);
        je["ref"] = e.ref_path.empty() ? nlohmann::json() : nlohmann::json(e.ref_path);
        entries.push_back(std::move(je));
    }
    return nlohmann::json{{"master_seed", m.master_seed}, {"scale", m.scale}, {"entries", entries}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.master_seed = j.at("master_seed").get<uint64_t>();
        m.scale = j.at("scale").get<int>();
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.level = je.at("level").get<int>();
            if (!je.at("gt").is_null()) e.gt_path = je.at("gt").get<std::string>();
            if (!je.at("ref").is_null()) e.ref_path = je.at("ref").get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("manifest: ") + ex.what());
    }
    for (size_t i = 0; i < m.entries.size(); ++i)
        for (size_t k = i + 1; k < m.entries.size(); ++k)
            if (m.entries[i].id == m.entries[k].id)
                throw DataError("manifest: duplicate sample id '" + m.entries[i].id + "'");
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("manifest: ") + ex.what());
    }
    return manifest_from_json(j);
}

/// Parses the sample index from ids of the form "s<index>_l<level>"; this is
/// the id convention emitted by the generator and required for entries that
/// are synthesized from the seed rather than loaded from files.
inline int parse_sample_index(const std::string& id) {
    if (id.size() >= 2 && id[0] == 's') {
        size_t pos = 1;
        int v = 0;
        bool any = false;
        while (pos < id.size() && std::isdigit(static_cast<unsigned char>(id[pos]))) {
            v = v * 10 + (id[pos] - '0');
            any = true;
            ++pos;
        }
        if (any) return v;
    }
    throw DataError("cannot derive a sample index from id '" + id + "' (expected s<index>_l<level>)");
}

/// Materializes a manifest entry: loads images when paths are present,
/// otherwise regenerates from the manifest seed. LR is always derived from
/// GT by bicubic x1/scale.
inline SampleTriplet load_triplet(const DatasetManifest& m, const ManifestEntry& e,
                                  const std::string& base_dir = "") {
    if (e.gt_path.empty() != e.ref_path.empty())
        throw DataError("manifest entry '" + e.id + "': gt and ref must both be paths or both null");
    if (e.gt_path.empty())
        return synthesize_triplet(m.master_seed, parse_sample_index(e.id), e.level);

    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        if (fp.is_absolute() || base_dir.empty()) return p;
        return (std::filesystem::path(base_dir) / fp).string();
    };
    SampleTriplet t;
    t.sample_id = e.id;
    t.similarity_level = e.level;
    t.gt = load_image(resolve(e.gt_path));
    t.ref = load_image(resolve(e.ref_path));
    if (t.gt.height % m.scale != 0 || t.gt.width % m.scale != 0)
        throw DataError("sample '" + e.id + "': GT dims must be multiples of the scale");
    if (t.ref.height != t.gt.height || t.ref.width != t.gt.width)
        throw DataError("sample '" + e.id + "': ref dims must match GT dims");
    t.lr = bicubic_resize(t.gt, 1.0 / m.scale);
    return t;
}

}  // namespace refsra
