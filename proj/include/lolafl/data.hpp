#pragma once

// Dataset ingestion (IDX), synthetic subspace data and device partitioning.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <zlib.h>

#include "lolafl/errors.hpp"
#include "lolafl/linalg.hpp"
#include "lolafl/redunet.hpp"
#include "lolafl/rng.hpp"

namespace lolafl {

/// d×m samples (one flattened image per column) with labels in [0, J).
struct LabeledDataset {
    Matrix samples;
    std::vector<int> labels;
    int num_classes = 0;

    Index dim() const noexcept { return samples.rows(); }
    std::size_t size() const noexcept { return labels.size(); }
    MembershipSet membership() const { return MembershipSet(labels, num_classes); }
};

/// Sample indices held by each device.
struct Partition {
    std::vector<std::vector<std::size_t>> devices;

    std::size_t num_devices() const noexcept { return devices.size(); }
};

enum class PartitionMode { iid, noniid_a, noniid_b };

inline LabeledDataset take(const LabeledDataset& ds, std::span<const std::size_t> idx) {
    LabeledDataset out;
    out.num_classes = ds.num_classes;
    out.samples.resize(ds.dim(), static_cast<Index>(idx.size()));
    out.labels.reserve(idx.size());
    for (std::size_t c = 0; c < idx.size(); ++c) {
        out.samples.col(static_cast<Index>(c)) = ds.samples.col(static_cast<Index>(idx[c]));
        out.labels.push_back(ds.labels.at(idx[c]));
    }
    return out;
}

inline LabeledDataset head(const LabeledDataset& ds, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, ds.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return take(ds, idx);
}

/// Keeps only `classes` and relabels them to 0..J'−1 in ascending original
/// order.
inline LabeledDataset select_classes(const LabeledDataset& ds, std::vector<int> classes) {
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::vector<int> remap(static_cast<std::size_t>(ds.num_classes), -1);
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] < 0 || classes[i] >= ds.num_classes) throw DomainError("class id out of range");
        remap[static_cast<std::size_t>(classes[i])] = static_cast<int>(i);
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (remap[static_cast<std::size_t>(ds.labels[i])] >= 0) keep.push_back(i);
    }
    LabeledDataset out = take(ds, keep);
    for (auto& y : out.labels) y = remap[static_cast<std::size_t>(y)];
    out.num_classes = static_cast<int>(classes.size());
    return out;
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Whole file contents; gzip input (magic 1f 8b) is inflated transparently.
inline std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (f == nullptr) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::vector<std::uint8_t> buf(1 << 16);
    for (;;) {
        const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (n < 0) {
            int err = 0;
            std::string msg = gzerror(f, &err);
            gzclose(f);
            throw IoError("read error in " + path.string() + ": " + msg);
        }
        if (n == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    }
    gzclose(f);
    return out;
}

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t pos,
                               const std::string& what) {
    if (pos + 4 > b.size()) throw TruncatedFile(what + ": header truncated");
    return (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) |
           (std::uint32_t{b[pos + 2]} << 8) | std::uint32_t{b[pos + 3]};
}

} // namespace detail

/// Parses an IDX image/label pair. Pixels are scaled by 1/255 and flattened
/// row-major into columns. All-zero images are dropped with a warning.
inline LabeledDataset load_idx(const std::filesystem::path& images_path,
                               const std::filesystem::path& labels_path) {
    const auto img = read_maybe_gzip(images_path);
    const auto lab = read_maybe_gzip(labels_path);
    const std::string iname = images_path.string();
    const std::string lname = labels_path.string();

    if (const auto m = detail::read_be32(img, 0, iname); m != kIdxImageMagic) {
        throw BadMagic(iname + ": bad image magic");
    }
    if (const auto m = detail::read_be32(lab, 0, lname); m != kIdxLabelMagic) {
        throw BadMagic(lname + ": bad label magic");
    }
    const std::size_t n_img = detail::read_be32(img, 4, iname);
    const std::size_t rows = detail::read_be32(img, 8, iname);
    const std::size_t cols = detail::read_be32(img, 12, iname);
    const std::size_t n_lab = detail::read_be32(lab, 4, lname);
    if (n_img != n_lab) {
        throw CountMismatch("image count " + std::to_string(n_img) + " != label count " +
                            std::to_string(n_lab));
    }
    const std::size_t d = rows * cols;
    if (img.size() < 16 + n_img * d) throw TruncatedFile(iname + ": pixel data truncated");
    if (lab.size() < 8 + n_lab) throw TruncatedFile(lname + ": label data truncated");

    LabeledDataset ds;
    ds.samples.resize(static_cast<Index>(d), static_cast<Index>(n_img));
    ds.labels.reserve(n_img);
    int max_label = -1;
    Index kept = 0;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n_img; ++i) {
        const std::uint8_t* px = img.data() + 16 + i * d;
        bool nonzero = false;
        for (std::size_t p = 0; p < d; ++p) {
            ds.samples(static_cast<Index>(p), kept) = px[p] / 255.0;
            nonzero = nonzero || px[p] != 0;
        }
        if (!nonzero) {
            ++dropped;
            continue;
        }
        const int y = lab[8 + i];
        ds.labels.push_back(y);
        max_label = std::max(max_label, y);
        ++kept;
    }
    ds.samples.conservativeResize(Eigen::NoChange, kept);
    ds.num_classes = max_label + 1;
    if (dropped > 0) {
        std::cerr << "warning: dropped " << dropped << " all-zero image(s) from " << iname << "\n";
    }
    if (ds.size() == 0) throw CountMismatch(iname + ": no usable samples");
    return ds;
}

/// Locates `<prefix>-images-idx3-ubyte[.gz]` and the matching labels file.
inline LabeledDataset load_idx_dir(const std::filesystem::path& dir, const std::string& prefix) {
    auto find = [&](const std::string& stem) {
        for (const char* ext : {"", ".gz"}) {
            const auto p = dir / (stem + ext);
            if (std::filesystem::exists(p)) return p;
        }
        throw IoError("missing " + (dir / stem).string() + "[.gz]");
    };
    return load_idx(find(prefix + "-images-idx3-ubyte"), find(prefix + "-labels-idx1-ubyte"));
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class j lives in its own r-dimensional subspace; the J subspaces are
/// mutually orthogonal. Samples are random unit combinations of the basis plus
/// N(0, σ²) noise, normalized. Labels cycle 0..J−1.
inline LabeledDataset synth_subspace_dataset(Index d, int classes, std::size_t m, Index r,
                                             double noise, Rng& rng) {
    if (classes < 1 || r < 1 || d < 1) throw DimensionError("dimensions must be positive");
    if (r * classes > d) {
        throw DimensionError("r·J = " + std::to_string(r * classes) + " exceeds d = " +
                             std::to_string(d));
    }
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix g(d, d);
    for (Index c = 0; c < d; ++c)
        for (Index i = 0; i < d; ++i) g(i, c) = gauss(rng);
    const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();

    LabeledDataset ds;
    ds.num_classes = classes;
    ds.samples.resize(d, static_cast<Index>(m));
    ds.labels.resize(m);
    Vector coef(r);
    Vector x(d);
    for (std::size_t i = 0; i < m; ++i) {
        const int j = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = j;
        for (Index t = 0; t < r; ++t) coef(t) = gauss(rng);
        coef.normalize();
        x = q.middleCols(j * r, r) * coef;
        if (noise > 0.0) {
            for (Index t = 0; t < d; ++t) x(t) += noise * gauss(rng);
        }
        ds.samples.col(static_cast<Index>(i)) = x / x.norm();
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

inline std::size_t classes_on_device(const LabeledDataset& ds, std::span<const std::size_t> idx) {
    std::set<int> seen;
    for (auto i : idx) seen.insert(ds.labels[i]);
    return seen.size();
}

namespace detail {

inline void check_capacity(const LabeledDataset& ds, std::size_t devices, std::size_t per_device) {
    if (devices == 0 || per_device == 0) throw InsufficientSamples("device and sample counts must be positive");
    if (devices * per_device > ds.size()) {
        throw InsufficientSamples("need " + std::to_string(devices * per_device) +
                                  " samples, dataset has " + std::to_string(ds.size()));
    }
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

inline Partition slice(std::span<const std::size_t> idx, std::size_t devices, std::size_t per_device) {
    Partition p;
    for (std::size_t k = 0; k < devices; ++k) {
        const auto first = idx.begin() + static_cast<std::ptrdiff_t>(k * per_device);
        p.devices.emplace_back(first, first + static_cast<std::ptrdiff_t>(per_device));
    }
    return p;
}

} // namespace detail

/// Each device gets `per_device` samples drawn uniformly without replacement.
inline Partition partition_iid(const LabeledDataset& ds, std::size_t devices, std::size_t per_device,
                               Rng& rng) {
    detail::check_capacity(ds, devices, per_device);
    const auto idx = detail::shuffled_indices(ds.size(), rng);
    return detail::slice(idx, devices, per_device);
}

inline constexpr int kShardRedrawLimit = 1000;

/// Draws K·m_k samples at random, sorts them by class and hands out
/// consecutive runs of m_k. Draws that leave some device with more than two
/// classes are redrawn; when no draw within kShardRedrawLimit attempts meets
/// the limit (small K relative to J), the last draw is kept and a warning is
/// printed. With K = 1 the limit does not apply.
inline Partition partition_noniid_shards(const LabeledDataset& ds, std::size_t devices,
                                         std::size_t per_device, Rng& rng) {
    detail::check_capacity(ds, devices, per_device);
    Partition p;
    for (int attempt = 0; attempt < kShardRedrawLimit; ++attempt) {
        auto idx = detail::shuffled_indices(ds.size(), rng);
        idx.resize(devices * per_device);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });
        p = detail::slice(idx, devices, per_device);
        if (devices == 1) return p;
        const bool ok = std::all_of(p.devices.begin(), p.devices.end(), [&](const auto& dev) {
            return classes_on_device(ds, dev) <= 2;
        });
        if (ok) return p;
    }
    std::cerr << "warning: non-IID(a) partition with " << devices << " devices could not keep every "
              << "device at two classes or fewer\n";
    return p;
}

/// Device k is assigned one class (a random permutation of the classes,
/// cycled when K > J) and receives `per_device` samples of it.
inline Partition partition_noniid_singleclass(const LabeledDataset& ds, std::size_t devices,
                                              std::size_t per_device, Rng& rng) {
    detail::check_capacity(ds, devices, per_device);
    const auto classes = static_cast<std::size_t>(ds.num_classes);
    std::vector<std::vector<std::size_t>> pools(classes);
    for (auto i : detail::shuffled_indices(ds.size(), rng)) {
        pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    std::vector<int> order(classes);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> used(classes, 0);
    Partition p;
    for (std::size_t k = 0; k < devices; ++k) {
        const auto c = static_cast<std::size_t>(order[k % classes]);
        if (used[c] + per_device > pools[c].size()) {
            throw InsufficientSamples("class " + std::to_string(c) + " has too few samples for device " +
                                      std::to_string(k));
        }
        const auto first = pools[c].begin() + static_cast<std::ptrdiff_t>(used[c]);
        p.devices.emplace_back(first, first + static_cast<std::ptrdiff_t>(per_device));
        used[c] += per_device;
    }
    return p;
}

inline Partition make_partition(PartitionMode mode, const LabeledDataset& ds, std::size_t devices,
                                std::size_t per_device, Rng& rng) {
    switch (mode) {
    case PartitionMode::iid: return partition_iid(ds, devices, per_device, rng);
    case PartitionMode::noniid_a: return partition_noniid_shards(ds, devices, per_device, rng);
    case PartitionMode::noniid_b: return partition_noniid_singleclass(ds, devices, per_device, rng);
    }
    throw DomainError("unknown partition mode");
}

} // namespace lolafl
