#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdlm/rng.hpp"
#include "cdlm/tensor.hpp"

namespace cdlm {

/// Images [n, c, h, w] in [0, 1]; labels only where the protocol allows them.
struct DomainBatch {
    Tensor<float> images;
    std::optional<std::vector<int>> labels;

    std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
    Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
    /// Rows [begin, begin + count) as a new batch.
    DomainBatch slice(std::size_t begin, std::size_t count) const;
    DomainBatch gather(const std::vector<std::size_t>& rows) const;
    /// Throws ErrorKind::Domain on pixels outside [0, 1] or labels outside [0, classes).
    void validate(std::size_t classes) const;
};

/// Target-domain images with the labels removed. Training code accepts only
/// this type for the target, so target labels cannot reach it.
struct UnlabeledImages {
    Tensor<float> images;

    std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
};

UnlabeledImages strip_labels(const DomainBatch& batch);

enum class DatasetKind { SyntheticGlyphs, IdxFiles, Composited };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::SyntheticGlyphs;
    std::size_t classes = 8;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    std::uint64_t seed = 0;
};

struct DomainPair {
    DomainBatch source_train, source_test, target_train, target_test;
    std::size_t classes = 0;
};

/// Largest class count the glyph generator supports.
inline constexpr std::size_t kMaxGlyphClasses = 10;

/// Grayscale glyph of class `label`, white on black, jittered by `rng`.
/// Pixels are quantized to multiples of 1/255.
std::vector<float> render_glyph(std::size_t label, std::size_t height, std::size_t width, Rng& rng);

/// Source: clean glyphs replicated to 3 channels. Target: independent glyph
/// draws composited over procedural colored backgrounds. Class-balanced and
/// deterministic in spec.seed.
DomainPair gen_synthetic_pair(const DatasetSpec& spec);

/// Colored texture patches from which compositing crops backgrounds.
class BackgroundBank {
   public:
    static BackgroundBank procedural(std::uint64_t seed, std::size_t count = 64, std::size_t size = 48);
    /// Every .ppm file in `dir` (sorted by name).
    static BackgroundBank from_directory(const std::filesystem::path& dir);

    std::size_t size() const { return textures_.size(); }
    /// Random crop resampled to h x w, RGB planar.
    std::vector<float> crop(std::size_t h, std::size_t w, Rng& rng) const;

   private:
    std::vector<Tensor<float>> textures_;  // [3, th, tw]
};

/// Per-image background crop blended as |background - foreground|. Grayscale
/// input (1 or 3 identical channels) yields a 3-channel batch; labels are kept.
DomainBatch composite_background(const DomainBatch& x, std::uint64_t seed, const BackgroundBank* bank = nullptr);

/// Nearest-neighbour resize; throws ErrorKind::Configuration on zero extents.
DomainBatch resize_nearest(const DomainBatch& x, std::size_t height, std::size_t width);

/// Replicates a single-channel batch to `channels` channels.
DomainBatch replicate_channels(const DomainBatch& x, std::size_t channels = 3);

/// IDX (big-endian) images 0x00000803 and labels 0x00000801. Pixels are
/// scaled to [0, 1]; the result has one channel. Errors carry byte offsets.
DomainBatch load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
/// Writes channel 0 of `x` quantized to bytes.
void save_idx(const DomainBatch& x, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

/// MNIST-style directory: {train,t10k}-{images-idx3,labels-idx1}-ubyte.
/// Test images are split off the same files when no t10k pair exists.
DomainPair load_idx_pair(const std::filesystem::path& source_dir, const std::filesystem::path& target_dir,
                         std::size_t height, std::size_t width);

/// Binary PGM (1 channel) / PPM (3 channels), 8-bit.
void write_pnm(const std::filesystem::path& path, std::span<const float> planar, std::size_t channels,
               std::size_t height, std::size_t width);
/// Returns planar float pixels and sets the geometry.
std::vector<float> read_pnm(const std::filesystem::path& path, std::size_t& channels, std::size_t& height,
                            std::size_t& width);
/// Images laid out in a grid (cols per row) as one PPM.
void write_mosaic(const std::filesystem::path& path, const Tensor<float>& images, std::size_t cols);

/// <dir>/{source,target}_{train,test}/NNNNN.ppm + labels.csv per split.
void export_dataset(const DomainPair& pair, const std::filesystem::path& dir);
DomainPair load_dataset_dir(const std::filesystem::path& dir);

/// Epoch-shuffled minibatch indices; identical sequences for identical seeds.
class BatchIterator {
   public:
    BatchIterator(std::size_t count, std::size_t batch, std::uint64_t seed);
    std::vector<std::size_t> next();

   private:
    void reshuffle();

    std::size_t count_, batch_, cursor_ = 0;
    Rng rng_;
    std::vector<std::size_t> order_;
};

}  // namespace cdlm
