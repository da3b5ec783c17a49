#include "cdlm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace cdlm {

namespace fs = std::filesystem;

namespace {

float quantize(double v) {
    return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

struct Point {
    double x, y;
};

double segment_distance(Point p, Point a, Point b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qx = a.x + t * dx - p.x, qy = a.y + t * dy - p.y;
    return std::sqrt(qx * qx + qy * qy);
}

struct GlyphShape {
    std::vector<std::pair<Point, Point>> segments;
    double ring_radius = 0;  // > 0 adds a circle centred at the origin
};

GlyphShape glyph_shape(std::size_t label) {
    using S = std::pair<Point, Point>;
    switch (label) {
        case 0: return {{S{{0, -0.8}, {0, 0.8}}}};
        case 1: return {{S{{-0.8, 0}, {0.8, 0}}}};
        case 2: return {{S{{-0.6, 0.7}, {0.6, -0.7}}}};
        case 3: return {{S{{-0.6, -0.7}, {0.6, 0.7}}}};
        case 4: return {{S{{0, -0.75}, {0, 0.75}}, S{{-0.75, 0}, {0.75, 0}}}};
        case 5: return {{S{{-0.6, -0.6}, {0.6, 0.6}}, S{{-0.6, 0.6}, {0.6, -0.6}}}};
        case 6: {
            const double r = 0.65;
            return {{S{{-r, -r}, {r, -r}}, S{{r, -r}, {r, r}}, S{{r, r}, {-r, r}}, S{{-r, r}, {-r, -r}}}};
        }
        case 7: return {{}, 0.65};
        case 8: return {{S{{0, -0.75}, {0.7, 0.6}}, S{{0.7, 0.6}, {-0.7, 0.6}}, S{{-0.7, 0.6}, {0, -0.75}}}};
        case 9: return {{S{{-0.5, -0.75}, {-0.5, 0.65}}, S{{-0.5, 0.65}, {0.6, 0.65}}}};
        default: break;
    }
    fail(ErrorKind::Configuration, "glyph class " + std::to_string(label) + " exceeds the generator's " +
                                       std::to_string(kMaxGlyphClasses) + " classes");
}

std::vector<int> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
    for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
    return labels;
}

DomainBatch glyph_batch(std::size_t n, const DatasetSpec& spec, Rng& rng) {
    auto labels = balanced_labels(n, spec.classes, rng);
    const std::size_t plane = spec.height * spec.width;
    Tensor<float> images({n, 3, spec.height, spec.width});
    auto* dst = images.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        auto g = render_glyph(static_cast<std::size_t>(labels[i]), spec.height, spec.width, rng);
        for (std::size_t c = 0; c < 3; ++c) std::copy(g.begin(), g.end(), dst + (i * 3 + c) * plane);
    }
    return {std::move(images), std::move(labels)};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const fs::path& path) {
    if (bytes.size() < offset + 4) {
        fail(ErrorKind::Format, path.string() + ": truncated header, need 4 bytes at byte offset " +
                                    std::to_string(offset) + " but file has " + std::to_string(bytes.size()));
    }
    return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
           (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_be32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    os.write(b, 4);
}

std::string split_name(int i) {
    static const char* names[] = {"source_train", "source_test", "target_train", "target_test"};
    return names[i];
}

}  // namespace

DomainBatch DomainBatch::slice(std::size_t begin, std::size_t count) const {
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
    return gather(rows);
}

DomainBatch DomainBatch::gather(const std::vector<std::size_t>& rows) const {
    if (rows.empty()) fail(ErrorKind::Usage, "gather needs at least one row");
    const std::size_t per = images.size() / size();
    Shape shape = images.shape();
    shape[0] = rows.size();
    std::vector<float> data(rows.size() * per);
    std::optional<std::vector<int>> out_labels;
    if (labels) out_labels.emplace(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= size()) fail(ErrorKind::Usage, "row " + std::to_string(rows[i]) + " out of range");
        std::copy_n(images.data().data() + rows[i] * per, per, data.data() + i * per);
        if (labels) (*out_labels)[i] = (*labels)[rows[i]];
    }
    return {Tensor<float>(std::move(shape), std::move(data)), std::move(out_labels)};
}

void DomainBatch::validate(std::size_t classes) const {
    if (images.rank() != 4) fail(ErrorKind::Dimension, "image batch must be [n, c, h, w]");
    for (std::size_t k = 0; k < images.size(); ++k) {
        const float v = images[k];
        if (!(v >= 0.0f && v <= 1.0f)) {
            fail(ErrorKind::Domain, "pixel " + std::to_string(v) + " at flat index " + std::to_string(k) +
                                        " outside [0, 1]");
        }
    }
    if (labels) {
        if (labels->size() != size()) fail(ErrorKind::Dimension, "label count does not match image count");
        for (int y : *labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= classes) {
                fail(ErrorKind::Domain, "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
            }
        }
    }
}

UnlabeledImages strip_labels(const DomainBatch& batch) { return {batch.images}; }

std::vector<float> render_glyph(std::size_t label, std::size_t height, std::size_t width, Rng& rng) {
    const auto shape = glyph_shape(label);
    const double unit = static_cast<double>(std::min(height, width)) / 2.0;
    const double scale = rng.uniform(0.6, 0.85) * unit;
    const double angle = rng.uniform(-12.0, 12.0) * std::numbers::pi / 180.0;
    const double cx = static_cast<double>(width) / 2.0 + rng.uniform(-0.12, 0.12) * unit;
    const double cy = static_cast<double>(height) / 2.0 + rng.uniform(-0.12, 0.12) * unit;
    const double half_width = rng.uniform(0.7, 1.2) * unit / 8.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto map = [&](Point p) { return Point{cx + scale * (ca * p.x - sa * p.y), cy + scale * (sa * p.x + ca * p.y)}; };

    std::vector<std::pair<Point, Point>> segs;
    for (const auto& [a, b] : shape.segments) segs.emplace_back(map(a), map(b));
    const double ring = shape.ring_radius * scale;

    std::vector<float> out(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const Point p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
            double d = 1e9;
            for (const auto& [a, b] : segs) d = std::min(d, segment_distance(p, a, b));
            if (ring > 0) d = std::min(d, std::abs(std::hypot(p.x - cx, p.y - cy) - ring));
            out[y * width + x] = quantize(half_width + 0.5 - d);
        }
    }
    return out;
}

DomainPair gen_synthetic_pair(const DatasetSpec& spec) {
    if (spec.classes < 2 || spec.classes > kMaxGlyphClasses) {
        fail(ErrorKind::Configuration, "class count must lie in [2, " + std::to_string(kMaxGlyphClasses) + "]");
    }
    if (spec.train_size == 0 || spec.test_size == 0 || spec.height < 8 || spec.width < 8) {
        fail(ErrorKind::Configuration, "dataset sizes must be positive and images at least 8x8");
    }
    Rng src(Rng::derive(spec.seed, 1));
    Rng tgt(Rng::derive(spec.seed, 2));
    const auto bank = BackgroundBank::procedural(Rng::derive(spec.seed, 3));

    DomainPair pair;
    pair.classes = spec.classes;
    pair.source_train = glyph_batch(spec.train_size, spec, src);
    pair.source_test = glyph_batch(spec.test_size, spec, src);
    pair.target_train = composite_background(glyph_batch(spec.train_size, spec, tgt), Rng::derive(spec.seed, 4), &bank);
    pair.target_test = composite_background(glyph_batch(spec.test_size, spec, tgt), Rng::derive(spec.seed, 5), &bank);
    return pair;
}

BackgroundBank BackgroundBank::procedural(std::uint64_t seed, std::size_t count, std::size_t size) {
    Rng rng(seed);
    BackgroundBank bank;
    for (std::size_t t = 0; t < count; ++t) {
        Tensor<float> tex({3, size, size});
        double base[3];
        for (auto& b : base) b = rng.uniform(0.0, 1.0);
        struct Grating {
            double fx, fy, phase, color[3];
        };
        std::vector<Grating> gratings(3);
        for (auto& g : gratings) {
            const double freq = rng.uniform(0.04, 0.25) * 2.0 * std::numbers::pi;
            const double dir = rng.uniform(0.0, std::numbers::pi);
            g.fx = freq * std::cos(dir);
            g.fy = freq * std::sin(dir);
            g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            for (auto& c : g.color) c = rng.uniform(-0.3, 0.3);
        }
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                double px[3] = {base[0], base[1], base[2]};
                for (const auto& g : gratings) {
                    const double s = std::sin(g.fx * static_cast<double>(x) + g.fy * static_cast<double>(y) + g.phase);
                    for (int c = 0; c < 3; ++c) px[c] += g.color[c] * s;
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    tex[(c * size + y) * size + x] = static_cast<float>(std::clamp(px[c] + 0.06 * rng.normal(), 0.0, 1.0));
                }
            }
        }
        bank.textures_.push_back(std::move(tex));
    }
    return bank;
}

BackgroundBank BackgroundBank::from_directory(const fs::path& dir) {
    std::vector<fs::path> files;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (e.path().extension() == ".ppm") files.push_back(e.path());
    }
    if (ec) fail(ErrorKind::Io, "cannot list " + dir.string() + ": " + ec.message());
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(ErrorKind::Usage, "no .ppm backgrounds in " + dir.string());
    BackgroundBank bank;
    for (const auto& f : files) {
        std::size_t c, h, w;
        auto px = read_pnm(f, c, h, w);
        if (c != 3) fail(ErrorKind::Format, f.string() + ": background must be RGB");
        bank.textures_.emplace_back(Shape{3, h, w}, std::move(px));
    }
    return bank;
}

std::vector<float> BackgroundBank::crop(std::size_t h, std::size_t w, Rng& rng) const {
    const auto& tex = textures_[rng.below(textures_.size())];
    const std::size_t th = tex.dim(1), tw = tex.dim(2);
    // Textures smaller than the crop are sampled with nearest-neighbour stretching.
    const std::size_t ch = std::min(h, th), cw = std::min(w, tw);
    const std::size_t oy = rng.below(th - ch + 1), ox = rng.below(tw - cw + 1);
    std::vector<float> out(3 * h * w);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                out[(c * h + y) * w + x] = tex[(c * th + oy + y * ch / h) * tw + ox + x * cw / w];
    return out;
}

DomainBatch composite_background(const DomainBatch& x, std::uint64_t seed, const BackgroundBank* bank) {
    if (x.images.rank() != 4) fail(ErrorKind::Dimension, "composite_background needs [n, c, h, w] images");
    const std::size_t n = x.size(), c = x.images.dim(1), h = x.images.dim(2), w = x.images.dim(3);
    std::optional<BackgroundBank> own;
    if (!bank) {
        own = BackgroundBank::procedural(Rng::derive(seed, 7));
        bank = &*own;
    }
    Rng rng(seed);
    const std::size_t plane = h * w;
    Tensor<float> out({n, 3, h, w});
    for (std::size_t i = 0; i < n; ++i) {
        const float* fg = x.images.data().data() + i * c * plane;
        auto bg = bank->crop(h, w, rng);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t p = 0; p < plane; ++p)
                out[(i * 3 + ch) * plane + p] = quantize(std::abs(static_cast<double>(bg[ch * plane + p]) - fg[p]));
    }
    return {std::move(out), x.labels};
}

DomainBatch resize_nearest(const DomainBatch& x, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) fail(ErrorKind::Configuration, "resize target extents must be positive");
    const std::size_t n = x.size(), c = x.images.dim(1), ih = x.images.dim(2), iw = x.images.dim(3);
    if (ih == height && iw == width) return x;
    Tensor<float> out({n, c, height, width});
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t xx = 0; xx < width; ++xx)
                out[(p * height + y) * width + xx] = x.images[(p * ih + y * ih / height) * iw + xx * iw / width];
    return {std::move(out), x.labels};
}

DomainBatch replicate_channels(const DomainBatch& x, std::size_t channels) {
    if (x.images.dim(1) == channels) return x;
    if (x.images.dim(1) != 1) fail(ErrorKind::Dimension, "only single-channel batches can be replicated");
    const std::size_t n = x.size(), plane = x.images.dim(2) * x.images.dim(3);
    Tensor<float> out({n, channels, x.images.dim(2), x.images.dim(3)});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < channels; ++c)
            std::copy_n(x.images.data().data() + i * plane, plane, out.data().data() + (i * channels + c) * plane);
    return {std::move(out), x.labels};
}

DomainBatch load_idx(const fs::path& images_path, const fs::path& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    const auto img_magic = read_be32(img, 0, images_path);
    if (img_magic != 0x00000803) {
        fail(ErrorKind::Format, images_path.string() + ": bad magic 0x" + [&] {
            std::ostringstream os;
            os << std::hex << img_magic;
            return os.str();
        }() + " at byte offset 0 (expected 0x00000803)");
    }
    const std::size_t n = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    if (n == 0 || rows == 0 || cols == 0) fail(ErrorKind::Format, images_path.string() + ": zero extent in header");
    const std::size_t need = 16 + n * rows * cols;
    if (img.size() < need) {
        fail(ErrorKind::Format, images_path.string() + ": truncated pixel data, expected " + std::to_string(need) +
                                    " bytes but file ends at byte offset " + std::to_string(img.size()));
    }
    const auto lab_magic = read_be32(lab, 0, labels_path);
    if (lab_magic != 0x00000801) {
        fail(ErrorKind::Format, labels_path.string() + ": bad magic at byte offset 0 (expected 0x00000801)");
    }
    const std::size_t nl = read_be32(lab, 4, labels_path);
    if (nl != n) {
        fail(ErrorKind::Format, labels_path.string() + ": header at byte offset 4 declares " + std::to_string(nl) +
                                    " labels for " + std::to_string(n) + " images");
    }
    if (lab.size() < 8 + n) {
        fail(ErrorKind::Format, labels_path.string() + ": truncated label data, file ends at byte offset " +
                                    std::to_string(lab.size()));
    }
    Tensor<float> images({n, 1, rows, cols});
    for (std::size_t k = 0; k < n * rows * cols; ++k) images[k] = static_cast<float>(img[16 + k]) / 255.0f;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = lab[8 + i];
    return {std::move(images), std::move(labels)};
}

void save_idx(const DomainBatch& x, const fs::path& images_path, const fs::path& labels_path) {
    if (!x.labels) fail(ErrorKind::Usage, "save_idx needs labels");
    const std::size_t n = x.size(), c = x.images.dim(1), h = x.images.dim(2), w = x.images.dim(3);
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) fail(ErrorKind::Io, "cannot write " + images_path.string() + " / " + labels_path.string());
    put_be32(img, 0x00000803);
    put_be32(img, static_cast<std::uint32_t>(n));
    put_be32(img, static_cast<std::uint32_t>(h));
    put_be32(img, static_cast<std::uint32_t>(w));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < h * w; ++p)
            img.put(static_cast<char>(std::lround(std::clamp(x.images[i * c * h * w + p], 0.0f, 1.0f) * 255.0f)));
    put_be32(lab, 0x00000801);
    put_be32(lab, static_cast<std::uint32_t>(n));
    for (int y : *x.labels) lab.put(static_cast<char>(y));
    if (!img || !lab) fail(ErrorKind::Io, "write failed for " + images_path.string());
}

DomainPair load_idx_pair(const fs::path& source_dir, const fs::path& target_dir, std::size_t height,
                         std::size_t width) {
    auto load_dir = [&](const fs::path& dir, DomainBatch& train, DomainBatch& test) {
        train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
        if (fs::exists(dir / "t10k-images-idx3-ubyte")) {
            test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
        } else {
            const std::size_t n_test = std::max<std::size_t>(1, train.size() / 5);
            test = train.slice(train.size() - n_test, n_test);
            train = train.slice(0, train.size() - n_test);
        }
        train = replicate_channels(resize_nearest(train, height, width));
        test = replicate_channels(resize_nearest(test, height, width));
    };
    DomainPair pair;
    load_dir(source_dir, pair.source_train, pair.source_test);
    if (target_dir.empty()) {
        // MNISTM-style target manufactured from the source images.
        pair.target_train = composite_background(pair.source_train, 0x5eed01);
        pair.target_test = composite_background(pair.source_test, 0x5eed02);
    } else {
        load_dir(target_dir, pair.target_train, pair.target_test);
    }
    int max_label = 0;
    for (const auto* b : {&pair.source_train, &pair.source_test, &pair.target_train, &pair.target_test})
        for (int y : *b->labels) max_label = std::max(max_label, y);
    pair.classes = static_cast<std::size_t>(max_label) + 1;
    return pair;
}

void write_pnm(const fs::path& path, std::span<const float> planar, std::size_t channels, std::size_t height,
               std::size_t width) {
    if (channels != 1 && channels != 3) fail(ErrorKind::Usage, "PNM output needs 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
    const std::size_t plane = height * width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < channels; ++c)
            os.put(static_cast<char>(std::lround(std::clamp(planar[c * plane + p], 0.0f, 1.0f) * 255.0f)));
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<float> read_pnm(const fs::path& path, std::size_t& channels, std::size_t& height, std::size_t& width) {
    const auto bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        std::string t;
        while (pos < bytes.size()) {
            const char ch = static_cast<char>(bytes[pos]);
            if (ch == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!t.empty()) break;
                ++pos;
            } else {
                t.push_back(ch);
                ++pos;
            }
        }
        if (t.empty()) fail(ErrorKind::Format, path.string() + ": truncated header at byte offset " + std::to_string(pos));
        return t;
    };
    const auto magic = token();
    if (magic != "P5" && magic != "P6") fail(ErrorKind::Format, path.string() + ": not a binary PGM/PPM");
    channels = magic == "P5" ? 1 : 3;
    try {
        width = std::stoul(token());
        height = std::stoul(token());
        if (std::stoul(token()) != 255) fail(ErrorKind::Format, path.string() + ": only maxval 255 is supported");
    } catch (const std::logic_error&) {
        fail(ErrorKind::Format, path.string() + ": malformed header");
    }
    ++pos;  // single whitespace before the raster
    const std::size_t plane = height * width;
    if (bytes.size() < pos + plane * channels) {
        fail(ErrorKind::Format, path.string() + ": truncated raster, file ends at byte offset " + std::to_string(bytes.size()));
    }
    std::vector<float> out(plane * channels);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < channels; ++c)
            out[c * plane + p] = static_cast<float>(bytes[pos + p * channels + c]) / 255.0f;
    return out;
}

void write_mosaic(const fs::path& path, const Tensor<float>& images, std::size_t cols) {
    const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    cols = std::max<std::size_t>(1, std::min(cols, n));
    const std::size_t rows = (n + cols - 1) / cols;
    const std::size_t H = rows * h, W = cols * w;
    std::vector<float> canvas(3 * H * W, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = i / cols, q = i % cols;
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    canvas[(ch * H + r * h + y) * W + q * w + x] = images[((i * c + std::min(ch, c - 1)) * h + y) * w + x];
    }
    write_pnm(path, canvas, 3, H, W);
}

void export_dataset(const DomainPair& pair, const fs::path& dir) {
    const DomainBatch* splits[] = {&pair.source_train, &pair.source_test, &pair.target_train, &pair.target_test};
    for (int s = 0; s < 4; ++s) {
        const auto& b = *splits[s];
        const auto sub = dir / split_name(s);
        std::error_code ec;
        fs::create_directories(sub, ec);
        if (ec) fail(ErrorKind::Io, "cannot create " + sub.string() + ": " + ec.message());
        std::ofstream csv(sub / "labels.csv");
        if (!csv) fail(ErrorKind::Io, "cannot write " + (sub / "labels.csv").string());
        csv << "file,label\n";
        const std::size_t c = b.images.dim(1), h = b.images.dim(2), w = b.images.dim(3);
        for (std::size_t i = 0; i < b.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.%s", i, c == 1 ? "pgm" : "ppm");
            write_pnm(sub / name, b.images.data().subspan(i * c * h * w, c * h * w), c, h, w);
            csv << name << ',' << (b.labels ? (*b.labels)[i] : -1) << '\n';
        }
        if (!csv) fail(ErrorKind::Io, "write failed for " + (sub / "labels.csv").string());
    }
}

DomainPair load_dataset_dir(const fs::path& dir) {
    DomainPair pair;
    DomainBatch* splits[] = {&pair.source_train, &pair.source_test, &pair.target_train, &pair.target_test};
    int max_label = 0;
    for (int s = 0; s < 4; ++s) {
        const auto sub = dir / split_name(s);
        std::ifstream csv(sub / "labels.csv");
        if (!csv) fail(ErrorKind::Io, "cannot open " + (sub / "labels.csv").string());
        std::string line;
        std::getline(csv, line);
        if (line != "file,label") fail(ErrorKind::Format, (sub / "labels.csv").string() + ": unexpected header");
        std::vector<float> data;
        std::vector<int> labels;
        Shape geom;
        while (std::getline(csv, line)) {
            if (line.empty()) continue;
            const auto comma = line.find(',');
            if (comma == std::string::npos) fail(ErrorKind::Format, (sub / "labels.csv").string() + ": bad row '" + line + "'");
            std::size_t c, h, w;
            auto px = read_pnm(sub / line.substr(0, comma), c, h, w);
            if (geom.empty()) geom = {c, h, w};
            if (geom != Shape{c, h, w}) fail(ErrorKind::Format, sub.string() + ": images differ in geometry");
            data.insert(data.end(), px.begin(), px.end());
            try {
                labels.push_back(std::stoi(line.substr(comma + 1)));
            } catch (const std::logic_error&) {
                fail(ErrorKind::Format, (sub / "labels.csv").string() + ": bad label in '" + line + "'");
            }
            max_label = std::max(max_label, labels.back());
        }
        if (labels.empty()) fail(ErrorKind::Format, sub.string() + ": no images");
        splits[s]->images = Tensor<float>({labels.size(), geom[0], geom[1], geom[2]}, std::move(data));
        splits[s]->labels = std::move(labels);
        *splits[s] = replicate_channels(*splits[s]);
    }
    pair.classes = static_cast<std::size_t>(max_label) + 1;
    return pair;
}

BatchIterator::BatchIterator(std::size_t count, std::size_t batch, std::uint64_t seed)
    : count_(count), batch_(batch), rng_(seed) {
    if (count == 0 || batch == 0) fail(ErrorKind::Usage, "BatchIterator needs a positive count and batch size");
    order_.resize(count);
    reshuffle();
}

void BatchIterator::reshuffle() {
    for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
    for (std::size_t i = count_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
}

std::vector<std::size_t> BatchIterator::next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
        if (cursor_ == count_) reshuffle();
        out.push_back(order_[cursor_++]);
    }
    return out;
}

}  // namespace cdlm
