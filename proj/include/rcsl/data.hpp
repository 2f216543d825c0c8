// Datasets and augmentation. Images are row-major HxWx3 f64 in [0, 1].
//
// Two sources: a seeded synthetic generator (colored shapes on gradient
// backgrounds; the shape type is the class label) and a directory loader
// (one subdirectory per class, portable-pixmap or raw-tensor files).
#pragma once

#include <filesystem>
#include <fstream>

#include "rcsl/tensor.hpp"

namespace rcsl {

struct Image {
    int64_t h = 0;
    int64_t w = 0;
    std::vector<double> rgb; // h*w*3

    static Image filled(int64_t h, int64_t w, double v = 0.0) {
        Image img;
        img.h = h;
        img.w = w;
        img.rgb.assign(static_cast<size_t>(h * w * 3), v);
        return img;
    }

    double& at(int64_t r, int64_t c, int64_t ch) {
        return rgb[static_cast<size_t>((r * w + c) * 3 + ch)];
    }
    double at(int64_t r, int64_t c, int64_t ch) const {
        return rgb[static_cast<size_t>((r * w + c) * 3 + ch)];
    }
};

inline double mse(const Image& a, const Image& b) {
    check(a.h == b.h && a.w == b.w, "mse: image sizes differ");
    double s = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = a.rgb[i] - b.rgb[i];
        s += d * d;
    }
    return s / static_cast<double>(a.rgb.size());
}

// Peak signal-to-noise ratio for unit-range images: 10*log10(1/mse).
inline double psnr(const Image& reference, const Image& candidate) {
    return 10.0 * std::log10(1.0 / std::max(mse(reference, candidate), 1e-12));
}

// ---------------------------------------------------------------------------
// Pixmap / raw tensor I/O
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_ppm: cannot open ", path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> bytes(img.rgb.size());
    for (size_t i = 0; i < img.rgb.size(); ++i) {
        double v = std::min(std::max(img.rgb[i], 0.0), 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    check(f.good(), "write_ppm: write failed for ", path);
}

// Grayscale pixmap in [0,1]; values are max-normalized if any exceed 1.
inline void write_pgm(const std::string& path, int64_t h, int64_t w,
                      const std::vector<double>& values) {
    check(static_cast<int64_t>(values.size()) == h * w, "write_pgm: ", values.size(),
          " values for ", h, "x", w);
    double peak = 0.0;
    for (double v : values) peak = std::max(peak, v);
    const double scale = peak > 1.0 ? 1.0 / peak : 1.0;
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_pgm: cannot open ", path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double v : values) {
        double s = std::min(std::max(v * scale, 0.0), 1.0);
        const unsigned char b = static_cast<unsigned char>(std::lround(s * 255.0));
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
    check(f.good(), "write_pgm: write failed for ", path);
}

namespace io_detail {

inline void skip_pnm_whitespace(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline int64_t read_pnm_int(std::istream& in) {
    skip_pnm_whitespace(in);
    int64_t v = 0;
    check(static_cast<bool>(in >> v), "read_ppm: malformed header");
    return v;
}

} // namespace io_detail

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "read_ppm: cannot open ", path);
    std::string magic;
    f >> magic;
    check(magic == "P6" || magic == "P3", "read_ppm: ", path, " is not a P6/P3 pixmap");
    const int64_t w = io_detail::read_pnm_int(f);
    const int64_t h = io_detail::read_pnm_int(f);
    const int64_t maxval = io_detail::read_pnm_int(f);
    check(w > 0 && h > 0 && maxval > 0 && maxval <= 255, "read_ppm: unsupported header in ",
          path);
    Image img = Image::filled(h, w);
    const double inv = 1.0 / static_cast<double>(maxval);
    if (magic == "P6") {
        f.get(); // single whitespace after maxval
        std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 3));
        f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        check(f.gcount() == static_cast<std::streamsize>(bytes.size()),
              "read_ppm: truncated pixel data in ", path);
        for (size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = bytes[i] * inv;
    } else {
        for (auto& v : img.rgb) v = static_cast<double>(io_detail::read_pnm_int(f)) * inv;
    }
    return img;
}

// Raw tensor container: "RTEN" magic, u32 rank, i64 dims, f64 payload.
inline void write_raw_tensor(const std::string& path, const Shape& shape,
                             const std::vector<double>& data) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_raw_tensor: cannot open ", path);
    f.write("RTEN", 4);
    const uint32_t rank = static_cast<uint32_t>(shape.size());
    f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int64_t d : shape) f.write(reinterpret_cast<const char*>(&d), sizeof(d));
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    check(f.good(), "write_raw_tensor: write failed for ", path);
}

inline Image read_raw_tensor_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "read_raw_tensor: cannot open ", path);
    char magic[4] = {};
    f.read(magic, 4);
    check(std::string(magic, 4) == "RTEN", "read_raw_tensor: bad magic in ", path);
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    check(rank == 3, "read_raw_tensor: image tensor must be rank 3 (HxWx3), got rank ", rank);
    int64_t dims[3] = {};
    for (auto& d : dims) f.read(reinterpret_cast<char*>(&d), sizeof(d));
    check(dims[2] == 3, "read_raw_tensor: last dim must be 3 channels, got ", dims[2]);
    Image img = Image::filled(dims[0], dims[1]);
    f.read(reinterpret_cast<char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size() * sizeof(double)));
    check(f.gcount() == static_cast<std::streamsize>(img.rgb.size() * sizeof(double)),
          "read_raw_tensor: truncated payload in ", path);
    return img;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct LabeledImage {
    Image image;
    int64_t label = 0;
};

struct SyntheticSpec {
    int64_t classes = 4;
    int64_t count = 512;
    int64_t size = 32;
    uint64_t seed = 7;
};

namespace synth_detail {

// One generated sample: a bright shape over a darker two-tone gradient with
// mild pixel noise. Class = shape type.
inline Image render(const SyntheticSpec& spec, int64_t label, Rng& rng) {
    const int64_t s = spec.size;
    Image img = Image::filled(s, s);
    // gradient background between two dark colors, random orientation
    double c0[3], c1[3];
    for (int k = 0; k < 3; ++k) {
        c0[k] = rng.uniform(0.05, 0.45);
        c1[k] = rng.uniform(0.05, 0.45);
    }
    const bool horizontal = rng.bernoulli(0.5);
    for (int64_t r = 0; r < s; ++r)
        for (int64_t c = 0; c < s; ++c) {
            const double t = horizontal ? static_cast<double>(c) / (s - 1)
                                        : static_cast<double>(r) / (s - 1);
            for (int64_t k = 0; k < 3; ++k) img.at(r, c, k) = (1 - t) * c0[k] + t * c1[k];
        }
    // bright foreground color, kept away from the background band
    double fg[3];
    for (int k = 0; k < 3; ++k) fg[k] = rng.uniform(0.55, 1.0);
    const double cx = rng.uniform(0.32, 0.68) * s;
    const double cy = rng.uniform(0.32, 0.68) * s;
    const double half = rng.uniform(0.18, 0.30) * s;
    auto paint = [&](int64_t r, int64_t c) {
        for (int64_t k = 0; k < 3; ++k) img.at(r, c, k) = fg[k];
    };
    for (int64_t r = 0; r < s; ++r)
        for (int64_t c = 0; c < s; ++c) {
            const double dx = c + 0.5 - cx;
            const double dy = r + 0.5 - cy;
            bool inside = false;
            switch (label % 4) {
            case 0: // square
                inside = std::fabs(dx) <= half && std::fabs(dy) <= half;
                break;
            case 1: // disk
                inside = dx * dx + dy * dy <= half * half;
                break;
            case 2: // upward triangle
                inside = dy >= -half && dy <= half &&
                         std::fabs(dx) <= (dy + half) * 0.5;
                break;
            default: // plus sign
                inside = (std::fabs(dx) <= half * 0.38 && std::fabs(dy) <= half) ||
                         (std::fabs(dy) <= half * 0.38 && std::fabs(dx) <= half);
                break;
            }
            if (inside) paint(r, c);
        }
    for (auto& v : img.rgb) v = std::min(std::max(v + rng.uniform(-0.02, 0.02), 0.0), 1.0);
    return img;
}

} // namespace synth_detail

class Dataset {
public:
    static Dataset synthetic(const SyntheticSpec& spec) {
        check(spec.classes >= 1 && spec.classes <= 4, "synthetic dataset: classes must be in "
              "[1, 4], got ", spec.classes);
        check(spec.count >= 1 && spec.size >= 8, "synthetic dataset: bad count/size");
        Dataset ds;
        ds.num_classes_ = spec.classes;
        for (int64_t i = 0; i < spec.count; ++i) {
            const int64_t label = i % spec.classes;
            Rng rng(seed_stream(spec.seed, "sample") + static_cast<uint64_t>(i) * 0x9e3779b9ull);
            ds.items_.push_back(LabeledImage{synth_detail::render(spec, label, rng), label});
        }
        return ds;
    }

    // Directory layout: <root>/<class_name>/*.ppm|*.rten; classes are the
    // sorted subdirectory names.
    static Dataset from_directory(const std::string& root) {
        namespace fs = std::filesystem;
        check(fs::is_directory(root), "dataset: not a directory: ", root);
        std::vector<std::string> class_dirs;
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
        std::sort(class_dirs.begin(), class_dirs.end());
        check(!class_dirs.empty(), "dataset: no class subdirectories under ", root);
        Dataset ds;
        ds.num_classes_ = static_cast<int64_t>(class_dirs.size());
        for (size_t label = 0; label < class_dirs.size(); ++label) {
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[label])) {
                const std::string ext = e.path().extension().string();
                if (ext == ".ppm" || ext == ".rten") files.push_back(e.path().string());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                Image img = f.size() >= 5 && f.substr(f.size() - 5) == ".rten"
                                ? read_raw_tensor_image(f)
                                : read_ppm(f);
                ds.items_.push_back(LabeledImage{std::move(img), static_cast<int64_t>(label)});
            }
        }
        check(!ds.items_.empty(), "dataset: no .ppm/.rten files under ", root);
        return ds;
    }

    // "synthetic:classes=4,count=512,size=32,seed=7" or a directory path.
    static Dataset from_spec(const std::string& spec) {
        if (spec.rfind("synthetic:", 0) == 0) return synthetic(parse_synthetic_spec(spec));
        return from_directory(spec);
    }

    static SyntheticSpec parse_synthetic_spec(const std::string& spec) {
        SyntheticSpec s;
        std::string body = spec.substr(std::string("synthetic:").size());
        std::istringstream is(body);
        std::string kv;
        while (std::getline(is, kv, ',')) {
            if (kv.empty()) continue;
            const auto eq = kv.find('=');
            check(eq != std::string::npos, "synthetic spec: expected key=value, got '", kv, "'");
            const std::string key = kv.substr(0, eq);
            const std::string val = kv.substr(eq + 1);
            if (key == "classes") s.classes = std::stoll(val);
            else if (key == "count") s.count = std::stoll(val);
            else if (key == "size") s.size = std::stoll(val);
            else if (key == "seed") s.seed = std::stoull(val);
            else fail("synthetic spec: unknown key '", key, "'");
        }
        return s;
    }

    size_t size() const { return items_.size(); }
    const LabeledImage& at(size_t i) const { return items_.at(i); }
    int64_t num_classes() const { return num_classes_; }

    Dataset subset(const std::vector<size_t>& indices) const {
        Dataset out;
        out.num_classes_ = num_classes_;
        for (size_t i : indices) out.items_.push_back(items_.at(i));
        return out;
    }

private:
    std::vector<LabeledImage> items_;
    int64_t num_classes_ = 0;
};

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
    double crop_scale_min = 0.6;
    double crop_scale_max = 1.0;
    double hflip_prob = 0.5;
    double jitter_brightness = 0.4;
    double jitter_contrast = 0.4;
    double jitter_saturation = 0.2;
    double norm_mean[3] = {0.5, 0.5, 0.5};
    double norm_std[3] = {0.25, 0.25, 0.25};

    void validate() const {
        check(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0,
              "augmentation: crop scale range [", crop_scale_min, ", ", crop_scale_max,
              "] invalid");
        check(hflip_prob >= 0.0 && hflip_prob <= 1.0, "augmentation: bad flip probability");
        check(jitter_brightness >= 0.0 && jitter_brightness < 1.0 && jitter_contrast >= 0.0 &&
                  jitter_contrast < 1.0 && jitter_saturation >= 0.0 && jitter_saturation < 1.0,
              "augmentation: jitter strengths must be in [0, 1)");
        for (double s : norm_std) check(s > 0.0, "augmentation: norm std must be positive");
    }
};

namespace aug_detail {

// Bilinear resample of a crop rectangle to the full image size
// (align-corners-false). The full-frame same-size case is an exact copy.
inline Image resize_crop(const Image& src, int64_t y0, int64_t x0, int64_t ch, int64_t cw) {
    if (y0 == 0 && x0 == 0 && ch == src.h && cw == src.w) return src;
    Image out = Image::filled(src.h, src.w);
    const double sy = static_cast<double>(ch) / static_cast<double>(src.h);
    const double sx = static_cast<double>(cw) / static_cast<double>(src.w);
    for (int64_t r = 0; r < src.h; ++r) {
        double fy = (static_cast<double>(r) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(ch - 1));
        const int64_t r0 = static_cast<int64_t>(std::floor(fy));
        const int64_t r1 = std::min(r0 + 1, ch - 1);
        const double wy = fy - static_cast<double>(r0);
        for (int64_t c = 0; c < src.w; ++c) {
            double fx = (static_cast<double>(c) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(cw - 1));
            const int64_t c0 = static_cast<int64_t>(std::floor(fx));
            const int64_t c1 = std::min(c0 + 1, cw - 1);
            const double wx = fx - static_cast<double>(c0);
            for (int64_t k = 0; k < 3; ++k) {
                const double v00 = src.at(y0 + r0, x0 + c0, k);
                const double v01 = src.at(y0 + r0, x0 + c1, k);
                const double v10 = src.at(y0 + r1, x0 + c0, k);
                const double v11 = src.at(y0 + r1, x0 + c1, k);
                out.at(r, c, k) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                  wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }
    return out;
}

} // namespace aug_detail

// One augmented raw view: random resized crop, horizontal flip, color jitter.
// Values stay in [0, 1]. Deterministic given the RNG state.
inline Image augment_once(const Image& input, const AugmentationPolicy& policy, Rng& rng) {
    check(input.h >= 2 && input.w >= 2, "augment: degenerate input image");
    // random resized crop
    const double area = rng.uniform(policy.crop_scale_min, policy.crop_scale_max);
    const double aspect = std::exp(rng.uniform(std::log(0.75), std::log(4.0 / 3.0)));
    int64_t cw, ch;
    if (area >= 1.0) {
        cw = input.w;
        ch = input.h;
    } else {
        cw = std::min<int64_t>(
            input.w, std::max<int64_t>(1, std::llround(input.w * std::sqrt(area * aspect))));
        ch = std::min<int64_t>(
            input.h, std::max<int64_t>(1, std::llround(input.h * std::sqrt(area / aspect))));
    }
    check(cw >= 1 && ch >= 1, "augment: empty crop region");
    const int64_t x0 = rng.uniform_int(input.w - cw + 1);
    const int64_t y0 = rng.uniform_int(input.h - ch + 1);
    Image out = aug_detail::resize_crop(input, y0, x0, ch, cw);
    // horizontal flip
    if (rng.bernoulli(policy.hflip_prob)) {
        for (int64_t r = 0; r < out.h; ++r)
            for (int64_t c = 0; c < out.w / 2; ++c)
                for (int64_t k = 0; k < 3; ++k)
                    std::swap(out.at(r, c, k), out.at(r, out.w - 1 - c, k));
    }
    // color jitter: brightness, contrast, saturation (skipped at strength 0)
    if (policy.jitter_brightness > 0.0) {
        const double f = 1.0 + rng.uniform(-policy.jitter_brightness, policy.jitter_brightness);
        for (auto& v : out.rgb) v *= f;
    }
    if (policy.jitter_contrast > 0.0) {
        const double f = 1.0 + rng.uniform(-policy.jitter_contrast, policy.jitter_contrast);
        double mean = 0.0;
        for (double v : out.rgb) mean += v;
        mean /= static_cast<double>(out.rgb.size());
        for (auto& v : out.rgb) v = mean + f * (v - mean);
    }
    if (policy.jitter_saturation > 0.0) {
        const double f = 1.0 + rng.uniform(-policy.jitter_saturation, policy.jitter_saturation);
        for (int64_t r = 0; r < out.h; ++r)
            for (int64_t c = 0; c < out.w; ++c) {
                const double grey = 0.299 * out.at(r, c, 0) + 0.587 * out.at(r, c, 1) +
                                    0.114 * out.at(r, c, 2);
                for (int64_t k = 0; k < 3; ++k)
                    out.at(r, c, k) = grey + f * (out.at(r, c, k) - grey);
            }
    }
    for (auto& v : out.rgb) v = std::min(std::max(v, 0.0), 1.0);
    return out;
}

inline Image normalize(const Image& raw, const AugmentationPolicy& policy) {
    Image out = raw;
    for (int64_t r = 0; r < out.h; ++r)
        for (int64_t c = 0; c < out.w; ++c)
            for (int64_t k = 0; k < 3; ++k)
                out.at(r, c, k) = (out.at(r, c, k) - policy.norm_mean[k]) / policy.norm_std[k];
    return out;
}

struct TwoViews {
    Image v1_raw;  // reconstruction target: augmented, before normalization
    Image v1_norm; // encoder input, first view
    Image v2_norm; // encoder input, second view
};

// v1, v2 drawn independently from the same policy; the raw first view is the
// reconstruction target.
inline TwoViews augment_two_views(const Image& input, const AugmentationPolicy& policy,
                                  Rng& rng) {
    for (double v : input.rgb)
        check(v >= 0.0 && v <= 1.0, "augment_two_views: input values must lie in [0, 1]");
    TwoViews views;
    views.v1_raw = augment_once(input, policy, rng);
    views.v1_norm = normalize(views.v1_raw, policy);
    views.v2_norm = normalize(augment_once(input, policy, rng), policy);
    return views;
}

// Stack images into a (B, H, W, 3) tensor.
inline Tensor images_to_tensor(const std::vector<const Image*>& batch) {
    check(!batch.empty(), "images_to_tensor: empty batch");
    const int64_t h = batch[0]->h, w = batch[0]->w;
    std::vector<double> data;
    data.reserve(batch.size() * static_cast<size_t>(h * w * 3));
    for (const Image* img : batch) {
        check(img->h == h && img->w == w, "images_to_tensor: mixed image sizes");
        data.insert(data.end(), img->rgb.begin(), img->rgb.end());
    }
    return Tensor::from_data({static_cast<int64_t>(batch.size()), h, w, 3}, std::move(data));
}

inline Image tensor_to_image(const Tensor& t, int64_t batch_index) {
    check(t.rank() == 4 && t.dim(3) == 3, "tensor_to_image: expected (B,H,W,3), got ",
          shape_str(t.shape()));
    Image img = Image::filled(t.dim(1), t.dim(2));
    const int64_t n = t.dim(1) * t.dim(2) * 3;
    std::copy_n(t.ptr() + batch_index * n, n, img.rgb.begin());
    return img;
}

} // namespace rcsl
