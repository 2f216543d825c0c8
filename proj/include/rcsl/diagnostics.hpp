// Diagnostic dumps: class-token attention maps as grayscale pixmaps,
// reconstruction triptychs (input | reconstruction | absolute error) as color
// pixmaps, and per-image embeddings as CSV for external projection tools.
#pragma once

#include "rcsl/decoder.hpp"
#include "rcsl/trainer.hpp"

namespace rcsl {

struct DumpSummary {
    int64_t attention_maps = 0;
    int64_t triptychs = 0;
    int64_t embedding_rows = 0;
};

// Side-by-side panels separated by 1-pixel white columns.
inline Image triptych(const Image& input, const Image& recon) {
    check(input.h == recon.h && input.w == recon.w, "triptych: panel sizes differ");
    const int64_t h = input.h, w = input.w;
    Image out = Image::filled(h, 3 * w + 2, 1.0);
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c)
            for (int64_t k = 0; k < 3; ++k) {
                const double rv = std::min(std::max(recon.at(r, c, k), 0.0), 1.0);
                out.at(r, c, k) = input.at(r, c, k);
                out.at(r, w + 1 + c, k) = rv;
                out.at(r, 2 * w + 2 + c, k) = std::fabs(input.at(r, c, k) - rv);
            }
    return out;
}

inline DumpSummary dump_diagnostics(const VisionEncoder& encoder,
                                    const ReconstructionDecoder* decoder,
                                    const AugmentationPolicy& policy, const Dataset& ds,
                                    const std::string& out_dir, int64_t sample_count = 8) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    check(fs::is_directory(out_dir), "dump_diagnostics: cannot create directory ", out_dir);
    {
        std::ofstream probe_file(fs::path(out_dir) / ".write_probe");
        check(probe_file.good(), "dump_diagnostics: directory not writable: ", out_dir);
    }
    fs::remove(fs::path(out_dir) / ".write_probe", ec);

    DumpSummary summary;
    NoGradScope ng;

    // embeddings for the full dataset: id,label,<repr_dim floats>
    {
        auto features = extract_features(encoder, policy, ds);
        std::ofstream csv(fs::path(out_dir) / "embeddings.csv");
        check(csv.good(), "dump_diagnostics: cannot write embeddings.csv");
        csv << std::setprecision(17);
        for (size_t i = 0; i < features.size(); ++i) {
            csv << i << "," << ds.at(i).label;
            for (double v : features[i]) csv << "," << v;
            csv << "\n";
            ++summary.embedding_rows;
        }
    }

    const int64_t n = std::min<int64_t>(sample_count, static_cast<int64_t>(ds.size()));
    const int64_t last_block = encoder.config().depth - 1;
    for (int64_t i = 0; i < n; ++i) {
        const Image& img = ds.at(static_cast<size_t>(i)).image;
        Image normed = normalize(img, policy);
        if (encoder.config().variant == EncoderVariant::Vit) {
            Tensor one = images_to_tensor({&normed});
            for (int64_t head = 0; head < encoder.config().heads; ++head) {
                auto map = encoder.attention_map(one, last_block, head);
                write_pgm((fs::path(out_dir) / ("attention_img" + std::to_string(i) + "_head" +
                                                std::to_string(head) + ".pgm"))
                              .string(),
                          encoder.config().grid_side(), encoder.config().grid_side(), map);
                ++summary.attention_maps;
            }
        }
        if (decoder) {
            Tensor one = images_to_tensor({&normed});
            EncodeResult enc = encoder.encode(one, true);
            Tensor recon = decoder->reconstruct(enc.taps);
            Image recon_img = tensor_to_image(recon, 0);
            write_ppm(
                (fs::path(out_dir) / ("reconstruction_img" + std::to_string(i) + ".ppm")).string(),
                triptych(img, recon_img));
            ++summary.triptychs;
        }
    }
    return summary;
}

} // namespace rcsl
