// Versioned binary checkpoint: magic, version, config text, RNG state,
// negative-queue contents, named parameter table, optimizer moments, then a
// payload-length field and FNV-1a checksum. Loads verify magic, version,
// length, and checksum before touching any payload.
#pragma once

#include <cstring>
#include <deque>
#include <fstream>

#include "rcsl/tensor.hpp"

namespace rcsl {

struct CheckpointData {
    std::string config_text;
    uint64_t step = 0;
    std::string data_rng_state;
    bool has_queue = false;
    int64_t queue_dim = 0;
    std::deque<std::vector<double>> queue_entries;
    std::vector<std::pair<std::string, Tensor>> tensors;
    int64_t optimizer_step = 0;
    std::vector<std::vector<double>> optimizer_m;
    std::vector<std::vector<double>> optimizer_v;
};

namespace ckpt_detail {

inline constexpr char kMagic[9] = "RCSLCKPT"; // 8 bytes written
inline constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

inline void put_string(std::string& buf, const std::string& s) {
    put<uint64_t>(buf, s.size());
    buf.append(s);
}

class Reader {
public:
    Reader(const char* data, size_t size) : data_(data), size_(size) {}

    template <typename T>
    T get() {
        T v;
        take(&v, sizeof(T));
        return v;
    }

    std::string get_string() {
        const uint64_t n = get<uint64_t>();
        check(n <= remaining(), "checkpoint: truncated string field");
        std::string s(data_ + pos_, n);
        pos_ += n;
        return s;
    }

    void take(void* dst, size_t n) {
        check(n <= remaining(), "checkpoint: truncated file (length check failed)");
        std::memcpy(dst, data_ + pos_, n);
        pos_ += n;
    }

    size_t remaining() const { return size_ - pos_; }

private:
    const char* data_;
    size_t size_;
    size_t pos_ = 0;
};

} // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    using namespace ckpt_detail;
    std::string payload;
    put_string(payload, ckpt.config_text);
    put<uint64_t>(payload, ckpt.step);
    put_string(payload, ckpt.data_rng_state);

    put<uint32_t>(payload, ckpt.has_queue ? 1u : 0u);
    if (ckpt.has_queue) {
        put<int64_t>(payload, ckpt.queue_dim);
        put<uint32_t>(payload, static_cast<uint32_t>(ckpt.queue_entries.size()));
        for (const auto& e : ckpt.queue_entries) {
            check(static_cast<int64_t>(e.size()) == ckpt.queue_dim,
                  "checkpoint: queue entry dim mismatch");
            put_bytes(payload, e.data(), e.size() * sizeof(double));
        }
    }

    put<uint32_t>(payload, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        put_string(payload, name);
        put<uint8_t>(payload, 0); // dtype: f64
        put<uint32_t>(payload, static_cast<uint32_t>(tensor.rank()));
        for (int64_t d : tensor.shape()) put<int64_t>(payload, d);
        put_bytes(payload, tensor.ptr(), static_cast<size_t>(tensor.numel()) * sizeof(double));
    }

    put<int64_t>(payload, ckpt.optimizer_step);
    check(ckpt.optimizer_m.size() == ckpt.optimizer_v.size(),
          "checkpoint: optimizer moment lists differ");
    put<uint32_t>(payload, static_cast<uint32_t>(ckpt.optimizer_m.size()));
    for (size_t i = 0; i < ckpt.optimizer_m.size(); ++i) {
        check(ckpt.optimizer_m[i].size() == ckpt.optimizer_v[i].size(),
              "checkpoint: optimizer slot size mismatch");
        put<uint64_t>(payload, ckpt.optimizer_m[i].size());
        put_bytes(payload, ckpt.optimizer_m[i].data(),
                  ckpt.optimizer_m[i].size() * sizeof(double));
        put_bytes(payload, ckpt.optimizer_v[i].data(),
                  ckpt.optimizer_v[i].size() * sizeof(double));
    }

    std::ofstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open ", path, " for writing");
    f.write(kMagic, 8);
    const uint32_t version = kVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t length = payload.size();
    f.write(reinterpret_cast<const char*>(&length), sizeof(length));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    const uint64_t checksum = fnv1a64(payload.data(), payload.size());
    f.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    check(f.good(), "checkpoint: write failed for ", path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open ", path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    check(raw.size() >= 8 + sizeof(uint32_t) + 2 * sizeof(uint64_t),
          "checkpoint: file too short: ", path);
    check(std::memcmp(raw.data(), kMagic, 8) == 0, "checkpoint: bad magic in ", path);
    uint32_t version;
    std::memcpy(&version, raw.data() + 8, sizeof(version));
    check(version == kVersion, "checkpoint: version ", version, " unsupported (expected ",
          kVersion, ")");
    uint64_t length;
    std::memcpy(&length, raw.data() + 12, sizeof(length));
    const size_t header = 8 + sizeof(uint32_t) + sizeof(uint64_t);
    check(raw.size() == header + length + sizeof(uint64_t),
          "checkpoint: declared payload length ", length, " does not match file size");
    uint64_t stored_checksum;
    std::memcpy(&stored_checksum, raw.data() + header + length, sizeof(stored_checksum));
    const uint64_t actual = fnv1a64(raw.data() + header, length);
    check(stored_checksum == actual, "checkpoint: checksum mismatch in ", path,
          " (stored ", stored_checksum, ", computed ", actual, ")");

    Reader r(raw.data() + header, length);
    CheckpointData ckpt;
    ckpt.config_text = r.get_string();
    ckpt.step = r.get<uint64_t>();
    ckpt.data_rng_state = r.get_string();

    ckpt.has_queue = r.get<uint32_t>() != 0;
    if (ckpt.has_queue) {
        ckpt.queue_dim = r.get<int64_t>();
        const uint32_t count = r.get<uint32_t>();
        check(ckpt.queue_dim > 0, "checkpoint: bad queue dim");
        for (uint32_t i = 0; i < count; ++i) {
            std::vector<double> e(static_cast<size_t>(ckpt.queue_dim));
            r.take(e.data(), e.size() * sizeof(double));
            ckpt.queue_entries.push_back(std::move(e));
        }
    }

    const uint32_t tensor_count = r.get<uint32_t>();
    for (uint32_t i = 0; i < tensor_count; ++i) {
        std::string name = r.get_string();
        const uint8_t dtype = r.get<uint8_t>();
        check(dtype == 0, "checkpoint: unsupported dtype ", int(dtype), " for ", name);
        const uint32_t rank = r.get<uint32_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.get<int64_t>();
        std::vector<double> data(static_cast<size_t>(numel_of(shape)));
        r.take(data.data(), data.size() * sizeof(double));
        ckpt.tensors.emplace_back(std::move(name),
                                  Tensor::from_data(std::move(shape), std::move(data)));
    }

    ckpt.optimizer_step = r.get<int64_t>();
    const uint32_t slots = r.get<uint32_t>();
    for (uint32_t i = 0; i < slots; ++i) {
        const uint64_t n = r.get<uint64_t>();
        std::vector<double> m(n), v(n);
        r.take(m.data(), n * sizeof(double));
        r.take(v.data(), n * sizeof(double));
        ckpt.optimizer_m.push_back(std::move(m));
        ckpt.optimizer_v.push_back(std::move(v));
    }
    check(r.remaining() == 0, "checkpoint: trailing bytes after payload");
    return ckpt;
}

} // namespace rcsl
