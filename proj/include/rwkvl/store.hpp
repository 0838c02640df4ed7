#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "rwkvl/error.hpp"
#include "rwkvl/half.hpp"
#include "rwkvl/log.hpp"
#include "rwkvl/model.hpp"

namespace rwkvl {

constexpr char kMagic[8] = {'R', 'W', 'K', 'V', 'L', '1', '\0', '\0'};
constexpr uint32_t kFormatVersion = 1;
constexpr uint64_t kAlign = 64;

enum class Dtype : uint8_t { f32 = 0, f16 = 1, i8 = 2, bit1 = 3, u32 = 4 };

inline size_t dtype_bytes(Dtype d) {
    switch (d) {
        case Dtype::f32:
        case Dtype::u32:
            return 4;
        case Dtype::f16:
            return 2;
        case Dtype::i8:
            return 1;
        case Dtype::bit1:
            return 0;  // sub-byte, sized as a whole tensor
    }
    throw FormatError("unknown dtype code");
}

inline uint64_t tensor_byte_length(Dtype d, uint64_t elts) {
    return d == Dtype::bit1 ? (elts + 7) / 8 : elts * dtype_bytes(d);
}

struct TensorEntry {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> shape;
    uint64_t offset = 0;
    uint64_t length = 0;
    std::string companion;  // name of the per-row scale tensor, if any

    uint64_t elts() const {
        uint64_t n = 1;
        for (uint64_t d : shape) n *= d;
        return n;
    }
    uint64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    uint64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    uint64_t row_bytes() const { return tensor_byte_length(dtype, cols()); }
};

struct TensorDirectory {
    uint32_t version = kFormatVersion;
    std::string config_json;
    std::vector<TensorEntry> entries;
    std::unordered_map<std::string, size_t> index;

    void rebuild_index() {
        index.clear();
        for (size_t i = 0; i < entries.size(); i++) {
            if (!index.emplace(entries[i].name, i).second)
                throw FormatError("duplicate tensor name: " + entries[i].name);
        }
    }

    bool contains(const std::string& name) const { return index.count(name) != 0; }

    const TensorEntry& find(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("tensor not found: " + name);
        return entries[it->second];
    }

    uint64_t total_tensor_bytes() const {
        uint64_t n = 0;
        for (const auto& e : entries) n += e.length;
        return n;
    }
};

// --- memory metering ---

enum class MemTag : size_t { embedding = 0, time_mix, channel_mix, head, predictor, state, scratch };
constexpr size_t kNumMemTags = 7;

inline const char* mem_tag_name(MemTag t) {
    static const char* names[kNumMemTags] = {"embedding", "time_mix", "channel_mix", "head",
                                             "predictor", "state",    "scratch"};
    return names[static_cast<size_t>(t)];
}

// Tracks logical storage bytes per component via paired charge/release.
// A combined block-weights group (time_mix + channel_mix) gets its own peak so
// layerwise residency bounds can be asserted against one number.
class MemoryMeter {
  public:
    void charge(MemTag tag, uint64_t bytes) {
        std::lock_guard<std::mutex> lock(mu_);
        current_[idx(tag)] += bytes;
        peak_[idx(tag)] = std::max(peak_[idx(tag)], current_[idx(tag)]);
        if (tag == MemTag::time_mix || tag == MemTag::channel_mix) {
            blocks_current_ += bytes;
            blocks_peak_ = std::max(blocks_peak_, blocks_current_);
        }
        total_peak_ = std::max(total_peak_, total_current_locked());
    }

    void release(MemTag tag, uint64_t bytes) {
        std::lock_guard<std::mutex> lock(mu_);
        if (current_[idx(tag)] < bytes)
            throw std::logic_error(std::string("meter underflow on ") + mem_tag_name(tag));
        current_[idx(tag)] -= bytes;
        if (tag == MemTag::time_mix || tag == MemTag::channel_mix) blocks_current_ -= bytes;
    }

    uint64_t current(MemTag tag) const {
        std::lock_guard<std::mutex> lock(mu_);
        return current_[idx(tag)];
    }
    uint64_t peak(MemTag tag) const {
        std::lock_guard<std::mutex> lock(mu_);
        return peak_[idx(tag)];
    }
    uint64_t blocks_group_peak() const {
        std::lock_guard<std::mutex> lock(mu_);
        return blocks_peak_;
    }
    uint64_t total_current() const {
        std::lock_guard<std::mutex> lock(mu_);
        return total_current_locked();
    }
    uint64_t total_peak() const {
        std::lock_guard<std::mutex> lock(mu_);
        return total_peak_;
    }
    uint64_t sum_of_peaks() const {
        std::lock_guard<std::mutex> lock(mu_);
        uint64_t n = 0;
        for (uint64_t p : peak_) n += p;
        return n;
    }

  private:
    static size_t idx(MemTag t) { return static_cast<size_t>(t); }
    uint64_t total_current_locked() const {
        uint64_t n = 0;
        for (uint64_t c : current_) n += c;
        return n;
    }

    mutable std::mutex mu_;
    uint64_t current_[kNumMemTags] = {};
    uint64_t peak_[kNumMemTags] = {};
    uint64_t blocks_current_ = 0, blocks_peak_ = 0;
    uint64_t total_peak_ = 0;
};

// Maps a tensor name to the component it is accounted under.
inline MemTag component_of(const std::string& name) {
    if (name.rfind("emb", 0) == 0) return MemTag::embedding;
    if (name.rfind("head.", 0) == 0 || name.rfind("ln_out", 0) == 0) return MemTag::head;
    if (name.find(".pred.") != std::string::npos) return MemTag::predictor;
    if (name.find(".tm.") != std::string::npos || name.find(".ln1.") != std::string::npos)
        return MemTag::time_mix;
    if (name.find(".cm.") != std::string::npos || name.find(".ln2.") != std::string::npos)
        return MemTag::channel_mix;
    return MemTag::scratch;
}

// --- config JSON ---

inline std::string config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["n_layers"] = c.n_layers;
    j["dim"] = c.dim;
    j["n_heads"] = c.n_heads;
    j["vocab"] = c.vocab;
    j["ffn_mult"] = c.ffn_mult;
    j["k"] = c.k;
    j["mlp_threshold"] = c.mlp_threshold;
    j["quant_percentile"] = c.quant_percentile;
    j["p_min"] = c.head_policy.p_min;
    j["k_min"] = c.head_policy.k_min;
    j["k_max"] = c.head_policy.k_max;
    j["embed_cache_capacity"] = c.embed_cache_capacity;
    j["head_clusters"] = c.head_clusters;
    return j.dump();
}

inline ModelConfig config_from_json(const std::string& s) {
    nlohmann::json j = nlohmann::json::parse(s);
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<size_t>();
    c.dim = j.at("dim").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.vocab = j.at("vocab").get<size_t>();
    c.ffn_mult = j.at("ffn_mult").get<float>();
    c.k = j.at("k").get<size_t>();
    c.mlp_threshold = j.at("mlp_threshold").get<float>();
    c.quant_percentile = j.at("quant_percentile").get<float>();
    c.head_policy.p_min = j.at("p_min").get<float>();
    c.head_policy.k_min = j.at("k_min").get<size_t>();
    c.head_policy.k_max = j.at("k_max").get<size_t>();
    c.embed_cache_capacity = j.at("embed_cache_capacity").get<size_t>();
    c.head_clusters = j.value("head_clusters", size_t{200});
    c.validate();
    return c;
}

// --- tensor payloads for writing ---

struct NamedTensor {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> shape;
    Vector floats;               // payload for f32/f16 (converted on write)
    std::vector<uint32_t> u32s;  // payload for u32
    std::vector<int8_t> i8s;     // payload for i8
    Bitmask bits;                // payload for bit1
    std::string companion;

    uint64_t elts() const {
        uint64_t n = 1;
        for (uint64_t d : shape) n *= d;
        return n;
    }
};

inline NamedTensor tensor_f32(std::string name, std::vector<uint64_t> shape, Vector data) {
    NamedTensor t;
    t.name = std::move(name);
    t.dtype = Dtype::f32;
    t.shape = std::move(shape);
    t.floats = std::move(data);
    return t;
}

inline NamedTensor tensor_f16(std::string name, std::vector<uint64_t> shape, Vector data) {
    NamedTensor t = tensor_f32(std::move(name), std::move(shape), std::move(data));
    t.dtype = Dtype::f16;
    return t;
}

// The canonical on-disk layout of a model. FFN matrices are neuron-major
// (cm_wk transposed to F x D, cm_wv F x D) so one predicted neuron is one
// contiguous row in each.
inline std::vector<NamedTensor> plan_model_tensors(const Model& m) {
    std::vector<NamedTensor> out;
    const size_t d = m.cfg.dim;
    out.push_back(tensor_f16("emb", {m.cfg.vocab, d}, m.emb.data));
    out.push_back(tensor_f32("ln_out.g", {d}, m.ln_out_g));
    out.push_back(tensor_f32("ln_out.b", {d}, m.ln_out_b));
    out.push_back(tensor_f16("head.h", {m.cfg.vocab, d}, m.head.data));
    for (size_t l = 0; l < m.cfg.n_layers; l++) {
        const BlockWeights& b = m.blocks[l];
        const std::string p = "blk." + std::to_string(l) + ".";
        auto add_projection = [&](const std::string& name, const Projection& proj) {
            if (const auto* dense = std::get_if<Matrix>(&proj)) {
                out.push_back(tensor_f16(name, {dense->rows, dense->cols}, dense->data));
            } else if (const auto* pair = std::get_if<LowRankPair>(&proj)) {
                out.push_back(tensor_f16(name + ".L", {pair->l.rows, pair->l.cols}, pair->l.data));
                out.push_back(tensor_f16(name + ".R", {pair->r.rows, pair->r.cols}, pair->r.data));
            } else {
                const auto& e = std::get<EnhancedLowRank>(proj);
                out.push_back(tensor_f16(name + ".L", {e.l.rows, e.l.cols}, e.l.data));
                out.push_back(tensor_f16(name + ".R", {e.r.rows, e.r.cols}, e.r.data));
                out.push_back(tensor_f32(name + ".d", {e.d.size()}, e.d));
            }
        };
        add_projection(p + "tm.wr", b.wr);
        add_projection(p + "tm.wk", b.wk);
        add_projection(p + "tm.wv", b.wv);
        add_projection(p + "tm.wg", b.wg);
        out.push_back(tensor_f16(p + "tm.wo", {d, d}, b.wo.data));
        out.push_back(tensor_f32(p + "tm.decay_raw", {d}, b.decay_raw));
        out.push_back(tensor_f32(p + "tm.bonus", {d}, b.bonus));
        out.push_back(tensor_f32(p + "tm.mix_r", {d}, b.mix_r));
        out.push_back(tensor_f32(p + "tm.mix_k", {d}, b.mix_k));
        out.push_back(tensor_f32(p + "tm.mix_v", {d}, b.mix_v));
        out.push_back(tensor_f32(p + "tm.mix_g", {d}, b.mix_g));
        out.push_back(tensor_f32(p + "ln1.g", {d}, b.ln1_g));
        out.push_back(tensor_f32(p + "ln1.b", {d}, b.ln1_b));
        add_projection(p + "cm.wr", b.cm_wr);
        out.push_back(tensor_f16(p + "cm.wk", {b.cm_wk.rows, b.cm_wk.cols}, b.cm_wk.data));
        out.push_back(tensor_f16(p + "cm.wv", {b.cm_wv.rows, b.cm_wv.cols}, b.cm_wv.data));
        out.push_back(tensor_f32(p + "cm.mix_r", {d}, b.mix_cm_r));
        out.push_back(tensor_f32(p + "cm.mix_k", {d}, b.mix_cm_k));
        out.push_back(tensor_f32(p + "ln2.g", {d}, b.ln2_g));
        out.push_back(tensor_f32(p + "ln2.b", {d}, b.ln2_b));
    }
    return out;
}

// --- writing ---

namespace detail {

template <typename T>
void put_pod(std::string& buf, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(T));
}

inline void put_string(std::string& buf, const std::string& s) {
    if (s.size() > 0xffff) throw FormatError("name too long: " + s);
    put_pod(buf, static_cast<uint16_t>(s.size()));
    buf.append(s);
}

inline std::string encode_payload(const NamedTensor& t) {
    std::string out;
    const uint64_t n = t.elts();
    switch (t.dtype) {
        case Dtype::f32: {
            if (t.floats.size() != n) throw ShapeError("payload size mismatch: " + t.name);
            out.resize(n * 4);
            std::memcpy(out.data(), t.floats.data(), out.size());
            break;
        }
        case Dtype::f16: {
            if (t.floats.size() != n) throw ShapeError("payload size mismatch: " + t.name);
            out.resize(n * 2);
            auto* h = reinterpret_cast<uint16_t*>(out.data());
            for (uint64_t i = 0; i < n; i++) h[i] = f32_to_f16_bits(t.floats[i]);
            break;
        }
        case Dtype::u32: {
            if (t.u32s.size() != n) throw ShapeError("payload size mismatch: " + t.name);
            out.resize(n * 4);
            std::memcpy(out.data(), t.u32s.data(), out.size());
            break;
        }
        case Dtype::i8: {
            if (t.i8s.size() != n) throw ShapeError("payload size mismatch: " + t.name);
            out.resize(n);
            std::memcpy(out.data(), t.i8s.data(), out.size());
            break;
        }
        case Dtype::bit1: {
            if (t.bits.len != n) throw ShapeError("payload size mismatch: " + t.name);
            out.resize((n + 7) / 8, '\0');
            for (uint64_t i = 0; i < n; i++)
                if (t.bits.get(i)) out[i / 8] |= char(1u << (i % 8));
            break;
        }
    }
    return out;
}

}  // namespace detail

inline TensorDirectory write_tensor_file(const std::string& path, const std::string& config_json,
                                         const std::vector<NamedTensor>& tensors) {
    TensorDirectory dir;
    dir.config_json = config_json;
    for (const auto& t : tensors) {
        TensorEntry e;
        e.name = t.name;
        e.dtype = t.dtype;
        e.shape = t.shape;
        e.length = tensor_byte_length(t.dtype, t.elts());
        e.companion = t.companion;
        dir.entries.push_back(std::move(e));
    }
    dir.rebuild_index();

    // header size must be known before offsets can be assigned
    std::string header;
    auto encode_header = [&]() {
        header.clear();
        header.append(kMagic, sizeof(kMagic));
        detail::put_pod(header, kFormatVersion);
        detail::put_pod(header, uint32_t{1});  // endianness marker, little
        detail::put_pod(header, static_cast<uint64_t>(config_json.size()));
        header.append(config_json);
        detail::put_pod(header, static_cast<uint32_t>(dir.entries.size()));
        for (const auto& e : dir.entries) {
            detail::put_string(header, e.name);
            detail::put_pod(header, static_cast<uint8_t>(e.dtype));
            detail::put_pod(header, static_cast<uint8_t>(e.shape.size()));
            for (uint64_t d : e.shape) detail::put_pod(header, d);
            detail::put_pod(header, e.offset);
            detail::put_pod(header, e.length);
            detail::put_string(header, e.companion);
        }
    };
    encode_header();
    uint64_t cursor = (header.size() + kAlign - 1) / kAlign * kAlign;
    for (auto& e : dir.entries) {
        e.offset = cursor;
        cursor = (cursor + e.length + kAlign - 1) / kAlign * kAlign;
    }
    encode_header();  // re-encode with final offsets (header size is unchanged)

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    uint64_t pos = header.size();
    for (size_t i = 0; i < tensors.size(); i++) {
        const TensorEntry& e = dir.entries[i];
        const std::string pad(e.offset - pos, '\0');
        f.write(pad.data(), static_cast<std::streamsize>(pad.size()));
        const std::string payload = detail::encode_payload(tensors[i]);
        if (payload.size() != e.length) throw FormatError("payload length mismatch: " + e.name);
        f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        pos = e.offset + e.length;
    }
    f.flush();
    if (!f) throw IoError("write failed: " + path);
    log_debug("store: wrote %zu tensors (%llu bytes) to %s", tensors.size(),
              static_cast<unsigned long long>(pos), path.c_str());
    return dir;
}

inline TensorDirectory write_model(const Model& m, const std::string& path,
                                   const std::vector<NamedTensor>& extras = {}) {
    std::vector<NamedTensor> tensors = plan_model_tensors(m);
    tensors.insert(tensors.end(), extras.begin(), extras.end());
    return write_tensor_file(path, config_to_json(m.cfg), tensors);
}

// --- reading ---

class ModelFile {
  public:
    explicit ModelFile(const std::string& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) throw IoError("cannot open: " + path);
        file_size_ = static_cast<uint64_t>(::lseek(fd_, 0, SEEK_END));
        parse_header();
        validate();
    }

    ~ModelFile() {
        if (fd_ >= 0) ::close(fd_);
    }
    ModelFile(const ModelFile&) = delete;
    ModelFile& operator=(const ModelFile&) = delete;

    const TensorDirectory& dir() const { return dir_; }
    ModelConfig config() const { return config_from_json(dir_.config_json); }
    const std::string& path() const { return path_; }
    uint64_t file_size() const { return file_size_; }

    // Padding bytes between the header/tensors introduced by 64-byte alignment,
    // reported separately from tensor bytes.
    uint64_t alignment_padding_bytes() const {
        return file_size_ - header_size_ - dir_.total_tensor_bytes();
    }

    std::vector<uint8_t> read_raw(const TensorEntry& e) const {
        std::vector<uint8_t> buf(e.length);
        read_at(buf.data(), e.length, e.offset);
        return buf;
    }

    Vector fetch_vector(const std::string& name, MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        Vector out = decode_floats(e, read_raw(e));
        if (meter) meter->charge(component_of(name), e.length);
        return out;
    }

    Matrix fetch_matrix(const std::string& name, MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        if (e.shape.size() != 2) throw FormatError("not a matrix: " + name);
        Matrix m(e.shape[0], e.shape[1]);
        m.data = decode_floats(e, read_raw(e));
        if (meter) meter->charge(component_of(name), e.length);
        return m;
    }

    // Gathers the given rows only; charges |indices| * row-bytes. Rows are
    // returned in the order requested.
    Matrix fetch_rows(const std::string& name, const std::vector<uint32_t>& indices,
                      MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        if (e.shape.size() != 2) throw FormatError("not a matrix: " + name);
        if (e.dtype != Dtype::f32 && e.dtype != Dtype::f16)
            throw FormatError("row gather needs a float tensor: " + name);
        const uint64_t rb = e.row_bytes();
        Matrix out(indices.size(), e.shape[1]);
        std::vector<uint8_t> buf(rb);
        for (size_t i = 0; i < indices.size(); i++) {
            if (indices[i] >= e.shape[0])
                throw std::invalid_argument("row index out of range for " + name);
            read_at(buf.data(), rb, e.offset + uint64_t(indices[i]) * rb);
            decode_float_run(e.dtype, buf.data(), out.row(i), e.shape[1]);
        }
        if (meter) meter->charge(component_of(name), rb * indices.size());
        return out;
    }

    std::vector<uint32_t> fetch_u32(const std::string& name, MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        if (e.dtype != Dtype::u32) throw FormatError("not a u32 tensor: " + name);
        std::vector<uint32_t> out(e.elts());
        read_at(out.data(), e.length, e.offset);
        if (meter) meter->charge(component_of(name), e.length);
        return out;
    }

    QuantTensor1b fetch_bit1(const std::string& name, MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        if (e.dtype != Dtype::bit1) throw FormatError("not a bit1 tensor: " + name);
        if (e.companion.empty()) throw FormatError("bit1 tensor missing scales: " + name);
        QuantTensor1b q;
        q.rows = e.shape[0];
        q.cols = e.cols();
        q.sign_bits = Bitmask(e.elts());
        const auto raw = read_raw(e);
        for (uint64_t i = 0; i < e.elts(); i++)
            if (raw[i / 8] & (1u << (i % 8))) q.sign_bits.set(i, true);
        q.scales = fetch_vector(e.companion, meter);
        if (meter) meter->charge(component_of(name), e.length);
        return q;
    }

    QuantTensorI8 fetch_i8(const std::string& name, MemoryMeter* meter = nullptr) const {
        const TensorEntry& e = dir_.find(name);
        if (e.dtype != Dtype::i8) throw FormatError("not an i8 tensor: " + name);
        if (e.companion.empty()) throw FormatError("i8 tensor missing scales: " + name);
        QuantTensorI8 q;
        q.rows = e.shape[0];
        q.cols = e.cols();
        q.values.resize(e.elts());
        read_at(q.values.data(), e.length, e.offset);
        q.scales = fetch_vector(e.companion, meter);
        if (meter) meter->charge(component_of(name), e.length);
        return q;
    }

  private:
    void read_at(void* dst, uint64_t len, uint64_t offset) const {
        uint64_t done = 0;
        while (done < len) {
            const ssize_t n = ::pread(fd_, static_cast<uint8_t*>(dst) + done, len - done,
                                      static_cast<off_t>(offset + done));
            if (n < 0) throw IoError("read failed: " + path_);
            if (n == 0) throw IoError("truncated file: " + path_);
            done += static_cast<uint64_t>(n);
        }
    }

    template <typename T>
    T take_pod(const std::string& buf, uint64_t& pos) const {
        if (pos + sizeof(T) > buf.size()) throw IoError("truncated header: " + path_);
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }

    std::string take_string(const std::string& buf, uint64_t& pos) const {
        const uint16_t len = take_pod<uint16_t>(buf, pos);
        if (pos + len > buf.size()) throw IoError("truncated header: " + path_);
        std::string s = buf.substr(pos, len);
        pos += len;
        return s;
    }

    void parse_header() {
        char magic[8];
        if (file_size_ < sizeof(magic)) throw IoError("truncated file: " + path_);
        read_at(magic, sizeof(magic), 0);
        if (std::memcmp(magic, kMagic, sizeof(magic)) != 0)
            throw FormatError("bad magic in " + path_);

        // bounded header read: fixed part, then config, then entries
        std::string buf(std::min<uint64_t>(file_size_, 16 * 1024 * 1024), '\0');
        read_at(buf.data(), buf.size(), 0);
        uint64_t pos = 8;
        dir_.version = take_pod<uint32_t>(buf, pos);
        if (dir_.version != kFormatVersion)
            throw FormatError("unsupported version " + std::to_string(dir_.version));
        const uint32_t endian = take_pod<uint32_t>(buf, pos);
        if (endian != 1) throw FormatError("file is not little-endian");
        const uint64_t cfg_len = take_pod<uint64_t>(buf, pos);
        if (pos + cfg_len > buf.size()) throw IoError("truncated header: " + path_);
        dir_.config_json = buf.substr(pos, cfg_len);
        pos += cfg_len;
        const uint32_t n_entries = take_pod<uint32_t>(buf, pos);
        dir_.entries.resize(n_entries);
        for (auto& e : dir_.entries) {
            e.name = take_string(buf, pos);
            const uint8_t code = take_pod<uint8_t>(buf, pos);
            if (code > 4) throw FormatError("unknown dtype code " + std::to_string(code) +
                                            " for tensor " + e.name);
            e.dtype = static_cast<Dtype>(code);
            const uint8_t ndims = take_pod<uint8_t>(buf, pos);
            e.shape.resize(ndims);
            for (auto& d : e.shape) d = take_pod<uint64_t>(buf, pos);
            e.offset = take_pod<uint64_t>(buf, pos);
            e.length = take_pod<uint64_t>(buf, pos);
            e.companion = take_string(buf, pos);
        }
        header_size_ = pos;
        dir_.rebuild_index();
    }

    void validate() const {
        std::vector<const TensorEntry*> sorted;
        for (const auto& e : dir_.entries) {
            if (e.offset % kAlign != 0)
                throw FormatError("tensor " + e.name + " offset not 64-byte aligned");
            if (e.offset < header_size_ || e.offset + e.length > file_size_)
                throw IoError("tensor " + e.name + " out of file bounds");
            if (e.length != tensor_byte_length(e.dtype, e.elts()))
                throw FormatError("tensor " + e.name + " length does not match shape");
            if (!e.companion.empty() && !dir_.contains(e.companion))
                throw FormatError("tensor " + e.name + " companion missing: " + e.companion);
            sorted.push_back(&e);
        }
        std::sort(sorted.begin(), sorted.end(),
                  [](const TensorEntry* a, const TensorEntry* b) { return a->offset < b->offset; });
        for (size_t i = 1; i < sorted.size(); i++) {
            if (sorted[i - 1]->offset + sorted[i - 1]->length > sorted[i]->offset)
                throw FormatError("tensors " + sorted[i - 1]->name + " and " + sorted[i]->name +
                                  " overlap");
        }
    }

    static Vector decode_floats(const TensorEntry& e, const std::vector<uint8_t>& raw) {
        Vector out(e.elts());
        decode_float_run(e.dtype, raw.data(), out.data(), out.size());
        return out;
    }

    static void decode_float_run(Dtype d, const uint8_t* src, float* dst, size_t n) {
        if (d == Dtype::f32) {
            std::memcpy(dst, src, n * 4);
        } else if (d == Dtype::f16) {
            const auto* h = reinterpret_cast<const uint16_t*>(src);
            for (size_t i = 0; i < n; i++) dst[i] = f16_bits_to_f32(h[i]);
        } else {
            throw FormatError("tensor is not a float dtype");
        }
    }

    std::string path_;
    int fd_ = -1;
    uint64_t file_size_ = 0;
    uint64_t header_size_ = 0;
    TensorDirectory dir_;
};

// One layer's block weights. When include_ffn_mats is false the big cm.wk and
// cm.wv matrices stay on disk (the sparse path gathers their rows per token).
inline BlockWeights load_block_weights(const ModelFile& file, size_t layer,
                                       MemoryMeter* meter = nullptr, bool include_ffn_mats = true,
                                       bool* compressed = nullptr) {
    const auto& dir = file.dir();
    const std::string p = "blk." + std::to_string(layer) + ".";
    auto load_projection = [&](const std::string& name) -> Projection {
        if (dir.contains(name)) return file.fetch_matrix(name, meter);
        if (dir.contains(name + ".d")) {
            EnhancedLowRank e;
            e.l = file.fetch_matrix(name + ".L", meter);
            e.r = file.fetch_matrix(name + ".R", meter);
            e.d = file.fetch_vector(name + ".d", meter);
            if (compressed) *compressed = true;
            return e;
        }
        LowRankPair pair;
        pair.l = file.fetch_matrix(name + ".L", meter);
        pair.r = file.fetch_matrix(name + ".R", meter);
        if (compressed) *compressed = true;
        return pair;
    };
    BlockWeights b;
    b.wr = load_projection(p + "tm.wr");
    b.wk = load_projection(p + "tm.wk");
    b.wv = load_projection(p + "tm.wv");
    b.wg = load_projection(p + "tm.wg");
    b.wo = file.fetch_matrix(p + "tm.wo", meter);
    b.decay_raw = file.fetch_vector(p + "tm.decay_raw", meter);
    b.bonus = file.fetch_vector(p + "tm.bonus", meter);
    b.mix_r = file.fetch_vector(p + "tm.mix_r", meter);
    b.mix_k = file.fetch_vector(p + "tm.mix_k", meter);
    b.mix_v = file.fetch_vector(p + "tm.mix_v", meter);
    b.mix_g = file.fetch_vector(p + "tm.mix_g", meter);
    b.ln1_g = file.fetch_vector(p + "ln1.g", meter);
    b.ln1_b = file.fetch_vector(p + "ln1.b", meter);
    b.cm_wr = load_projection(p + "cm.wr");
    if (include_ffn_mats) {
        b.cm_wk = file.fetch_matrix(p + "cm.wk", meter);
        b.cm_wv = file.fetch_matrix(p + "cm.wv", meter);
    }
    b.mix_cm_r = file.fetch_vector(p + "cm.mix_r", meter);
    b.mix_cm_k = file.fetch_vector(p + "cm.mix_k", meter);
    b.ln2_g = file.fetch_vector(p + "ln2.g", meter);
    b.ln2_b = file.fetch_vector(p + "ln2.b", meter);
    return b;
}

// Directory byte totals of one layer's block tensors, split by the tag the
// loader charges them under. Mirrors load_block_weights element for element.
inline std::map<MemTag, uint64_t> block_tensor_bytes(const TensorDirectory& dir, size_t layer,
                                                     bool include_ffn_mats = true) {
    const std::string p = "blk." + std::to_string(layer) + ".";
    std::map<MemTag, uint64_t> out;
    for (const TensorEntry& e : dir.entries) {
        if (e.name.rfind(p, 0) != 0) continue;
        if (!include_ffn_mats && (e.name == p + "cm.wk" || e.name == p + "cm.wv")) continue;
        out[component_of(e.name)] += e.length;
    }
    return out;
}

// Loads every base-model tensor into memory, charging the meter per component.
// Projections come back in whatever form the file holds (dense or factored).
inline Model load_model(const ModelFile& file, MemoryMeter* meter = nullptr) {
    Model m;
    m.cfg = file.config();
    m.emb = file.fetch_matrix("emb", meter);
    m.ln_out_g = file.fetch_vector("ln_out.g", meter);
    m.ln_out_b = file.fetch_vector("ln_out.b", meter);
    m.head = file.fetch_matrix("head.h", meter);
    m.blocks.resize(m.cfg.n_layers);
    for (size_t l = 0; l < m.cfg.n_layers; l++)
        m.blocks[l] = load_block_weights(file, l, meter, true, &m.compressed);
    return m;
}

// Analytic per-component byte counts for a base model laid out by
// plan_model_tensors, computed from the config alone. `targets` lists the
// projections stored in factored form (rank dim/k, pair layout).
inline std::map<MemTag, uint64_t> analytic_base_bytes(const ModelConfig& cfg, size_t k = 0,
                                                      const std::set<CompressTarget>& targets = {}) {
    const uint64_t d = cfg.dim, f = cfg.ffn_hidden(), v = cfg.vocab, l = cfg.n_layers;
    const uint64_t square = d * d * 2;  // f16
    const uint64_t factored = k ? 2 * d * (d / k) * 2 : square;
    auto proj_bytes = [&](CompressTarget t) { return targets.count(t) ? factored : square; };

    std::map<MemTag, uint64_t> out;
    out[MemTag::embedding] = v * d * 2;
    out[MemTag::head] = v * d * 2 + 2 * d * 4;  // head.h + ln_out
    out[MemTag::time_mix] =
        l * (proj_bytes(CompressTarget::tm_r) + proj_bytes(CompressTarget::tm_k) +
             proj_bytes(CompressTarget::tm_v) + proj_bytes(CompressTarget::tm_g) + square +
             6 * d * 4 + 2 * d * 4);  // squares + wo + decay/bonus/4 mixes + ln1
    out[MemTag::channel_mix] =
        l * (proj_bytes(CompressTarget::cm_r) + 2 * f * d * 2 + 2 * d * 4 + 2 * d * 4);
    return out;
}

}  // namespace rwkvl
