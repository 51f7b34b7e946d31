#pragma once

// Versioned checkpoint container shared by both models.
//
// Layout: magic bytes "MVCKPT1", then a metadata block (u32 byte length +
// that many bytes of UTF-8 "key=value\n" lines), then u32 tensor count and
// per tensor: u32 name length + name, u32 rank, u32 dims[rank], row-major
// 32-bit little-endian float payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "levelblend/common.hpp"
#include "levelblend/tensor.hpp"

namespace lvb {

class Checkpoint {
public:
    static constexpr const char* kMagic = "MVCKPT1";

    void set_meta(const std::string& key, const std::string& value) {
        for (auto& kv : meta_)
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        meta_.emplace_back(key, value);
    }

    const std::string& meta(const std::string& key) const {
        for (const auto& kv : meta_)
            if (kv.first == key) return kv.second;
        fail("CheckpointIncompatible", "missing metadata key '" + key + "'");
    }

    bool has_meta(const std::string& key) const {
        for (const auto& kv : meta_)
            if (kv.first == key) return true;
        return false;
    }

    const std::vector<std::pair<std::string, std::string>>& meta_entries() const { return meta_; }

    void add_tensor(const std::string& name, const num::Shape& shape, const std::vector<float>& data) {
        if (num::shape_numel(shape) != data.size())
            fail("ShapeMismatch", "checkpoint tensor '" + name + "' shape/data mismatch");
        entries_.push_back(Entry{name, shape, data});
    }

    void add_tensor(const std::string& name, const num::Tensor& t) {
        add_tensor(name, t.shape(), t.data());
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return true;
        return false;
    }

    const std::vector<float>& tensor_data(const std::string& name) const {
        return find(name).data;
    }

    const num::Shape& tensor_shape(const std::string& name) const { return find(name).shape; }

    num::Tensor tensor(const std::string& name, bool requires_grad = false) const {
        const Entry& e = find(name);
        return num::Tensor::leaf(e.shape, e.data, requires_grad);
    }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) fail("IoError", "cannot open '" + path + "' for writing");
        out.write(kMagic, 7);
        std::string meta;
        for (const auto& kv : meta_) meta += kv.first + "=" + kv.second + "\n";
        write_u32(out, static_cast<std::uint32_t>(meta.size()));
        out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
        write_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& e : entries_) {
            write_u32(out, static_cast<std::uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            write_u32(out, static_cast<std::uint32_t>(e.shape.size()));
            for (int d : e.shape) write_u32(out, static_cast<std::uint32_t>(d));
            write_f32_array(out, e.data);
        }
        if (!out) fail("IoError", "short write to '" + path + "'");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail("IoError", "cannot open '" + path + "'");
        char magic[7];
        in.read(magic, 7);
        if (!in || std::memcmp(magic, kMagic, 7) != 0)
            fail("CheckpointIncompatible", "'" + path + "' is not a checkpoint file");
        Checkpoint ck;
        std::uint32_t meta_len = read_u32(in, path);
        std::string meta(meta_len, '\0');
        in.read(meta.data(), meta_len);
        if (!in) fail("CheckpointIncompatible", "truncated metadata in '" + path + "'");
        std::size_t pos = 0;
        while (pos < meta.size()) {
            std::size_t nl = meta.find('\n', pos);
            if (nl == std::string::npos) nl = meta.size();
            std::string line = meta.substr(pos, nl - pos);
            pos = nl + 1;
            if (line.empty()) continue;
            std::size_t eq = line.find('=');
            if (eq == std::string::npos) fail("CheckpointIncompatible", "malformed metadata line");
            ck.meta_.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        }
        std::uint32_t count = read_u32(in, path);
        for (std::uint32_t i = 0; i < count; ++i) {
            std::uint32_t name_len = read_u32(in, path);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            std::uint32_t rank = read_u32(in, path);
            num::Shape shape(rank);
            std::size_t n = 1;
            for (std::uint32_t d = 0; d < rank; ++d) {
                shape[d] = static_cast<int>(read_u32(in, path));
                n *= static_cast<std::size_t>(shape[d]);
            }
            std::vector<float> data(n);
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
            if (!in) fail("CheckpointIncompatible", "truncated tensor '" + name + "' in '" + path + "'");
            ck.entries_.push_back(Entry{std::move(name), std::move(shape), std::move(data)});
        }
        return ck;
    }

private:
    struct Entry {
        std::string name;
        num::Shape shape;
        std::vector<float> data;
    };

    const Entry& find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e;
        fail("CheckpointIncompatible", "missing tensor '" + name + "'");
    }

    static void write_u32(std::ofstream& out, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }

    static std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in) fail("CheckpointIncompatible", "truncated file '" + path + "'");
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    static void write_f32_array(std::ofstream& out, const std::vector<float>& v) {
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    }

    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<Entry> entries_;
};

} // namespace lvb
