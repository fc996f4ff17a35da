#include "ccdiff/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace ccdiff {

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("short write: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("rename failed: " + tmp + " -> " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_pgm(const std::string& path, const Tensor& img01) {
    int H, W;
    if (img01.rank() == 3 && img01.dim(0) == 1) {
        H = img01.dim(1);
        W = img01.dim(2);
    } else if (img01.rank() == 2) {
        H = img01.dim(0);
        W = img01.dim(1);
    } else {
        throw ShapeError("write_pgm: expected (1,H,W) or (H,W), got " + shape_str(img01.shape()));
    }
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(H) * W);
    const double* p = img01.data();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
        double v = p[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    atomic_write_file(path, out);
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t& off) {
    if (off + 4 > buf.size()) throw IoError("truncated file (u32)");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += 4;
    return v;
}

double get_f64(const std::string& buf, std::size_t& off) {
    if (off + 8 > buf.size()) throw IoError("truncated file (f64)");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::string buf = "CNPP";
    put_u32(buf, 1); // format version
    put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_u32(buf, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) put_u32(buf, static_cast<std::uint32_t>(t.dim(d)));
        for (std::int64_t i = 0; i < t.numel(); ++i) put_f64(buf, t.data()[i]);
    }
    atomic_write_file(path, buf);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
    const std::string buf = read_file(path);
    std::size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "CNPP") != 0)
        throw IoError("not a checkpoint file (bad magic): " + path);
    off = 4;
    const std::uint32_t version = get_u32(buf, off);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = get_u32(buf, off);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(buf, off);
        if (off + name_len > buf.size()) throw IoError("truncated file (name)");
        std::string name = buf.substr(off, name_len);
        off += name_len;
        const std::uint32_t rank = get_u32(buf, off);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d)
            shape.push_back(static_cast<int>(get_u32(buf, off)));
        Tensor t = Tensor::zeros(shape);
        for (std::int64_t j = 0; j < t.numel(); ++j) t.mutable_data()[j] = get_f64(buf, off);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

} // namespace ccdiff
