#include "sdiff/io/archive.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <fcntl.h>
#include <unistd.h>

#include "sdiff/core/error.hpp"

namespace sdiff {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'I', 'F', 'F', 'A', 'R', '\0'};

template <class V>
void put_pod(std::vector<std::uint8_t>& out, V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
}

struct Reader {
    const std::vector<std::uint8_t>& b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > b.size()) throw IoError("archive truncated");
    }
    template <class V>
    V pod() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, b.data() + pos, sizeof(V));
        pos += sizeof(V);
        return v;
    }
    std::vector<std::uint8_t> raw(std::size_t n) {
        need(n);
        std::vector<std::uint8_t> v(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return v;
    }
};

std::size_t elem_size(Archive::DType d) { return d == Archive::DType::f64 ? 8 : 4; }

template <class S>
std::vector<std::uint8_t> as_bytes(const S* p, std::size_t n) {
    std::vector<std::uint8_t> v(n * sizeof(S));
    if (n) std::memcpy(v.data(), p, v.size());
    return v;
}

template <class S, class T>
void convert(const std::vector<std::uint8_t>& bytes, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        S s;
        std::memcpy(&s, bytes.data() + i * sizeof(S), sizeof(S));
        out[i] = static_cast<T>(s);
    }
}

}  // namespace

void Archive::put(const std::string& name, const Tensor<float>& t) {
    arrays_[name] = {DType::f32, t.shape(), as_bytes(t.ptr(), static_cast<std::size_t>(t.numel()))};
}
void Archive::put(const std::string& name, const Tensor<double>& t) {
    arrays_[name] = {DType::f64, t.shape(), as_bytes(t.ptr(), static_cast<std::size_t>(t.numel()))};
}
void Archive::put(const std::string& name, const std::vector<int>& v, Shape shape) {
    if (shape.empty()) shape = {static_cast<std::int64_t>(v.size())};
    if (numel_of(shape) != static_cast<std::int64_t>(v.size())) throw ShapeError("archive int array shape mismatch: " + name);
    std::vector<std::int32_t> w(v.begin(), v.end());
    arrays_[name] = {DType::i32, std::move(shape), as_bytes(w.data(), w.size())};
}

const Archive::Entry& Archive::entry(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw IoError("archive has no array named '" + name + "'");
    return it->second;
}

Archive::DType Archive::dtype(const std::string& name) const { return entry(name).dtype; }
Shape Archive::shape(const std::string& name) const { return entry(name).shape; }

std::vector<std::string> Archive::names() const {
    std::vector<std::string> v;
    for (const auto& [k, _] : arrays_) v.push_back(k);
    return v;
}

template <class T>
Tensor<T> Archive::get(const std::string& name) const {
    const Entry& e = entry(name);
    Tensor<T> t(e.shape);
    const auto n = static_cast<std::size_t>(t.numel());
    switch (e.dtype) {
        case DType::f32: convert<float>(e.bytes, t.ptr(), n); break;
        case DType::f64: convert<double>(e.bytes, t.ptr(), n); break;
        case DType::i32: convert<std::int32_t>(e.bytes, t.ptr(), n); break;
    }
    return t;
}

std::vector<int> Archive::get_ints(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != DType::i32) throw IoError("array '" + name + "' is not integer");
    std::vector<int> v(e.bytes.size() / 4);
    convert<std::int32_t>(e.bytes, v.data(), v.size());
    return v;
}

std::vector<std::uint8_t> Archive::serialize() const {
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    put_pod(out, kArchiveVersion);
    const std::string m = meta.dump();
    put_pod(out, static_cast<std::uint64_t>(m.size()));
    out.insert(out.end(), m.begin(), m.end());
    put_pod(out, static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& [name, e] : arrays_) {
        put_pod(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_pod(out, static_cast<std::uint8_t>(e.dtype));
        put_pod(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) put_pod(out, static_cast<std::int64_t>(d));
        put_pod(out, static_cast<std::uint64_t>(e.bytes.size()));
        out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    }
    return out;
}

Archive Archive::deserialize(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    const auto magic = r.raw(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0) throw IoError("not an sdiff archive");
    const auto version = r.pod<std::uint32_t>();
    if (version != kArchiveVersion) throw IoError("unsupported archive version " + std::to_string(version));
    Archive a;
    const auto mlen = r.pod<std::uint64_t>();
    const auto mraw = r.raw(mlen);
    try {
        a.meta = nlohmann::json::parse(mraw.begin(), mraw.end());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("archive metadata: ") + e.what());
    }
    const auto count = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = r.pod<std::uint32_t>();
        const auto nraw = r.raw(nlen);
        std::string name(nraw.begin(), nraw.end());
        const auto dt = r.pod<std::uint8_t>();
        if (dt < 1 || dt > 3) throw IoError("bad dtype in archive entry " + name);
        Entry e{static_cast<DType>(dt), {}, {}};
        const auto rank = r.pod<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.pod<std::int64_t>());
        const auto nbytes = r.pod<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(numel_of(e.shape)) * elem_size(e.dtype))
            throw IoError("size mismatch in archive entry " + name);
        e.bytes = r.raw(nbytes);
        a.arrays_[name] = std::move(e);
    }
    return a;
}

void Archive::save(const std::string& path) const { write_atomic(path, serialize()); }

Archive Archive::load(const std::string& path) { return deserialize(read_file(path)); }

void write_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw IoError("cannot open " + tmp + " for writing");
    std::size_t done = 0;
    while (done < bytes.size()) {
        const ssize_t w = ::write(fd, bytes.data() + done, bytes.size() - done);
        if (w <= 0) {
            ::close(fd);
            ::unlink(tmp.c_str());
            throw IoError("write failed: " + tmp);
        }
        done += static_cast<std::size_t>(w);
    }
    ::fsync(fd);
    ::close(fd);
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        ::unlink(tmp.c_str());
        throw IoError("rename to " + path + " failed: " + ec.message());
    }
}

void write_atomic(const std::string& path, const std::string& bytes) {
    write_atomic(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

template Tensor<float> Archive::get(const std::string&) const;
template Tensor<double> Archive::get(const std::string&) const;

}  // namespace sdiff
