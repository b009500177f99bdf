#pragma once
// Versioned named-array archive: a JSON metadata block followed by typed,
// shaped little-endian arrays. Writes are atomic (temp file, fsync, rename).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdiff/core/tensor.hpp"

namespace sdiff {

inline constexpr std::uint32_t kArchiveVersion = 1;

class Archive {
public:
    enum class DType : std::uint8_t { f32 = 1, f64 = 2, i32 = 3 };

    nlohmann::json meta = nlohmann::json::object();

    void put(const std::string& name, const Tensor<float>& t);
    void put(const std::string& name, const Tensor<double>& t);
    void put(const std::string& name, const std::vector<int>& v, Shape shape = {});

    bool has(const std::string& name) const { return arrays_.count(name) != 0; }
    DType dtype(const std::string& name) const;
    Shape shape(const std::string& name) const;
    std::vector<std::string> names() const;

    /// Values converted to the requested element type.
    template <class T>
    Tensor<T> get(const std::string& name) const;
    std::vector<int> get_ints(const std::string& name) const;

    std::vector<std::uint8_t> serialize() const;
    static Archive deserialize(const std::vector<std::uint8_t>& bytes);
    void save(const std::string& path) const;
    static Archive load(const std::string& path);

private:
    struct Entry {
        DType dtype;
        Shape shape;
        std::vector<std::uint8_t> bytes;
    };
    const Entry& entry(const std::string& name) const;
    std::map<std::string, Entry> arrays_;
};

/// Writes `bytes` to `path` via a sibling temp file and rename.
void write_atomic(const std::string& path, const std::string& bytes);
void write_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace sdiff
