#include "sdiff/kernels/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace sdiff::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa initial_isa() {
    Isa isa = detect_isa();
    if (const char* env = std::getenv("SDIFF_ISA")) {
        const std::string v(env);
        if (v == "scalar") isa = Isa::scalar;
        else if (v == "avx2" && isa_supported(Isa::avx2)) isa = Isa::avx2;
    }
    return isa;
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{initial_isa()};
    return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
    }
    return "unknown";
}

bool isa_supported(Isa isa) {
    switch (isa) {
        case Isa::scalar: return true;
        case Isa::avx2: return avx2::table<float>() != nullptr && cpu_has_avx2();
    }
    return false;
}

Isa detect_isa() { return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar; }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
    if (!isa_supported(isa))
        throw std::invalid_argument("ISA not supported on this CPU: " + std::string(isa_name(isa)));
    current().store(isa, std::memory_order_relaxed);
}

template <class T>
const Table<T>& table(Isa isa) {
    if (isa == Isa::avx2) {
        if (const Table<T>* t = avx2::table<T>(); t && cpu_has_avx2()) return *t;
        throw std::invalid_argument("AVX2 kernels unavailable");
    }
    return scalar::table<T>();
}

template <class T>
const Table<T>& active() {
    return table<T>(active_isa());
}

template const Table<float>& table<float>(Isa);
template const Table<double>& table<double>(Isa);
template const Table<float>& active<float>();
template const Table<double>& active<double>();

}  // namespace sdiff::kernels
