#include "klab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace klab {

namespace {

constexpr char kMagic[8] = {'K', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

class Writer {
public:
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void array(const DenseArray& a) {
        u32(static_cast<std::uint32_t>(a.rank()));
        for (std::size_t e : a.shape()) u64(e);
        raw(a.data(), a.size() * sizeof(double));
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t n) : data_(data), size_(n) {}

    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        check(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    DenseArray array() {
        const std::uint32_t rank = u32();
        if (rank > 8) throw DataError("checkpoint: implausible array rank");
        std::vector<std::size_t> shape;
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<std::size_t>(u64()));
            count *= shape.back();
        }
        check(count * sizeof(double));
        std::vector<double> data(count);
        std::memcpy(data.data(), data_ + pos_, count * sizeof(double));
        pos_ += count * sizeof(double);
        return DenseArray(std::move(shape), std::move(data));
    }
    void raw(void* p, std::size_t n) {
        check(n);
        std::memcpy(p, data_ + pos_, n);
        pos_ += n;
    }

private:
    void check(std::size_t n) const {
        if (pos_ + n > size_) throw DataError("checkpoint: truncated payload");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
    for (const Entry& e : arrays)
        if (e.name == name) return &e;
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(ck.version);
    w.u64(ck.step);
    w.u64(ck.adam_t);

    w.u32(static_cast<std::uint32_t>(ck.rng_states.size()));
    for (const auto& [name, state] : ck.rng_states) {
        w.str(name);
        for (std::uint64_t word : state) w.u64(word);
    }
    w.u32(static_cast<std::uint32_t>(ck.scalars.size()));
    for (const auto& [name, v] : ck.scalars) {
        w.str(name);
        w.f64(v);
    }
    w.u32(static_cast<std::uint32_t>(ck.counters.size()));
    for (const auto& [name, v] : ck.counters) {
        w.str(name);
        w.u64(v);
    }
    w.u32(static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& e : ck.arrays) {
        w.str(e.name);
        w.array(e.value);
        w.u32(e.moment1.size() == e.value.size() && e.moment2.size() == e.value.size() ? 1 : 0);
        if (e.moment1.size() == e.value.size() && e.moment2.size() == e.value.size()) {
            w.array(e.moment1);
            w.array(e.moment2);
        }
    }

    const std::uint64_t checksum = fnv1a(w.buffer().data(), w.buffer().size());
    w.u64(checksum);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(w.buffer().data()),
              static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t))
        throw DataError("checkpoint: checksum failure (file too short): " + path);
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof stored);
    if (fnv1a(bytes.data(), body) != stored)
        throw DataError("checkpoint: checksum mismatch: " + path);

    Reader r(bytes.data(), body);
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw DataError("checkpoint: bad magic bytes: " + path);

    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != Checkpoint::kVersion)
        throw DataError("checkpoint: version mismatch: file has version " +
                        std::to_string(ck.version) + ", this build reads version " +
                        std::to_string(Checkpoint::kVersion));
    ck.step = r.u64();
    ck.adam_t = r.u64();

    const std::uint32_t n_rng = r.u32();
    for (std::uint32_t i = 0; i < n_rng; ++i) {
        std::string name = r.str();
        std::array<std::uint64_t, 4> st{};
        for (auto& word : st) word = r.u64();
        ck.rng_states.emplace(std::move(name), st);
    }
    const std::uint32_t n_scalars = r.u32();
    for (std::uint32_t i = 0; i < n_scalars; ++i) {
        std::string name = r.str();
        double v;
        r.raw(&v, sizeof v);
        ck.scalars.emplace(std::move(name), v);
    }
    const std::uint32_t n_counters = r.u32();
    for (std::uint32_t i = 0; i < n_counters; ++i) {
        std::string name = r.str();
        ck.counters.emplace(std::move(name), r.u64());
    }
    const std::uint32_t n_arrays = r.u32();
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        Checkpoint::Entry e;
        e.name = r.str();
        e.value = r.array();
        if (r.u32() == 1) {
            e.moment1 = r.array();
            e.moment2 = r.array();
        }
        ck.arrays.push_back(std::move(e));
    }
    return ck;
}

}  // namespace klab
