#pragma once

#include "core.hpp"
#include "tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace ssdnf {

// NTC tensor container. Layout, all little-endian:
//   magic "NTC1"
//   record count: u32
//   per record: name length u16, name bytes,
//               dtype u8 (0=f32, 1=f64, 2=u8), ndim u8, dims u32 each,
//               raw payload
struct NtcRecord {
    std::string name;
    uint8_t dtype = 0;
    std::vector<uint32_t> dims;
    std::vector<uint8_t> bytes;

    int64_t count() const {
        int64_t n = 1;
        for (uint32_t d : dims) n *= int64_t(d);
        return n;
    }
    static size_t dtype_size(uint8_t dt) { return dt == 0 ? 4 : dt == 1 ? 8 : 1; }
};

class NtcFile {
public:
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    size_t record_count() const { return records_.size(); }
    const std::vector<NtcRecord>& records() const { return records_; }

    const NtcRecord& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError(strcat_msg("ntc: no record named '", name, "'"));
        return records_[it->second];
    }

    void add(NtcRecord rec) {
        if (has(rec.name)) throw IoError(strcat_msg("ntc: duplicate record name '", rec.name, "'"));
        size_t want = size_t(rec.count()) * NtcRecord::dtype_size(rec.dtype);
        if (rec.bytes.size() != want)
            throw IoError(strcat_msg("ntc: record '", rec.name, "' carries ", rec.bytes.size(),
                                     " bytes, dims require ", want));
        index_[rec.name] = records_.size();
        records_.push_back(std::move(rec));
    }

    void add_f32(const std::string& name, const std::vector<uint32_t>& dims, const float* data) {
        NtcRecord r;
        r.name = name;
        r.dtype = 0;
        r.dims = dims;
        r.bytes.resize(size_t(r.count()) * 4);
        for (int64_t i = 0; i < r.count(); ++i) put_f32(r.bytes.data() + i * 4, data[i]);
        add(std::move(r));
    }

    void add_f64(const std::string& name, const std::vector<uint32_t>& dims, const double* data) {
        NtcRecord r;
        r.name = name;
        r.dtype = 1;
        r.dims = dims;
        r.bytes.resize(size_t(r.count()) * 8);
        for (int64_t i = 0; i < r.count(); ++i) put_f64(r.bytes.data() + i * 8, data[i]);
        add(std::move(r));
    }

    void add_u8(const std::string& name, const std::vector<uint32_t>& dims, const uint8_t* data) {
        NtcRecord r;
        r.name = name;
        r.dtype = 2;
        r.dims = dims;
        r.bytes.assign(data, data + size_t(r.count()));
        add(std::move(r));
    }

    void add_scalar(const std::string& name, double v) { add_f64(name, {1}, &v); }

    double scalar(const std::string& name) const {
        const NtcRecord& r = get(name);
        if (r.count() != 1) throw IoError(strcat_msg("ntc: record '", name, "' is not scalar"));
        if (r.dtype == 0) return double(get_f32(r.bytes.data()));
        if (r.dtype == 1) return get_f64(r.bytes.data());
        return double(r.bytes[0]);
    }

    void add_tensor(const std::string& name, const Tensor& t) {
        std::vector<uint32_t> dims;
        for (int d : t.shape()) dims.push_back(uint32_t(d));
#ifdef SSDNF_REAL64
        add_f64(name, dims, t.data().data());
#else
        add_f32(name, dims, t.data().data());
#endif
    }

    // Exact decode of an f64 record; use instead of tensor() when the
    // payload must not pass through the (possibly 32-bit) real type.
    std::vector<double> doubles(const std::string& name) const {
        const NtcRecord& r = get(name);
        if (r.dtype != 1) throw IoError(strcat_msg("ntc: record '", name, "' is not f64"));
        std::vector<double> out(static_cast<size_t>(r.count()));
        for (int64_t i = 0; i < r.count(); ++i) out[size_t(i)] = get_f64(r.bytes.data() + i * 8);
        return out;
    }

    Tensor tensor(const std::string& name) const {
        const NtcRecord& r = get(name);
        Shape shape;
        for (uint32_t d : r.dims) shape.push_back(int(d));
        Tensor t(shape);
        if (r.dtype == 0)
            for (int64_t i = 0; i < r.count(); ++i) t.data()[size_t(i)] = real(get_f32(r.bytes.data() + i * 4));
        else if (r.dtype == 1)
            for (int64_t i = 0; i < r.count(); ++i) t.data()[size_t(i)] = real(get_f64(r.bytes.data() + i * 8));
        else
            for (int64_t i = 0; i < r.count(); ++i) t.data()[size_t(i)] = real(r.bytes[size_t(i)]);
        return t;
    }

    std::vector<uint8_t> serialize() const {
        std::vector<uint8_t> out;
        out.insert(out.end(), {'N', 'T', 'C', '1'});
        push_u32(out, uint32_t(records_.size()));
        for (const auto& r : records_) {
            push_u16(out, uint16_t(r.name.size()));
            out.insert(out.end(), r.name.begin(), r.name.end());
            out.push_back(r.dtype);
            out.push_back(uint8_t(r.dims.size()));
            for (uint32_t d : r.dims) push_u32(out, d);
            out.insert(out.end(), r.bytes.begin(), r.bytes.end());
        }
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError(strcat_msg("ntc: cannot open '", path, "' for writing"));
        auto bytes = serialize();
        f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        if (!f) throw IoError(strcat_msg("ntc: short write to '", path, "'"));
    }

    static NtcFile parse(const std::vector<uint8_t>& bytes) {
        NtcFile file;
        size_t pos = 0;
        auto need = [&](size_t n, const std::string& what) {
            if (pos + n > bytes.size())
                throw IoError(strcat_msg("ntc: truncated record (", what, ")"));
        };
        need(4, "magic");
        if (std::memcmp(bytes.data(), "NTC1", 4) != 0) throw IoError("ntc: bad magic, not an NTC1 file");
        pos = 4;
        need(4, "record count");
        uint32_t count = read_u32(bytes.data() + pos);
        pos += 4;
        for (uint32_t i = 0; i < count; ++i) {
            need(2, strcat_msg("name length of record ", i));
            uint16_t nlen = read_u16(bytes.data() + pos);
            pos += 2;
            need(nlen, strcat_msg("name of record ", i));
            NtcRecord r;
            r.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), nlen);
            pos += nlen;
            need(2, r.name);
            r.dtype = bytes[pos++];
            if (r.dtype > 2) throw IoError(strcat_msg("ntc: record '", r.name, "' has unknown dtype"));
            uint8_t ndim = bytes[pos++];
            need(size_t(ndim) * 4, r.name);
            for (uint8_t d = 0; d < ndim; ++d) {
                r.dims.push_back(read_u32(bytes.data() + pos));
                pos += 4;
            }
            size_t payload = size_t(r.count()) * NtcRecord::dtype_size(r.dtype);
            need(payload, r.name);
            r.bytes.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.begin() + std::ptrdiff_t(pos + payload));
            pos += payload;
            file.add(std::move(r));
        }
        return file;
    }

    static NtcFile read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError(strcat_msg("ntc: cannot open '", path, "'"));
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse(bytes);
    }

private:
    static size_t dims_count(const std::vector<uint32_t>& dims) {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
    static void push_u16(std::vector<uint8_t>& v, uint16_t x) {
        v.push_back(uint8_t(x & 0xff));
        v.push_back(uint8_t(x >> 8));
    }
    static void push_u32(std::vector<uint8_t>& v, uint32_t x) {
        for (int i = 0; i < 4; ++i) v.push_back(uint8_t((x >> (8 * i)) & 0xff));
    }
    static uint16_t read_u16(const uint8_t* p) { return uint16_t(p[0] | (uint16_t(p[1]) << 8)); }
    static uint32_t read_u32(const uint8_t* p) {
        return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
    }
    static void put_f32(uint8_t* p, float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int i = 0; i < 4; ++i) p[i] = uint8_t((bits >> (8 * i)) & 0xff);
    }
    static float get_f32(const uint8_t* p) {
        uint32_t bits = read_u32(p);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    static void put_f64(uint8_t* p, double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) p[i] = uint8_t((bits >> (8 * i)) & 0xff);
    }
    static double get_f64(const uint8_t* p) {
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= uint64_t(p[i]) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::vector<NtcRecord> records_;
    std::map<std::string, size_t> index_;
};

} // namespace ssdnf
