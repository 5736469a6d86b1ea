#include "cadtrans/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>

namespace cadtrans {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'D', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw FormatError(std::string("container truncated while reading ") + what, pos);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = static_cast<std::uint32_t>(buf[pos]) |
                          (static_cast<std::uint32_t>(buf[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(buf[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(buf[pos + 3]) << 24);
        pos += 4;
        return v;
    }
    const std::uint8_t* raw(std::size_t n, const char* what) {
        need(n, what);
        const std::uint8_t* p = buf.data() + pos;
        pos += n;
        return p;
    }
};

template <typename T, typename U>
void put_scalar_le(std::vector<std::uint8_t>& out, T v) {
    static_assert(sizeof(T) == sizeof(U));
    const U bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i)
        out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

template <typename T, typename U>
T read_scalar_le(const std::uint8_t* p) {
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        bits |= static_cast<U>(p[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

}  // namespace

Container::Section& Container::add_section(const std::string& name, std::uint32_t dtype,
                                           Shape extents) {
    if (find(name)) throw ConfigError("container: duplicate section name " + name);
    Section s;
    s.name = name;
    s.dtype = dtype;
    s.extents = std::move(extents);
    sections_.push_back(std::move(s));
    return sections_.back();
}

void Container::add_tensor(const std::string& name, const Tensor& t) {
    if (t.dtype() == DType::F32) {
        auto& s = add_section(name, 1, t.shape());
        const float* p = t.data<float>();
        s.f32.assign(p, p + t.numel());
    } else {
        auto& s = add_section(name, 2, t.shape());
        const double* p = t.data<double>();
        s.f64.assign(p, p + t.numel());
    }
}

void Container::add_i32(const std::string& name, Shape extents,
                        std::vector<std::int32_t> values) {
    if (shape_numel(extents) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("container: " + std::to_string(values.size()) +
                         " values for extents " + shape_str(extents));
    auto& s = add_section(name, 3, std::move(extents));
    s.i32 = std::move(values);
}

void Container::add_text(const std::string& name, const std::string& text) {
    std::vector<std::int32_t> bytes;
    bytes.reserve(text.size());
    for (unsigned char c : text) bytes.push_back(static_cast<std::int32_t>(c));
    const auto count = static_cast<std::int64_t>(bytes.size());
    add_i32(name, {count}, std::move(bytes));
}

const Container::Section* Container::find(const std::string& name) const {
    for (const auto& s : sections_)
        if (s.name == name) return &s;
    return nullptr;
}

bool Container::has(const std::string& name) const { return find(name) != nullptr; }

const Container::Section& Container::section(const std::string& name) const {
    const Section* s = find(name);
    if (!s) throw InputError("container: no section named " + name);
    return *s;
}

Tensor Container::tensor(const std::string& name) const {
    const Section& s = section(name);
    if (s.dtype == 1) return Tensor::from_f32(s.extents, s.f32);
    if (s.dtype == 2) return Tensor::from_f64(s.extents, s.f64);
    throw InputError("container: section " + name + " holds integers, not reals");
}

std::vector<std::int32_t> Container::i32(const std::string& name) const {
    const Section& s = section(name);
    if (s.dtype != 3) throw InputError("container: section " + name + " is not i32");
    return s.i32;
}

std::string Container::text(const std::string& name) const {
    const Section& s = section(name);
    if (s.dtype != 3) throw InputError("container: section " + name + " is not text");
    std::string out;
    out.reserve(s.i32.size());
    for (auto v : s.i32) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return out;
}

std::vector<std::uint8_t> Container::serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& s : sections_) {
        put_u32(out, static_cast<std::uint32_t>(s.name.size()));
        out.insert(out.end(), s.name.begin(), s.name.end());
        put_u32(out, s.dtype);
        put_u32(out, static_cast<std::uint32_t>(s.extents.size()));
        for (auto e : s.extents) put_u32(out, static_cast<std::uint32_t>(e));
        if (s.dtype == 1)
            for (float v : s.f32) put_scalar_le<float, std::uint32_t>(out, v);
        else if (s.dtype == 2)
            for (double v : s.f64) put_scalar_le<double, std::uint64_t>(out, v);
        else
            for (std::int32_t v : s.i32) put_scalar_le<std::int32_t, std::uint32_t>(out, v);
    }
    return out;
}

void Container::save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw InputError("short write to " + path);
}

Container Container::parse(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    const std::uint8_t* magic = r.raw(4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic, not a CADT container", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version), 4);
    const std::uint32_t count = r.u32("section count");

    Container c;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("section name length");
        const std::uint8_t* name_bytes = r.raw(name_len, "section name");
        std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
        const std::uint32_t dtype = r.u32("dtype");
        if (dtype < 1 || dtype > 3)
            throw FormatError("invalid dtype code " + std::to_string(dtype) +
                                  " in section " + name,
                              r.pos - 4);
        const std::uint32_t rank = r.u32("rank");
        Shape extents;
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t e = r.u32("extent");
            extents.push_back(static_cast<std::int64_t>(e));
            numel *= e;
        }
        if (c.find(name))
            throw FormatError("duplicate section name " + name, r.pos);
        Section& s = c.add_section(name, dtype, std::move(extents));
        const std::size_t elem = dtype == 2 ? 8 : 4;
        const std::uint8_t* payload =
            r.raw(static_cast<std::size_t>(numel) * elem, ("payload of " + name).c_str());
        if (dtype == 1) {
            s.f32.resize(static_cast<std::size_t>(numel));
            for (std::int64_t j = 0; j < numel; ++j)
                s.f32[static_cast<std::size_t>(j)] =
                    read_scalar_le<float, std::uint32_t>(payload + j * 4);
        } else if (dtype == 2) {
            s.f64.resize(static_cast<std::size_t>(numel));
            for (std::int64_t j = 0; j < numel; ++j)
                s.f64[static_cast<std::size_t>(j)] =
                    read_scalar_le<double, std::uint64_t>(payload + j * 8);
        } else {
            s.i32.resize(static_cast<std::size_t>(numel));
            for (std::int64_t j = 0; j < numel; ++j)
                s.i32[static_cast<std::size_t>(j)] =
                    read_scalar_le<std::int32_t, std::uint32_t>(payload + j * 4);
        }
    }
    if (r.pos != bytes.size())
        throw FormatError("trailing bytes after last section", r.pos);
    return c;
}

Container Container::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return parse(bytes);
}

void save_checkpoint(const ModelState& state, const std::string& path,
                     const std::string& meta_text) {
    Container c;
    c.add_text("meta", meta_text);
    for (const auto& p : state.params()) c.add_tensor("param:" + p.name, p.value);
    for (const auto& [name, value] : state.buffers()) c.add_tensor("buffer:" + name, value);
    c.save(path);
}

ModelState load_checkpoint(const std::string& path, std::string* meta_out) {
    Container c = Container::load(path);
    if (meta_out) *meta_out = c.has("meta") ? c.text("meta") : "";
    ModelState state;
    for (const auto& s : c.sections()) {
        if (s.name.rfind("param:", 0) == 0)
            state.add_param(s.name.substr(6), c.tensor(s.name));
        else if (s.name.rfind("buffer:", 0) == 0)
            state.add_buffer(s.name.substr(7), c.tensor(s.name));
    }
    return state;
}

const char* const kMetricsHeader =
    "epoch,L_im,L_cst,L_cmk,L_total,easy_count,hard_count,pl_acc_easy,pl_acc_all,"
    "target_acc";

namespace {
std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}
}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
    std::string line = std::to_string(r.epoch);
    for (double v : {r.l_im, r.l_cst, r.l_cmk, r.l_total}) line += "," + fmt_double(v);
    line += "," + std::to_string(r.easy_count);
    line += "," + std::to_string(r.hard_count);
    for (double v : {r.pl_acc_easy, r.pl_acc_all, r.target_acc}) line += "," + fmt_double(v);
    return line;
}

void write_metrics_header(std::ostream& os) { os << kMetricsHeader << "\n"; }

void append_metrics_row(std::ostream& os, const MetricsRow& row) {
    os << format_metrics_row(row) << "\n";
}

}  // namespace cadtrans
