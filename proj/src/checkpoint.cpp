#include "slap/checkpoint.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <vector>

#include "slap/error.hpp"

namespace slap::io {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[4] = {'S', 'L', 'A', 'P'};

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct Writer {
    std::vector<unsigned char> buf;

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const std::string& name, const nn::TensorData<float>& t) {
        str(name);
        u32(static_cast<std::uint32_t>(t.rows));
        u32(static_cast<std::uint32_t>(t.cols));
        bytes(t.v.data(), t.v.size() * sizeof(float));
    }
};

struct Reader {
    const unsigned char* p;
    const unsigned char* end;

    void bytes(void* out, std::size_t n) {
        if (static_cast<std::size_t>(end - p) < n) throw Error::data("checkpoint: truncated file");
        std::memcpy(out, p, n);
        p += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        if (static_cast<std::size_t>(end - p) < n) throw Error::data("checkpoint: truncated string");
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    nn::TensorData<float> tensor() {
        const std::uint32_t r = u32();
        const std::uint32_t c = u32();
        if (static_cast<std::uint64_t>(r) * c > (1ull << 31)) {
            throw Error::data("checkpoint: implausible tensor size");
        }
        nn::TensorData<float> t(r, c);
        bytes(t.v.data(), t.v.size() * sizeof(float));
        return t;
    }
};

} // namespace

void save_checkpoint(const train::TrainState& state, const std::string& path) {
    auto& st = const_cast<train::TrainState&>(state); // named_params needs mutable refs
    auto params = model::named_params(st.student);
    auto teacher = model::named_params(st.teacher);

    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u64(config_digest(state.mcfg));
    w.u64(state.step);
    w.str(model_config_json(state.mcfg));

    std::uint32_t count = static_cast<std::uint32_t>(params.size() + teacher.size() + 1);
    for (const auto& p : params) count += state.opt.count(p.name) ? 2 : 0;
    w.u32(count);
    for (auto& p : params) w.tensor("param/" + p.name, p.var.val());
    for (auto& p : teacher) w.tensor("teacher/" + p.name, p.var.val());
    for (auto& p : params) {
        auto it = state.opt.find(p.name);
        if (it == state.opt.end()) continue;
        w.tensor("opt_m/" + p.name, it->second.m);
        w.tensor("opt_v/" + p.name, it->second.v);
    }
    w.tensor("state/center", state.center);

    const std::uint32_t crc = crc32(w.buf.data(), w.buf.size());
    w.u32(crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error::io("cannot write checkpoint: " + path);
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw Error::io("checkpoint write failed: " + path);
}

train::TrainState load_checkpoint(const std::string& path, const ModelConfig* expect) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error::io("cannot open checkpoint: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw Error::data("checkpoint: truncated file");

    const std::uint32_t stored_crc = [&] {
        std::uint32_t v;
        std::memcpy(&v, buf.data() + buf.size() - 4, 4);
        return v;
    }();
    if (crc32(buf.data(), buf.size() - 4) != stored_crc) {
        throw Error::data("checkpoint: integrity check failed (CRC mismatch)");
    }

    Reader r{buf.data(), buf.data() + buf.size() - 4};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw Error::data("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw Error::data("checkpoint: format version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kVersion) + ")");
    }
    const std::uint64_t digest = r.u64();
    const std::uint64_t step = r.u64();
    const std::string cfg_json = r.str();

    const ModelConfig mcfg = model_config_from_json(cfg_json);
    if (config_digest(mcfg) != digest) {
        throw Error::data("checkpoint: embedded config does not match its digest");
    }
    if (expect && config_digest(*expect) != digest) {
        throw Error::config("checkpoint: architecture digest mismatch with requested config");
    }

    train::TrainState state = train::init_state(mcfg, 0);
    state.step = step;
    state.opt.clear();

    std::unordered_map<std::string, nn::Var<float>> student, teacher;
    for (auto& p : model::named_params(state.student)) student.emplace(p.name, p.var);
    for (auto& p : model::named_params(state.teacher)) teacher.emplace(p.name, p.var);

    auto fill = [](nn::Var<float>& dst, nn::TensorData<float>&& src, const std::string& name) {
        if (dst.val().rows != src.rows || dst.val().cols != src.cols) {
            throw Error::data("checkpoint: shape mismatch for tensor " + name);
        }
        dst.val() = std::move(src);
    };

    std::set<std::string> filled;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        nn::TensorData<float> t = r.tensor();
        if (!filled.insert(name).second) throw Error::data("checkpoint: duplicate tensor " + name);
        if (name.rfind("param/", 0) == 0) {
            auto it = student.find(name.substr(6));
            if (it == student.end()) throw Error::data("checkpoint: unknown tensor " + name);
            fill(it->second, std::move(t), name);
        } else if (name.rfind("teacher/", 0) == 0) {
            auto it = teacher.find(name.substr(8));
            if (it == teacher.end()) throw Error::data("checkpoint: unknown tensor " + name);
            fill(it->second, std::move(t), name);
        } else if (name.rfind("opt_m/", 0) == 0) {
            state.opt[name.substr(6)].m = std::move(t);
        } else if (name.rfind("opt_v/", 0) == 0) {
            state.opt[name.substr(6)].v = std::move(t);
        } else if (name == "state/center") {
            if (t.rows != 1 || t.cols != mcfg.proto.k) {
                throw Error::data("checkpoint: center shape mismatch");
            }
            state.center = std::move(t);
        } else {
            throw Error::data("checkpoint: unknown tensor " + name);
        }
    }
    for (const auto& [name, var] : student) {
        if (!filled.count("param/" + name)) throw Error::data("checkpoint: missing tensor param/" + name);
    }
    for (const auto& [name, var] : teacher) {
        if (!filled.count("teacher/" + name)) {
            throw Error::data("checkpoint: missing tensor teacher/" + name);
        }
    }
    for (auto& [name, adam] : state.opt) {
        auto it = student.find(name);
        if (it == student.end()) throw Error::data("checkpoint: optimizer state for unknown param " + name);
        const auto& v = it->second.val();
        if (adam.m.rows != v.rows || adam.m.cols != v.cols || adam.v.rows != v.rows ||
            adam.v.cols != v.cols) {
            throw Error::data("checkpoint: optimizer state shape mismatch for " + name);
        }
    }
    return state;
}

} // namespace slap::io
