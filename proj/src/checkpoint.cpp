#include "r2mf/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace r2mf {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
   public:
    template <typename U>
    void put(U v) {
        char b[sizeof(U)];
        std::memcpy(b, &v, sizeof(U));
        out_.append(b, sizeof(U));
    }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    void put_floats(const std::vector<float>& v) {
        out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    }
    std::string& bytes() { return out_; }

   private:
    std::string out_;
};

class Reader {
   public:
    Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}
    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, s_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string get_string(const char* what) {
        const auto n = get<std::uint32_t>(what);
        need(n, what);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::vector<float> get_floats(std::size_t n, const char* what) {
        if (n > (end_ - pos_) / sizeof(float)) fail(std::string("truncated ") + what);
        std::vector<float> v(n);
        std::memcpy(v.data(), s_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return v;
    }
    bool done() const { return pos_ == end_; }
    [[noreturn]] static void fail(const std::string& msg) { throw CheckpointError("checkpoint: " + msg); }

   private:
    void need(std::size_t n, const char* what) const {
        if (n > end_ - pos_) fail(std::string("truncated ") + what);
    }
    const std::string& s_;
    std::size_t end_, pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace

Checkpoint Checkpoint::capture(const Model<float>& model, const AdamState<float>* adam,
                               std::vector<EpochRecord> history) {
    Checkpoint c;
    c.config = model.config();
    for (const auto& e : model.params().entries()) {
        c.tensors.push_back(NamedTensor{e.name, e.trainable, e.value->dims(),
                                        std::vector<float>(e.value->data().begin(), e.value->data().end())});
    }
    if (adam) c.adam = *adam;
    c.history = std::move(history);
    return c;
}

Model<float> Checkpoint::restore() const {
    Model<float> model(config);
    const auto& entries = model.params().entries();
    if (entries.size() != tensors.size()) {
        throw CheckpointError("checkpoint: holds " + std::to_string(tensors.size()) + " tensors, config expects " +
                              std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const auto& t = tensors[i];
        if (t.name != e.name || t.trainable != e.trainable || !(t.dims == e.value->dims()) ||
            t.values.size() != e.value->size()) {
            throw CheckpointError("checkpoint: tensor '" + t.name + "' " + to_string(t.dims) +
                                  " does not match model tensor '" + e.name + "' " + to_string(e.value->dims()));
        }
        std::copy(t.values.begin(), t.values.end(), e.value->data().begin());
    }
    return model;
}

std::string encode_checkpoint(const Checkpoint& c) {
    Writer w;
    w.bytes() += "R2MF";
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put_string(c.config.to_text());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        if (t.values.size() != t.dims.size()) throw std::invalid_argument("encode_checkpoint: bad tensor '" + t.name + "'");
        w.put_string(t.name);
        w.put<std::uint8_t>(t.trainable ? 1 : 0);
        for (std::size_t d : {t.dims.n, t.dims.c, t.dims.h, t.dims.w}) w.put<std::uint64_t>(d);
        w.put_floats(t.values);
    }
    w.put<std::uint8_t>(c.adam ? 1 : 0);
    if (c.adam) {
        w.put<std::uint64_t>(c.adam->step);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(c.adam->m.size()));
        for (std::size_t i = 0; i < c.adam->m.size(); ++i) {
            w.put<std::uint64_t>(c.adam->m[i].size());
            w.put_floats(c.adam->m[i]);
            w.put_floats(c.adam->v[i]);
        }
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.history.size()));
    for (const auto& e : c.history) {
        w.put<std::uint64_t>(e.epoch);
        w.put<double>(e.train_loss);
        w.put<double>(e.val_loss);
        w.put<double>(e.lr);
    }
    w.put<std::uint32_t>(crc_of(w.bytes(), w.bytes().size()));
    return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 12 || bytes.compare(0, 4, "R2MF") != 0) Reader::fail("bad magic");
    const std::size_t body = bytes.size() - 4;
    Reader r(bytes, body);
    r.get<std::uint32_t>("magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        Reader::fail("unsupported version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body, 4);
    if (stored_crc != crc_of(bytes, body)) Reader::fail("CRC mismatch (file is corrupt)");

    Checkpoint c;
    try {
        c.config = ModelConfig::from_text(r.get_string("config"));
    } catch (const std::invalid_argument& e) {
        Reader::fail(std::string("invalid config: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>("tensor table");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.get_string("tensor name");
        t.trainable = r.get<std::uint8_t>("tensor kind") != 0;
        t.dims.n = r.get<std::uint64_t>("dims");
        t.dims.c = r.get<std::uint64_t>("dims");
        t.dims.h = r.get<std::uint64_t>("dims");
        t.dims.w = r.get<std::uint64_t>("dims");
        t.values = r.get_floats(t.dims.size(), "tensor values");
        c.tensors.push_back(std::move(t));
    }
    if (r.get<std::uint8_t>("adam flag")) {
        AdamState<float> a;
        a.step = r.get<std::uint64_t>("adam step");
        const auto n = r.get<std::uint32_t>("adam count");
        for (std::uint32_t i = 0; i < n; ++i) {
            const auto len = r.get<std::uint64_t>("adam moment size");
            a.m.push_back(r.get_floats(len, "adam moments"));
            a.v.push_back(r.get_floats(len, "adam moments"));
        }
        c.adam = std::move(a);
    }
    const auto rows = r.get<std::uint32_t>("history");
    for (std::uint32_t i = 0; i < rows; ++i) {
        EpochRecord e;
        e.epoch = r.get<std::uint64_t>("history");
        e.train_loss = r.get<double>("history");
        e.val_loss = r.get<double>("history");
        e.lr = r.get<double>("history");
        c.history.push_back(e);
    }
    if (!r.done()) Reader::fail("trailing bytes before CRC");

    // Validate the tensor table against the architecture the config describes.
    const Model<float> probe(c.config);
    const auto& entries = probe.params().entries();
    if (entries.size() != c.tensors.size()) Reader::fail("tensor count does not match the config");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& t = c.tensors[i];
        if (t.name != entries[i].name || t.trainable != entries[i].trainable || !(t.dims == entries[i].value->dims()))
            Reader::fail("tensor '" + t.name + "' " + to_string(t.dims) + " does not match the config");
    }
    if (c.adam) {
        const auto params = probe.params().trainable();
        if (c.adam->m.size() != params.size()) Reader::fail("adam state does not match the parameter list");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (c.adam->m[i].size() != params[i].var->size()) Reader::fail("adam moment size mismatch");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

}  // namespace r2mf
