#include "metapolyp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "metapolyp/error.hpp"

namespace metapolyp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

constexpr char kMagic[4] = {'M', 'P', 'L', 'Y'};
// Guards against absurd allocations from corrupted length fields.
constexpr std::uint64_t kMaxRank = 8;

class Writer {
   public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof(T));
    }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out.insert(out.end(), p, p + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
   public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    void need(std::uint64_t n, const char* what) const {
        if (n > b_.size() - pos_) {
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  std::string("checkpoint truncated while reading ") + what + " at byte " +
                                      std::to_string(pos_));
        }
    }
    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::uint64_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void copy(void* dst, std::uint64_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, b_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == b_.size(); }

   private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [k, t] : tensors) {
        if (k == name) return t;
    }
    throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint has no tensor '" + name + "'");
}

const std::string& Checkpoint::meta(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
        if (k == key) return v;
    }
    throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint has no metadata '" + key + "'");
}

bool Checkpoint::has_meta(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
        if (k == key) return true;
    }
    return false;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint64_t>(d);
        w.bytes(t.raw(), t.size() * sizeof(float));
    }
    w.put<std::uint64_t>(ckpt.metadata.size());
    for (const auto& [k, v] : ckpt.metadata) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(k.size()));
        w.bytes(k.data(), k.size());
        w.put<std::uint64_t>(v.size());
        w.bytes(v.data(), v.size());
    }
    return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        if (bytes.size() < 4 && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0) {
            throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated inside the magic");
        }
        throw CheckpointError(CheckpointError::Kind::BadMagic, "not a checkpoint: bad magic");
    }
    Reader r(bytes.subspan(4));
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                              "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    const auto count = r.get<std::uint64_t>("tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name = r.str(r.get<std::uint32_t>("name length"), "tensor name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank == 0 || rank > kMaxRank) {
            throw CheckpointError(CheckpointError::Kind::Malformed, "tensor '" + name + "' has invalid rank");
        }
        Shape shape(rank);
        std::uint64_t elems = 1;
        for (auto& d : shape) {
            d = r.get<std::uint64_t>("extent");
            if (d == 0) throw CheckpointError(CheckpointError::Kind::Malformed, "tensor '" + name + "' has zero extent");
            if (elems > (std::uint64_t{1} << 40) / d) {
                throw CheckpointError(CheckpointError::Kind::Malformed, "tensor '" + name + "' is implausibly large");
            }
            elems *= d;
        }
        r.need(elems * sizeof(float), "tensor data");
        Tensor t(shape);
        r.copy(t.raw(), elems * sizeof(float), "tensor data");
        c.put(name, std::move(t));
    }
    const auto meta = r.get<std::uint64_t>("metadata count");
    for (std::uint64_t i = 0; i < meta; ++i) {
        auto key = r.str(r.get<std::uint32_t>("key length"), "metadata key");
        auto value = r.str(r.get<std::uint64_t>("value length"), "metadata value");
        c.put_meta(std::move(key), std::move(value));
    }
    if (!r.done()) throw CheckpointError(CheckpointError::Kind::Malformed, "trailing bytes after checkpoint");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot move checkpoint into " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace metapolyp
