#include "metapolyp/netpbm.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "metapolyp/error.hpp"

namespace metapolyp {

namespace {

class HeaderReader {
   public:
    HeaderReader(std::span<const std::uint8_t> bytes, std::size_t pos) : b_(bytes), pos_(pos) {}

    std::size_t pos() const { return pos_; }
    /// Offset of the most recent number's first digit.
    std::size_t token_start() const { return token_; }

    // Skips whitespace and '#' comments that run to the end of the line.
    void skip_space() {
        while (pos_ < b_.size()) {
            if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
            } else if (std::isspace(b_[pos_])) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space();
        if (pos_ >= b_.size()) throw ParseError(std::string("unexpected end of header reading ") + what, pos_);
        if (!std::isdigit(b_[pos_])) throw ParseError(std::string("expected ") + what, pos_);
        const std::size_t start = pos_;
        token_ = start;
        std::size_t v = 0;
        while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
            v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
            if (v > (std::size_t{1} << 24)) throw ParseError(std::string(what) + " is too large", start);
            ++pos_;
        }
        return v;
    }

    // Exactly one whitespace byte separates maxval from the raster.
    void single_space() {
        if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw ParseError("expected whitespace after maxval", pos_);
        ++pos_;
    }

   private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_;
    std::size_t token_ = 0;
};

}  // namespace

Raster decode_pnm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P') throw ParseError("missing Netpbm magic", 0);
    Raster r;
    if (bytes[1] == '5') {
        r.channels = 1;
    } else if (bytes[1] == '6') {
        r.channels = 3;
    } else {
        throw ParseError("unsupported Netpbm variant P" + std::string(1, static_cast<char>(bytes[1])), 1);
    }
    HeaderReader h(bytes, 2);
    r.width = h.number("width");
    if (r.width == 0) throw ParseError("zero image width", h.token_start());
    r.height = h.number("height");
    if (r.height == 0) throw ParseError("zero image height", h.token_start());
    const std::size_t maxval = h.number("maxval");
    if (maxval == 0 || maxval > 255) {
        throw ParseError("maxval " + std::to_string(maxval) + " outside 1..255", h.token_start());
    }
    h.single_space();
    const std::size_t start = h.pos();
    const std::size_t n = r.width * r.height * r.channels;
    if (bytes.size() - start < n) {
        throw ParseError("raster truncated: expected " + std::to_string(n) + " bytes, found " +
                             std::to_string(bytes.size() - start),
                         bytes.size());
    }
    r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                    bytes.begin() + static_cast<std::ptrdiff_t>(start + n));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t v = r.pixels[i];
        if (v > maxval) throw ParseError("sample exceeds maxval", start + i);
        if (maxval != 255) r.pixels[i] = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    }
    return r;
}

std::vector<std::uint8_t> encode_pnm(const Raster& r) {
    if (r.channels != 1 && r.channels != 3) throw UsageError("encode_pnm: only 1 or 3 channels are supported");
    if (r.pixels.size() != r.width * r.height * r.channels) throw UsageError("encode_pnm: pixel count does not match extents");
    const std::string header = std::string(r.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(r.width) + " " +
                               std::to_string(r.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
    return out;
}

Raster read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_pnm(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.detail(), e.offset());
    }
}

void write_pnm(const std::filesystem::path& path, const Raster& raster) {
    const auto bytes = encode_pnm(raster);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

}  // namespace metapolyp
