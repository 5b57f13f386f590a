#include "unitok/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace unitok {

namespace {

constexpr uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.w < 1 || img.h < 1 || img.rgb.size() != static_cast<size_t>(img.w) * img.h * 3)
        throw DomainError("write_png: malformed image buffer for '" + path + "'");
    // raw scanlines with filter byte 0
    std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (1 + static_cast<size_t>(img.w) * 3));
    for (int y = 0; y < img.h; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (1 + static_cast<size_t>(img.w) * 3);
        row[0] = 0;
        std::memcpy(row + 1, img.rgb.data() + static_cast<size_t>(y) * img.w * 3,
                    static_cast<size_t>(img.w) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png: deflate failed for '" + path + "'");
    compressed.resize(bound);

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_png: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write_png: short write to '" + path + "'");
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png: cannot open '" + path + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kPngSig, 8) != 0)
        throw std::runtime_error("read_png: '" + path + "' is not a PNG file");

    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> idat;
    size_t p = 8;
    while (p + 8 <= buf.size()) {
        uint32_t len = get_u32(buf.data() + p);
        if (p + 12 + len > buf.size()) throw std::runtime_error("read_png: truncated chunk in '" + path + "'");
        const char* type = reinterpret_cast<const char*>(buf.data() + p + 4);
        const uint8_t* payload = buf.data() + p + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("read_png: bad IHDR in '" + path + "'");
            w = static_cast<int>(get_u32(payload));
            h = static_cast<int>(get_u32(payload + 4));
            int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || (color != 2 && color != 6) || interlace != 0)
                throw std::runtime_error("read_png: '" + path +
                                         "' unsupported format (need 8-bit RGB/RGBA, no interlace)");
            channels = color == 2 ? 3 : 4;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        p += 12 + len;
    }
    if (w < 1 || h < 1 || idat.empty())
        throw std::runtime_error("read_png: '" + path + "' missing IHDR or IDAT");

    size_t stride = static_cast<size_t>(w) * channels;
    std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw std::runtime_error("read_png: inflate failed for '" + path + "'");

    // undo per-scanline filters
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * stride);
    int bpp = channels;
    for (int y = 0; y < h; ++y) {
        uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        uint8_t* dst = pixels.data() + static_cast<size_t>(y) * stride;
        const uint8_t* up = y > 0 ? pixels.data() + static_cast<size_t>(y - 1) * stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            int a = x >= static_cast<size_t>(bpp) ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error("read_png: '" + path + "' unknown filter type");
            }
            dst[x] = static_cast<uint8_t>(v & 0xff);
        }
    }

    ImageU8 img;
    img.w = w;
    img.h = h;
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    for (size_t i = 0; i < static_cast<size_t>(w) * h; ++i)
        for (int c = 0; c < 3; ++c) img.rgb[i * 3 + c] = pixels[i * channels + c];
    return img;
}

ImageU8 resize_bilinear(const ImageU8& img, int new_w, int new_h) {
    if (img.empty()) throw DomainError("resize: empty image");
    if (new_w == img.w && new_h == img.h) return img;
    ImageU8 out;
    out.w = new_w;
    out.h = new_h;
    out.rgb.resize(static_cast<size_t>(new_w) * new_h * 3);
    // pixel-center alignment, the usual convention for image resampling
    double sx = static_cast<double>(img.w) / new_w;
    double sy = static_cast<double>(img.h) / new_h;
    for (int y = 0; y < new_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int ya = std::clamp(y0, 0, img.h - 1), yb = std::clamp(y0 + 1, 0, img.h - 1);
        for (int x = 0; x < new_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int xa = std::clamp(x0, 0, img.w - 1), xb = std::clamp(x0 + 1, 0, img.w - 1);
            for (int c = 0; c < 3; ++c) {
                auto at = [&](int yy, int xx) {
                    return static_cast<double>(img.rgb[(static_cast<size_t>(yy) * img.w + xx) * 3 + c]);
                };
                double v = (1 - wy) * ((1 - wx) * at(ya, xa) + wx * at(ya, xb)) +
                           wy * ((1 - wx) * at(yb, xa) + wx * at(yb, xb));
                out.rgb[(static_cast<size_t>(y) * new_w + x) * 3 + c] =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

ImageU8 resize_shorter_center_crop(const ImageU8& img, int res) {
    if (res < 1) throw DomainError("resize: target resolution must be positive");
    int short_side = std::min(img.w, img.h);
    int new_w = static_cast<int>(std::lround(static_cast<double>(img.w) * res / short_side));
    int new_h = static_cast<int>(std::lround(static_cast<double>(img.h) * res / short_side));
    new_w = std::max(new_w, res);
    new_h = std::max(new_h, res);
    ImageU8 r = resize_bilinear(img, new_w, new_h);
    int ox = (new_w - res) / 2, oy = (new_h - res) / 2;
    ImageU8 out;
    out.w = res;
    out.h = res;
    out.rgb.resize(static_cast<size_t>(res) * res * 3);
    for (int y = 0; y < res; ++y)
        std::memcpy(out.rgb.data() + static_cast<size_t>(y) * res * 3,
                    r.rgb.data() + (static_cast<size_t>(y + oy) * r.w + ox) * 3,
                    static_cast<size_t>(res) * 3);
    return out;
}

Tensor to_tensor(const ImageU8& img) {
    Tensor t(Shape{img.h, img.w, 3});
    for (size_t i = 0; i < img.rgb.size(); ++i)
        t.data[i] = static_cast<float>(img.rgb[i]) / 127.5f - 1.0f;
    return t;
}

ImageU8 to_image(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[2] != 3)
        throw ShapeError("to_image: expected [H,W,3], got " + shape_str(t.shape));
    ImageU8 img;
    img.h = t.shape[0];
    img.w = t.shape[1];
    img.rgb.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) {
        float v = std::clamp(t.data[i], -1.0f, 1.0f);
        img.rgb[i] = static_cast<uint8_t>(std::lround((v + 1.0f) * 127.5f));
    }
    return img;
}

Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw DomainError("stack_images: empty batch");
    const Shape& s = images[0].shape;
    Tensor out(Shape{static_cast<int>(images.size()), s[0], s[1], s[2]});
    int64_t per = images[0].numel();
    for (size_t i = 0; i < images.size(); ++i) {
        if (!same_shape(images[i].shape, s))
            throw ShapeError("stack_images: mixed shapes " + shape_str(s) + " vs " +
                             shape_str(images[i].shape));
        std::copy(images[i].data.begin(), images[i].data.end(),
                  out.data.begin() + static_cast<int64_t>(i) * per);
    }
    return out;
}

}  // namespace unitok
