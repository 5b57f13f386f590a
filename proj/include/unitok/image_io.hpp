#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unitok/tensor.hpp"

namespace unitok {

// 8-bit interleaved RGB image.
struct ImageU8 {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb;  // h*w*3

    bool empty() const { return rgb.empty(); }
};

// Lossless PNG (8-bit RGB, filter 0 on write; filters 0-4 and RGBA accepted on read).
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// Bilinear resize (independent of aspect; callers pick the policy).
ImageU8 resize_bilinear(const ImageU8& img, int new_w, int new_h);

// Table-2-style eval preprocessing: scale shorter side to `res`, center-crop res x res.
ImageU8 resize_shorter_center_crop(const ImageU8& img, int res);

// u8 [0,255] <-> float [-1,1]
Tensor to_tensor(const ImageU8& img);                       // [H,W,3]
ImageU8 to_image(const Tensor& t);                          // clamps to [-1,1]
Tensor stack_images(const std::vector<Tensor>& images);     // N x [H,W,3] -> [N,H,W,3]

}  // namespace unitok
