#ifndef IEDP_PNG_IO_HPP
#define IEDP_PNG_IO_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "iedp/common.hpp"

namespace iedp {

struct PngImage {
  Index w = 0, h = 0;
  int channels = 0;   // 1 or 3
  int bit_depth = 0;  // 8 or 16
  std::vector<std::uint8_t> data8;    // interleaved, when bit_depth == 8
  std::vector<std::uint16_t> data16;  // when bit_depth == 16
};

void write_png_rgb8(const std::string& path, Index w, Index h, const std::uint8_t* rgb);
void write_png_gray8(const std::string& path, Index w, Index h, const std::uint8_t* gray);
void write_png_gray16(const std::string& path, Index w, Index h, const std::uint16_t* gray);
// Indexed-color PNG; pixels hold palette indices.
void write_png_paletted(const std::string& path, Index w, Index h, const std::uint8_t* idx,
                        const std::vector<std::array<std::uint8_t, 3>>& palette);

PngImage read_png(const std::string& path);

}  // namespace iedp

#endif  // IEDP_PNG_IO_HPP
