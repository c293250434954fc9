#pragma once

#include "dvd/types.hpp"

#include <filesystem>
#include <string>

namespace dvd {

/// Binary PPM (P6, maxval 255) ↔ [3,H,W] tensor in [0,1].
void write_ppm(const Tensor& image, const std::filesystem::path& path);
Tensor read_ppm(const std::filesystem::path& path);

/// Rounds to the nearest 1/255 step, as a write/read round trip would.
Tensor quantize8(const Tensor& image);

std::string frame_name(Index index);

/// Writes frames as 00000.ppm, 00001.ppm, ... (creates the directory).
void write_sequence(const FrameSequence& seq, const std::filesystem::path& dir);
/// Reads every *.ppm in lexicographic order.
FrameSequence read_sequence(const std::filesystem::path& dir);

}  // namespace dvd
