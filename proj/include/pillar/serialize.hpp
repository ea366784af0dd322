#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "pillar/laplace.hpp"

namespace pillar {

// Expert model container:
//   "PGPM" magic, u8 version, then tagged sections until end of data.
//   Each section is a 4-byte tag, a u64 LE payload length and the payload:
//     KSPC  f64 signal_variance, f64 length_scale, f64 jitter
//     INDX  u64 count, count x u64 training indices
//     XSUB  PNF1 blob of the training features
//     YSUB  u32 num_classes, u32 n, n x u32 labels
//     MODE  u32 n, u32 C, n*C f64 row-major posterior mode
//     GRAD  u32 n, u32 C, n*C f64 row-major likelihood gradient at the mode
//     LMLV  f64 Laplace log marginal likelihood
// All integers and floats little-endian. Unknown tags are skipped.
inline constexpr std::uint8_t kModelFormatVersion = 1;

// Throws FormatError if the training features are not float32-representable,
// since XSUB stores them as PNF1.
std::string encode_expert(const ExpertModel<double> &model);
ExpertModel<double> decode_expert(std::string_view bytes,
                                  std::string_view source = {});

void save_expert(const std::filesystem::path &path,
                 const ExpertModel<double> &model);
ExpertModel<double> load_expert(const std::filesystem::path &path);

} // namespace pillar
