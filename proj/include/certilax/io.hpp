#pragma once

#include <cstdint>
#include <string>

#include "certilax/model.hpp"

namespace certilax {

/// Model files are JSON: {"layers": [{"W": [[...]], "b": [...]}, ...],
/// "meta": {"input_dim": n, "classes": q}}.  W is row-major; the last layer
/// is the affine output layer.  The reader validates the dimension chain.
MlpNetwork load_model(const std::string& path);
void save_model(const MlpNetwork& net, const std::string& path);
std::string model_to_json(const MlpNetwork& net);
MlpNetwork model_from_json(const std::string& text);

/// Input files are JSON: {"x": [...]}.
Vector load_input(const std::string& path);
void save_input(const Vector& x, const std::string& path);

/// Random classifier with layer widths dims = (n_1, hidden..., q); entries
/// are gaussian scaled by 1 / sqrt(fan-in).  Same seed, same network.
MlpNetwork generate_model(const std::vector<int>& dims, uint64_t seed);

/// FNV-1a 64-bit content digest, hex encoded (stable run to run).
std::string digest_bytes(const std::string& bytes);
std::string digest_file(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& text);

}  // namespace certilax
