#pragma once

// Binary checkpoints: a text header with the architecture block followed by
// named little-endian float32 tensors.
//
//   moose-ckpt-v1
//   [config]
//   key=value ...
//   [tensors]
//   tensor <name> <ndims> <d0> ... \n <raw bytes>
//   end

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "moose/model.hpp"

namespace moose {

void write_model(std::ostream& os, const PyramidModel& model);
PyramidModel read_model(std::istream& is);

void save_model(const std::filesystem::path& path, const PyramidModel& model);
PyramidModel load_model(const std::filesystem::path& path);

// Named tensor list I/O shared by the model and ensemble formats.
void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t);
// Reads `tensor ...` entries until `end`.
std::vector<std::pair<std::string, Tensor>> read_tensor_entries(std::istream& is);

}  // namespace moose
